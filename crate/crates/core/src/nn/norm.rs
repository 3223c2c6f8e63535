//! Group normalization over (C, H, W) tensors.

use ndarray::{Array1, Array3};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub groups: usize,
    pub eps: f64,
}

pub struct GroupNormCache {
    x: Array3<f64>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels {channels} not divisible by groups {groups}");
        GroupNorm { gamma: Array1::ones(channels), beta: Array1::zeros(channels), groups, eps: 1e-5 }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, GroupNormCache) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let per = c / self.groups;
        let m = (per * h * w) as f64;
        let mut mean = vec![0.0; self.groups];
        let mut inv_std = vec![0.0; self.groups];
        let mut out = Array3::zeros((c, h, w));
        for g in 0..self.groups {
            let c0 = g * per;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ch in c0..c0 + per {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[[ch, y, xx]];
                        sum += v;
                        sq += v * v;
                    }
                }
            }
            let mu = sum / m;
            let var = sq / m - mu * mu;
            let is = 1.0 / (var + self.eps).sqrt();
            mean[g] = mu;
            inv_std[g] = is;
            for ch in c0..c0 + per {
                let (ga, be) = (self.gamma[ch], self.beta[ch]);
                for y in 0..h {
                    for xx in 0..w {
                        out[[ch, y, xx]] = (x[[ch, y, xx]] - mu) * is * ga + be;
                    }
                }
            }
        }
        (out, GroupNormCache { x: x.clone(), mean, inv_std })
    }

    /// Returns (dx, dgamma, dbeta).
    pub fn backward(
        &self,
        cache: &GroupNormCache,
        dy: &Array3<f64>,
    ) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
        let x = &cache.x;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let per = c / self.groups;
        let m = (per * h * w) as f64;
        let mut dx = Array3::zeros((c, h, w));
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for g in 0..self.groups {
            let c0 = g * per;
            let mu = cache.mean[g];
            let is = cache.inv_std[g];
            // accumulate sums over the group of dxhat and dxhat * xhat
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ch in c0..c0 + per {
                let ga = self.gamma[ch];
                for y in 0..h {
                    for xx in 0..w {
                        let xhat = (x[[ch, y, xx]] - mu) * is;
                        let d = dy[[ch, y, xx]];
                        dgamma[ch] += d * xhat;
                        dbeta[ch] += d;
                        let dxhat = d * ga;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
            }
            for ch in c0..c0 + per {
                let ga = self.gamma[ch];
                for y in 0..h {
                    for xx in 0..w {
                        let xhat = (x[[ch, y, xx]] - mu) * is;
                        let dxhat = dy[[ch, y, xx]] * ga;
                        dx[[ch, y, xx]] =
                            is * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                    }
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn normalizes_per_group() {
        let gn = GroupNorm::new(4, 2);
        let mut rng = seed_rng(1);
        let x = Array3::from_shape_simple_fn((4, 3, 3), || rng.sample::<f64, _>(StandardNormal));
        let (y, _) = gn.forward(&x);
        // each group of 2 channels has ~zero mean, ~unit variance
        for g in 0..2 {
            let vals: Vec<f64> = (g * 2..g * 2 + 2)
                .flat_map(|c| {
                    let y = &y;
                    (0..3).flat_map(move |a| (0..3).map(move |b| y[[c, a, b]]))
                })
                .collect();
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seed_rng(9);
        let mut gn = GroupNorm::new(4, 2);
        for v in gn.gamma.iter_mut() {
            *v = 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        let x = Array3::from_shape_simple_fn((4, 2, 3), || rng.sample::<f64, _>(StandardNormal));
        let target =
            Array3::from_shape_simple_fn((4, 2, 3), || rng.sample::<f64, _>(StandardNormal));
        let loss = |gn: &GroupNorm, x: &Array3<f64>| -> f64 {
            let (y, _) = gn.forward(x);
            (&y - &target).mapv(|v| v * v).sum() * 0.5
        };
        let (y, cache) = gn.forward(&x);
        let dy = &y - &target;
        let (dx, dgamma, dbeta) = gn.backward(&cache, &dy);
        let eps = 1e-6;
        // input coordinate
        let mut x2 = x.clone();
        x2[[1, 1, 2]] += eps;
        let lp = loss(&gn, &x2);
        x2[[1, 1, 2]] -= 2.0 * eps;
        let lm = loss(&gn, &x2);
        let fd = (lp - lm) / (2.0 * eps);
        assert!(
            (fd - dx[[1, 1, 2]]).abs() / fd.abs().max(1e-8) < 1e-5,
            "dx fd={fd} got={}",
            dx[[1, 1, 2]]
        );
        // gamma
        let orig = gn.gamma[2];
        gn.gamma[2] = orig + eps;
        let lp = loss(&gn, &x);
        gn.gamma[2] = orig - eps;
        let lm = loss(&gn, &x);
        gn.gamma[2] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        assert!((fd - dgamma[2]).abs() / fd.abs().max(1e-8) < 1e-5);
        // beta
        let orig = gn.beta[3];
        gn.beta[3] = orig + eps;
        let lp = loss(&gn, &x);
        gn.beta[3] = orig - eps;
        let lm = loss(&gn, &x);
        gn.beta[3] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        assert!((fd - dbeta[3]).abs() / fd.abs().max(1e-8) < 1e-5);
    }
}
