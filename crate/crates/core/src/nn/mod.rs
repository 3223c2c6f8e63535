//! Hand-rolled f64 layers with explicit forward caches and backward passes.
//! Every layer here is finite-difference checked in its own tests.

pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;

pub use attention::{cross_attention, cross_attention_cached, CrossAttnWeights, SelfAttnWeights};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::GroupNorm;

use ndarray::{Array1, Array3};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// d silu(x) / dx = s(x) * (1 + x * (1 - s(x))) with s the logistic sigmoid.
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_arr3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(silu)
}

pub fn silu_arr1(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(silu)
}

/// Sinusoidal features for an integer timestep, dimension must be even.
pub fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "timestep feature dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    out
}

/// Fixed sinusoidal positional encoding row for token position `pos`.
pub fn position_features(pos: usize, dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    for i in 0..dim {
        let exponent = 2.0 * (i / 2) as f64 / dim as f64;
        let arg = pos as f64 / (10000f64).powf(exponent);
        out[i] = if i % 2 == 0 { arg.sin() } else { arg.cos() };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_grad_matches_fd() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let eps = 1e-6;
            let fd = (silu(x + eps) - silu(x - eps)) / (2.0 * eps);
            assert!((fd - silu_grad(x)).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn timestep_features_distinct() {
        let a = timestep_features(10, 32);
        let b = timestep_features(11, 32);
        assert_ne!(a, b);
        assert_eq!(a.len(), 32);
    }
}
