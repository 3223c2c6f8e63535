//! Noise schedule and deterministic DDIM transport between timesteps.
//!
//! The forward and reverse steps share one algebraic move between
//! alpha-bar levels, so they are exact inverses for a fixed eps:
//!
//!   z' = sqrt(ab_to/ab_from) * z
//!      + (sqrt(1-ab_to) - sqrt(ab_to/ab_from) * sqrt(1-ab_from)) * eps

use crate::error::{CoreError, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { t_train: 1000, beta_start: 1e-4, beta_end: 0.02, ddim_steps: 50 }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// Total training timesteps T.
    pub t_train: usize,
    /// beta[t-1] is the variance for timestep t in [1, T]; strictly increasing.
    pub beta: Vec<f64>,
    /// alpha_bar[t] for t in [0, T]; alpha_bar[0] = 1, strictly decreasing.
    pub alpha_bar: Vec<f64>,
    /// Length of the DDIM sampling subsequence.
    pub ddim_steps: usize,
    pub config: ScheduleConfig,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t = config.t_train;
        if t == 0 {
            return Err(CoreError::Validation("t_train must be positive".into()));
        }
        if config.ddim_steps == 0 || config.ddim_steps > t {
            return Err(CoreError::Validation(format!(
                "ddim_steps {} must be in [1, t_train={t}]",
                config.ddim_steps
            )));
        }
        if !(0.0 < config.beta_start && config.beta_start < config.beta_end && config.beta_end < 1.0)
        {
            return Err(CoreError::Validation(format!(
                "beta range ({}, {}) must satisfy 0 < start < end < 1",
                config.beta_start, config.beta_end
            )));
        }
        let beta: Vec<f64> = (0..t)
            .map(|i| {
                config.beta_start
                    + (config.beta_end - config.beta_start) * i as f64 / (t - 1).max(1) as f64
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { t_train: t, beta, alpha_bar, ddim_steps: config.ddim_steps, config })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Sampling subsequence with uniform stride over [1, T], ascending;
    /// always ends at T.
    pub fn timesteps(&self) -> Vec<usize> {
        (1..=self.ddim_steps)
            .map(|k| ((k * self.t_train) as f64 / self.ddim_steps as f64).round() as usize)
            .collect()
    }

    /// Reverse-order (t, t_prev) pairs for sampling: (T, ..), ..., (.., 0).
    pub fn reverse_pairs(&self) -> Vec<(usize, usize)> {
        let ts = self.timesteps();
        let mut pairs = Vec::with_capacity(ts.len());
        for k in (0..ts.len()).rev() {
            let t = ts[k];
            let t_prev = if k == 0 { 0 } else { ts[k - 1] };
            pairs.push((t, t_prev));
        }
        pairs
    }

    /// Forward-order (t, t_next) pairs for inversion: (0, ..), ..., (.., T).
    pub fn forward_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = self.reverse_pairs();
        pairs.reverse();
        pairs.iter().map(|&(t, t_prev)| (t_prev, t)).collect()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_train {
            return Err(CoreError::Validation(format!(
                "timestep {t} exceeds t_train {}",
                self.t_train
            )));
        }
        Ok(())
    }

    /// One deterministic DDIM move between alpha-bar levels.
    pub fn ddim_move(z: &Array3<f64>, eps: &Array3<f64>, ab_from: f64, ab_to: f64) -> Array3<f64> {
        let a = (ab_to / ab_from).sqrt();
        let b = (1.0 - ab_to).sqrt() - a * (1.0 - ab_from).sqrt();
        z * a + eps * b
    }

    /// Reverse (denoising) step t -> t_prev, t > t_prev >= 0.
    pub fn ddim_reverse_step(
        &self,
        z_t: &Array3<f64>,
        eps: &Array3<f64>,
        t: usize,
        t_prev: usize,
    ) -> Result<Array3<f64>> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(CoreError::Validation(format!(
                "reverse step requires t > t_prev, got t={t}, t_prev={t_prev}"
            )));
        }
        Ok(Self::ddim_move(z_t, eps, self.alpha_bar(t), self.alpha_bar(t_prev)))
    }

    /// Forward (inversion) step t -> t_next, t_next > t.
    pub fn ddim_forward_step(
        &self,
        z_t: &Array3<f64>,
        eps: &Array3<f64>,
        t: usize,
        t_next: usize,
    ) -> Result<Array3<f64>> {
        self.check_t(t_next)?;
        if t_next <= t {
            return Err(CoreError::Validation(format!(
                "forward step requires t_next > t, got t={t}, t_next={t_next}"
            )));
        }
        Ok(Self::ddim_move(z_t, eps, self.alpha_bar(t), self.alpha_bar(t_next)))
    }

    /// Training corruption: x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps.
    pub fn add_noise(&self, x0: &Array3<f64>, eps: &Array3<f64>, t: usize) -> Array3<f64> {
        let ab = self.alpha_bar(t);
        x0 * ab.sqrt() + eps * (1.0 - ab).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    fn scalar(v: f64) -> Array3<f64> {
        Array3::from_elem((1, 1, 1), v)
    }

    #[test]
    fn tables_satisfy_invariants() {
        let s = sched();
        assert_eq!(s.alpha_bar[0], 1.0);
        for i in 1..s.beta.len() {
            assert!(s.beta[i] > s.beta[i - 1], "beta not strictly increasing at {i}");
        }
        for t in 1..=s.t_train {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1], "alpha_bar not decreasing at {t}");
            assert!(s.beta[t - 1] > 0.0 && s.beta[t - 1] < 1.0);
        }
    }

    #[test]
    fn timestep_subsequence_uniform_stride() {
        let s = sched();
        let ts = s.timesteps();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 20);
        assert_eq!(*ts.last().unwrap(), 1000);
        for w in ts.windows(2) {
            assert_eq!(w[1] - w[0], 20);
        }
        let rp = s.reverse_pairs();
        assert_eq!(rp[0], (1000, 980));
        assert_eq!(*rp.last().unwrap(), (20, 0));
        let fp = s.forward_pairs();
        assert_eq!(fp[0], (0, 20));
        assert_eq!(*fp.last().unwrap(), (980, 1000));
    }

    // Frozen from an independent high-precision evaluation of the update
    // formula (mpmath, 30 digits).
    const REVERSE_ORACLE: f64 = 0.67704416754207779105;
    const FORWARD_ORACLE: f64 = 1.1794199069210678939;

    #[test]
    fn reverse_step_matches_scalar_oracle() {
        // ab_t = 0.25, ab_prev = 0.81, z = 1, eps = 1
        let out = NoiseSchedule::ddim_move(&scalar(1.0), &scalar(1.0), 0.25, 0.81);
        assert!((out[[0, 0, 0]] - REVERSE_ORACLE).abs() < 1e-12);
    }

    #[test]
    fn forward_step_matches_scalar_oracle() {
        let out = NoiseSchedule::ddim_move(&scalar(1.0), &scalar(1.0), 0.81, 0.25);
        assert!((out[[0, 0, 0]] - FORWARD_ORACLE).abs() < 1e-12);
    }

    #[test]
    fn zero_eps_is_pure_rescale() {
        let s = sched();
        let z = scalar(0.7);
        let out = s.ddim_reverse_step(&z, &scalar(0.0), 1000, 500).unwrap();
        let expect = 0.7 * (s.alpha_bar(500) / s.alpha_bar(1000)).sqrt();
        assert!((out[[0, 0, 0]] - expect).abs() < 1e-15);
        let out = s.ddim_forward_step(&z, &scalar(0.0), 500, 1000).unwrap();
        let expect = 0.7 * (s.alpha_bar(1000) / s.alpha_bar(500)).sqrt();
        assert!((out[[0, 0, 0]] - expect).abs() < 1e-15);
    }

    #[test]
    fn equal_alpha_bar_is_identity_for_any_eps() {
        let out = NoiseSchedule::ddim_move(&scalar(0.3), &scalar(5.0), 0.42, 0.42);
        assert!((out[[0, 0, 0]] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn forward_then_reverse_is_identity() {
        let s = sched();
        let z = scalar(0.37);
        let eps = scalar(-1.25);
        let up = s.ddim_forward_step(&z, &eps, 480, 500).unwrap();
        let back = s.ddim_reverse_step(&up, &eps, 500, 480).unwrap();
        assert!((back[[0, 0, 0]] - 0.37).abs() < 1e-12);
    }

    #[test]
    fn ordering_errors() {
        let s = sched();
        let z = scalar(0.0);
        assert!(s.ddim_reverse_step(&z, &z, 500, 500).is_err());
        assert!(s.ddim_reverse_step(&z, &z, 500, 600).is_err());
        assert!(s.ddim_forward_step(&z, &z, 500, 500).is_err());
        assert!(s.ddim_forward_step(&z, &z, 500, 400).is_err());
        assert!(s.ddim_forward_step(&z, &z, 1000, 1001).is_err());
    }
}
