//! Dense layer on row vectors / row-major batches.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (d_in, d_out)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize, w_std: f64) -> Self {
        let w = Array2::from_shape_simple_fn((d_in, d_out), || {
            let v: f64 = rng.sample(StandardNormal);
            v * w_std
        });
        Linear { w, b: Array1::zeros(d_out) }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { w: Array2::zeros((d_in, d_out)), b: Array1::zeros(d_out) }
    }

    pub fn forward1(&self, x: &Array1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Backward for a single row input. Returns (dx, dw, db).
    pub fn backward1(
        &self,
        x: &Array1<f64>,
        dy: &Array1<f64>,
    ) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
        let dx = self.w.dot(dy);
        let dw = outer(x, dy);
        (dx, dw, dy.clone())
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}
