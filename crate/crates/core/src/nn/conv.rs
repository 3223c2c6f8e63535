//! 2D convolution via im2col + GEMM, with exact backward.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (c_out, c_in * k * k)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    /// im2col matrix, (c_in*k*k, oh*ow)
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        w_std: f64,
    ) -> Self {
        let w = Array2::from_shape_simple_fn((c_out, c_in * k * k), || {
            let v: f64 = rng.sample(StandardNormal);
            v * w_std
        });
        Conv2d { w, b: Array1::zeros(c_out), c_in, c_out, k, stride, pad }
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Array2::zeros((c_out, c_in * k * k)),
            b: Array1::zeros(c_out),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> (Array2<f64>, usize, usize) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(c, self.c_in, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let mut cols = Array2::<f64>::zeros((c * self.k * self.k, oh * ow));
        for ch in 0..c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (cols, oh, ow) = self.im2col(x);
        let mut out_mat = self.w.dot(&cols); // (c_out, oh*ow)
        for (mut row, &bias) in out_mat.rows_mut().into_iter().zip(self.b.iter()) {
            row += bias;
        }
        let out = out_mat.into_shape_with_order((self.c_out, oh, ow)).unwrap();
        (out, ConvCache { cols, in_h: h, in_w: w, out_h: oh, out_w: ow })
    }

    /// Returns (d_input, d_weight, d_bias).
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array3<f64>,
    ) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
        let (oh, ow) = (cache.out_h, cache.out_w);
        let dy_mat = dy
            .to_owned()
            .into_shape_with_order((self.c_out, oh * ow))
            .unwrap();
        let dw = dy_mat.dot(&cache.cols.t());
        let db = dy_mat.sum_axis(ndarray::Axis(1));
        // d_cols = w^T dy, then scatter back (col2im)
        let d_cols = self.w.t().dot(&dy_mat); // (c_in*k*k, oh*ow)
        let mut dx = Array3::<f64>::zeros((self.c_in, cache.in_h, cache.in_w));
        for ch in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= cache.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= cache.in_w as isize {
                                continue;
                            }
                            dx[[ch, iy as usize, ix as usize]] += d_cols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }
}
