//! Small numeric helpers shared across the crate. Images are `Array3<f64>`
//! in (C, H, W) layout with values in [-1, 1].

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Peak signal-to-noise ratio between two images, peak = 2.0 (the [-1,1] range).
pub fn psnr(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr: shape mismatch");
    let n = a.len() as f64;
    let mse: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (4.0 / mse).log10()
}

pub fn clip_unit(img: &mut Array3<f64>) {
    img.mapv_inplace(|v| v.clamp(-1.0, 1.0));
}

pub fn max_abs_diff(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn all_finite3(a: &Array3<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// (C,H,W) -> (H*W, C), rows in row-major pixel order.
pub fn chw_to_hwc_mat(x: &ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array2::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[y * w + xx, ch]] = x[[ch, y, xx]];
            }
        }
    }
    out
}

/// (H*W, C) -> (C,H,W).
pub fn hwc_mat_to_chw(m: &ArrayView2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = m.shape()[1];
    assert_eq!(m.shape()[0], h * w, "hwc_mat_to_chw: row count != h*w");
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[ch, y, xx]] = m[[y * w + xx, ch]];
            }
        }
    }
    out
}

/// Row-wise softmax (over the last axis).
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Bilinear resize of a (C,H,W) image to (C, oh, ow), align-corners=false.
pub fn resize_bilinear(x: &ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::zeros((c, oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v00 = x[[ch, y0, x0]];
                let v01 = x[[ch, y0, x1]];
                let v10 = x[[ch, y1, x0]];
                let v11 = x[[ch, y1, x1]];
                out[[ch, oy, ox]] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    out
}

/// Singular values of a small dense matrix via one-sided Jacobi rotations,
/// descending. Used to audit the rank of low-rank weight deltas.
pub fn singular_values(m: &Array2<f64>) -> Vec<f64> {
    // work on the transpose when that gives fewer columns
    let a = if m.shape()[0] < m.shape()[1] { m.t().to_owned() } else { m.clone() };
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let mut a = a;
    let tol = 1e-14;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    let (x, y) = (a[[i, p]], a[[i, q]]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (a[[i, p]], a[[i, q]]);
                    a[[i, p]] = c * x - s * y;
                    a[[i, q]] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Quantize [-1,1] to the u8 grid and back, so a PNG round-trip is exact.
pub fn quantize_unit(v: f64) -> f64 {
    let q = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    u8_to_unit(q)
}

pub fn u8_to_unit(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

pub fn unit_to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}
