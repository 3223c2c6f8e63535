//! Single-head attention: the cross-attention primitive that personalization
//! targets, plus spatial self-attention. Scaled dot product,
//! softmax(Q K^T / sqrt(a)) V, output projection, no biases.

use crate::error::{CoreError, Result};
use crate::tensor::softmax_rows;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Cross-attention weights: queries from image features (c -> a), keys and
/// values from the embedded prompt (d -> a), output projection (a -> c).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl CrossAttnWeights {
    pub fn new(rng: &mut impl Rng, c: usize, d: usize, a: usize, std: f64) -> Self {
        let f = |r: usize, co: usize, rng: &mut dyn rand::RngCore, s: f64| {
            Array2::from_shape_simple_fn((r, co), || {
                let v: f64 = rng.sample(StandardNormal);
                v * s
            })
        };
        CrossAttnWeights {
            wq: f(c, a, rng, std),
            wk: f(d, a, rng, std),
            wv: f(d, a, rng, std),
            wo: f(a, c, rng, std * 0.5),
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.wq.shape()[1]
    }
}

/// Self-attention weights over spatial positions, all projections c -> c.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttnWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

impl SelfAttnWeights {
    pub fn new(rng: &mut impl Rng, c: usize, std: f64) -> Self {
        let f = |rng: &mut dyn rand::RngCore, s: f64| {
            Array2::from_shape_simple_fn((c, c), || {
                let v: f64 = rng.sample(StandardNormal);
                v * s
            })
        };
        SelfAttnWeights {
            wq: f(rng, std),
            wk: f(rng, std),
            wv: f(rng, std),
            wo: f(rng, std * 0.5),
        }
    }
}

pub struct AttnCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Array2<f64>,
    pub o: Array2<f64>,
    pub scale: f64,
}

/// The cross-attention feature map: f (n x c), ctx (s x d) -> (n x c).
pub fn cross_attention(
    f: &Array2<f64>,
    ctx: &Array2<f64>,
    w: &CrossAttnWeights,
) -> Result<Array2<f64>> {
    let (out, _) = cross_attention_cached(f, ctx, w)?;
    Ok(out)
}

pub fn cross_attention_cached(
    f: &Array2<f64>,
    ctx: &Array2<f64>,
    w: &CrossAttnWeights,
) -> Result<(Array2<f64>, AttnCache)> {
    if f.shape()[1] != w.wq.shape()[0] {
        return Err(CoreError::Shape(format!(
            "cross-attention: feature channel axis {} != W^q input axis {}",
            f.shape()[1],
            w.wq.shape()[0]
        )));
    }
    if ctx.shape()[1] != w.wk.shape()[0] {
        return Err(CoreError::Shape(format!(
            "cross-attention: context embed axis {} != W^k input axis {}",
            ctx.shape()[1],
            w.wk.shape()[0]
        )));
    }
    if w.wo.shape()[0] != w.wq.shape()[1] {
        return Err(CoreError::Shape(format!(
            "cross-attention: W^out input axis {} != attention axis {}",
            w.wo.shape()[0],
            w.wq.shape()[1]
        )));
    }
    let a = w.attn_dim();
    let scale = 1.0 / (a as f64).sqrt();
    let q = f.dot(&w.wq);
    let k = ctx.dot(&w.wk);
    let v = ctx.dot(&w.wv);
    let mut logits = q.dot(&k.t());
    logits *= scale;
    softmax_rows(&mut logits);
    let o = logits.dot(&v);
    let out = o.dot(&w.wo);
    Ok((out, AttnCache { q, k, v, probs: logits, o, scale }))
}

pub struct AttnGrads {
    pub d_f: Array2<f64>,
    pub d_ctx: Array2<f64>,
    pub d_wq: Array2<f64>,
    pub d_wk: Array2<f64>,
    pub d_wv: Array2<f64>,
    pub d_wo: Array2<f64>,
}

pub fn cross_attention_backward(
    f: &Array2<f64>,
    ctx: &Array2<f64>,
    w: &CrossAttnWeights,
    cache: &AttnCache,
    dy: &Array2<f64>,
) -> AttnGrads {
    let d_wo = cache.o.t().dot(dy);
    let d_o = dy.dot(&w.wo.t());
    let d_probs = d_o.dot(&cache.v.t());
    let d_v = cache.probs.t().dot(&d_o);
    // softmax backward, row-wise: dl = p * (dp - sum(dp * p))
    let mut d_logits = Array2::zeros(cache.probs.raw_dim());
    for i in 0..cache.probs.shape()[0] {
        let mut dot = 0.0;
        for j in 0..cache.probs.shape()[1] {
            dot += d_probs[[i, j]] * cache.probs[[i, j]];
        }
        for j in 0..cache.probs.shape()[1] {
            d_logits[[i, j]] = cache.probs[[i, j]] * (d_probs[[i, j]] - dot);
        }
    }
    d_logits *= cache.scale;
    let d_q = d_logits.dot(&cache.k);
    let d_k = d_logits.t().dot(&cache.q);
    let d_wq = f.t().dot(&d_q);
    let d_f = d_q.dot(&w.wq.t());
    let d_wk = ctx.t().dot(&d_k);
    let d_wv = ctx.t().dot(&d_v);
    let d_ctx = d_k.dot(&w.wk.t()) + d_v.dot(&w.wv.t());
    AttnGrads { d_f, d_ctx, d_wq, d_wk, d_wv, d_wo }
}

/// Self-attention is cross-attention with ctx = f; input gradient collects
/// both the query and the key/value paths.
pub fn self_attention_cached(
    x: &Array2<f64>,
    w: &SelfAttnWeights,
) -> Result<(Array2<f64>, AttnCache)> {
    let cw = CrossAttnWeights {
        wq: w.wq.clone(),
        wk: w.wk.clone(),
        wv: w.wv.clone(),
        wo: w.wo.clone(),
    };
    cross_attention_cached(x, x, &cw)
}

pub fn self_attention_backward(
    x: &Array2<f64>,
    w: &SelfAttnWeights,
    cache: &AttnCache,
    dy: &Array2<f64>,
) -> AttnGrads {
    let cw = CrossAttnWeights {
        wq: w.wq.clone(),
        wk: w.wk.clone(),
        wv: w.wv.clone(),
        wo: w.wo.clone(),
    };
    let mut g = cross_attention_backward(x, x, &cw, cache, dy);
    g.d_f = &g.d_f + &g.d_ctx;
    g
}
