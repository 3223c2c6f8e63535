//! Cross-attention U-Net eps-predictor with named blocks, tap/override hooks,
//! and a hand-written backward pass.
//!
//! Three resolution levels (32/16/8 by default), two residual blocks per
//! level on each side, self-attention at the lower two resolutions, and a
//! cross-attention block after every residual block. Blocks are registered
//! in forward order with stable names; the layer registry is part of the
//! checkpoint contract.
//!
//! Hook semantics: `resnet_out` is the residual block's full output;
//! `self_attn_out` / `cross_attn_out` are the attention increments (the
//! tensor added back to the feature stream). Overriding substitutes the
//! supplied tensor for the block's natural output verbatim.

use crate::error::{CoreError, Result};
pub use crate::nn::CrossAttnWeights;
use crate::nn::{
    cross_attention_cached, position_features, silu, silu_arr1, silu_grad, timestep_features,
    Conv2d, GroupNorm, Linear, SelfAttnWeights,
};
use crate::nn::attention::{
    cross_attention_backward, self_attention_backward, self_attention_cached, AttnCache,
};
use crate::nn::conv::ConvCache;
use crate::nn::norm::GroupNormCache;
use crate::tensor::{chw_to_hwc_mat, hwc_mat_to_chw};
use crate::vocab::PromptTokens;
use ndarray::{concatenate, Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Channels per resolution level, coarsest last.
    pub channels: [usize; 3],
    /// Text embedding dimension d.
    pub text_dim: usize,
    /// Sinusoidal timestep feature dimension (even).
    pub temb_in: usize,
    /// Timestep embedding hidden dimension.
    pub temb_dim: usize,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub groups: usize,
    pub img_channels: usize,
    pub img_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            channels: [16, 32, 48],
            text_dim: 24,
            temb_in: 32,
            temb_dim: 64,
            vocab_size: crate::vocab::VOCAB_SIZE,
            prompt_len: crate::vocab::MAX_PROMPT_LEN,
            groups: 4,
            img_channels: 3,
            img_size: crate::scene::IMG_SIZE,
        }
    }
}

impl UNetConfig {
    /// Small configuration for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        UNetConfig {
            channels: [4, 4, 8],
            text_dim: 6,
            temb_in: 8,
            temb_dim: 12,
            vocab_size: crate::vocab::VOCAB_SIZE,
            prompt_len: crate::vocab::MAX_PROMPT_LEN,
            groups: 2,
            img_channels: 3,
            img_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % self.groups != 0 || (2 * c) % self.groups != 0 {
                return Err(CoreError::Validation(format!(
                    "channels[{i}]={c} must be positive and divisible by groups={}",
                    self.groups
                )));
            }
        }
        if self.temb_in % 2 != 0 {
            return Err(CoreError::Validation("temb_in must be even".into()));
        }
        if self.img_size % 4 != 0 {
            return Err(CoreError::Validation("img_size must be divisible by 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapKind {
    ResnetOut,
    SelfAttnOut,
    CrossAttnOut,
}

pub type LayerKey = (usize, TapKind);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    /// 1-based index in forward order over named blocks.
    pub id: usize,
    pub name: String,
    pub kind: TapKind,
    /// Spatial side length at this block.
    pub resolution: usize,
    pub channels: usize,
}

impl LayerInfo {
    pub fn expected_shape(&self) -> Vec<usize> {
        match self.kind {
            TapKind::ResnetOut => vec![self.channels, self.resolution, self.resolution],
            TapKind::SelfAttnOut | TapKind::CrossAttnOut => {
                vec![self.resolution * self.resolution, self.channels]
            }
        }
    }
}

/// Recording/substitution requests for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardHooks {
    pub taps: BTreeSet<LayerKey>,
    pub overrides: BTreeMap<LayerKey, ArrayD<f64>>,
}

pub type Taps = BTreeMap<LayerKey, ArrayD<f64>>;

impl ForwardHooks {
    pub fn tap_all(keys: impl IntoIterator<Item = LayerKey>) -> Self {
        ForwardHooks { taps: keys.into_iter().collect(), overrides: BTreeMap::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty() && self.overrides.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Parameter structures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub gn1: GroupNorm,
    pub conv1: Conv2d,
    pub temb: Linear,
    pub gn2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, temb_dim: usize, groups: usize) -> Self {
        let std1 = (2.0 / (c_in as f64 * 9.0)).sqrt();
        ResBlock {
            gn1: GroupNorm::new(c_in, groups),
            conv1: Conv2d::new(rng, c_in, c_out, 3, 1, 1, std1),
            temb: Linear::new(rng, temb_dim, c_out, (1.0 / temb_dim as f64).sqrt()),
            gn2: GroupNorm::new(c_out, groups),
            // final conv starts at zero so a fresh block is the identity map
            conv2: Conv2d::zeros(c_out, c_out, 3, 1, 1),
            skip: if c_in != c_out {
                Some(Conv2d::new(rng, c_in, c_out, 1, 1, 0, (1.0 / c_in as f64).sqrt()))
            } else {
                None
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Res { name: String, block: ResBlock },
    SelfAttn { name: String, gn: GroupNorm, w: SelfAttnWeights },
    Cross { name: String, gn: GroupNorm, w: CrossAttnWeights },
    Down { name: String, conv: Conv2d },
    Up { name: String, conv: Conv2d },
    PushSkip,
    ConcatSkip,
}

/// Full parameter set of the denoiser, used both for weights and (with the
/// same structure) for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    pub cfg: UNetConfig,
    /// (vocab, d) token embedding table.
    pub token_embed: Array2<f64>,
    pub temb1: Linear,
    pub temb2: Linear,
    pub in_conv: Conv2d,
    pub stages: Vec<Stage>,
    pub out_gn: GroupNorm,
    pub out_conv: Conv2d,
}

const ATTN_STD: f64 = 0.05;

impl UNetParams {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::split_rng(seed, "unet-init", 0);
        let [c0, c1, c2] = cfg.channels;
        let d = cfg.text_dim;
        let g = cfg.groups;
        let td = cfg.temb_dim;
        let rb = |rng: &mut crate::rng::Prng, ci: usize, co: usize| ResBlock::new(rng, ci, co, td, g);
        let cross = |rng: &mut crate::rng::Prng, c: usize, name: &str| Stage::Cross {
            name: name.into(),
            gn: GroupNorm::new(c, g),
            w: CrossAttnWeights::new(rng, c, d, c, ATTN_STD),
        };
        let selfa = |rng: &mut crate::rng::Prng, c: usize, name: &str| Stage::SelfAttn {
            name: name.into(),
            gn: GroupNorm::new(c, g),
            w: SelfAttnWeights::new(rng, c, ATTN_STD),
        };
        let down = |rng: &mut crate::rng::Prng, ci: usize, co: usize, name: &str| Stage::Down {
            name: name.into(),
            conv: Conv2d::new(rng, ci, co, 3, 2, 1, (2.0 / (ci as f64 * 9.0)).sqrt()),
        };
        let up = |rng: &mut crate::rng::Prng, ci: usize, co: usize, name: &str| Stage::Up {
            name: name.into(),
            conv: Conv2d::new(rng, ci, co, 3, 1, 1, (2.0 / (ci as f64 * 9.0)).sqrt()),
        };
        let res = |rng: &mut crate::rng::Prng, ci: usize, co: usize, name: &str| Stage::Res {
            name: name.into(),
            block: rb(rng, ci, co),
        };

        let mut stages = Vec::new();
        // encoder level 0 (full resolution)
        stages.push(res(&mut rng, c0, c0, "enc0.res0"));
        stages.push(cross(&mut rng, c0, "enc0.cross0"));
        stages.push(res(&mut rng, c0, c0, "enc0.res1"));
        stages.push(cross(&mut rng, c0, "enc0.cross1"));
        stages.push(Stage::PushSkip);
        stages.push(down(&mut rng, c0, c1, "down0"));
        // encoder level 1
        stages.push(res(&mut rng, c1, c1, "enc1.res0"));
        stages.push(cross(&mut rng, c1, "enc1.cross0"));
        stages.push(res(&mut rng, c1, c1, "enc1.res1"));
        stages.push(selfa(&mut rng, c1, "enc1.self"));
        stages.push(cross(&mut rng, c1, "enc1.cross1"));
        stages.push(Stage::PushSkip);
        stages.push(down(&mut rng, c1, c2, "down1"));
        // encoder level 2 (coarsest)
        stages.push(res(&mut rng, c2, c2, "enc2.res0"));
        stages.push(cross(&mut rng, c2, "enc2.cross0"));
        stages.push(res(&mut rng, c2, c2, "enc2.res1"));
        stages.push(selfa(&mut rng, c2, "enc2.self"));
        stages.push(cross(&mut rng, c2, "enc2.cross1"));
        // decoder level 2
        stages.push(res(&mut rng, c2, c2, "dec2.res0"));
        stages.push(cross(&mut rng, c2, "dec2.cross0"));
        stages.push(res(&mut rng, c2, c2, "dec2.res1"));
        stages.push(selfa(&mut rng, c2, "dec2.self"));
        stages.push(cross(&mut rng, c2, "dec2.cross1"));
        stages.push(up(&mut rng, c2, c1, "up2"));
        stages.push(Stage::ConcatSkip);
        // decoder level 1 (first block consumes the concatenated skip)
        stages.push(res(&mut rng, 2 * c1, c1, "dec1.res0"));
        stages.push(cross(&mut rng, c1, "dec1.cross0"));
        stages.push(res(&mut rng, c1, c1, "dec1.res1"));
        stages.push(selfa(&mut rng, c1, "dec1.self"));
        stages.push(cross(&mut rng, c1, "dec1.cross1"));
        stages.push(up(&mut rng, c1, c0, "up1"));
        stages.push(Stage::ConcatSkip);
        // decoder level 0
        stages.push(res(&mut rng, 2 * c0, c0, "dec0.res0"));
        stages.push(cross(&mut rng, c0, "dec0.cross0"));
        stages.push(res(&mut rng, c0, c0, "dec0.res1"));
        stages.push(cross(&mut rng, c0, "dec0.cross1"));

        Ok(UNetParams {
            token_embed: Array2::from_shape_simple_fn((cfg.vocab_size, d), || {
                let v: f64 = rng.sample(StandardNormal);
                v * 0.05
            }),
            temb1: Linear::new(&mut rng, cfg.temb_in, td, (1.0 / cfg.temb_in as f64).sqrt()),
            temb2: Linear::new(&mut rng, td, td, (1.0 / td as f64).sqrt()),
            in_conv: Conv2d::new(
                &mut rng,
                cfg.img_channels,
                c0,
                3,
                1,
                1,
                (2.0 / (cfg.img_channels as f64 * 9.0)).sqrt(),
            ),
            out_gn: GroupNorm::new(c0, g),
            out_conv: Conv2d::zeros(c0, cfg.img_channels, 3, 1, 1),
            stages,
            cfg,
        })
    }

    /// Named blocks in forward order: the stable layer registry.
    pub fn registry(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut resolution = self.cfg.img_size;
        let mut id = 0;
        for stage in &self.stages {
            match stage {
                Stage::Res { name, block } => {
                    id += 1;
                    out.push(LayerInfo {
                        id,
                        name: name.clone(),
                        kind: TapKind::ResnetOut,
                        resolution,
                        channels: block.conv1.c_out,
                    });
                }
                Stage::SelfAttn { name, w, .. } => {
                    id += 1;
                    out.push(LayerInfo {
                        id,
                        name: name.clone(),
                        kind: TapKind::SelfAttnOut,
                        resolution,
                        channels: w.wq.shape()[0],
                    });
                }
                Stage::Cross { name, w, .. } => {
                    id += 1;
                    out.push(LayerInfo {
                        id,
                        name: name.clone(),
                        kind: TapKind::CrossAttnOut,
                        resolution,
                        channels: w.wq.shape()[0],
                    });
                }
                Stage::Down { .. } => resolution /= 2,
                Stage::Up { .. } => resolution *= 2,
                Stage::PushSkip | Stage::ConcatSkip => {}
            }
        }
        out
    }

    pub fn layer_by_name(&self, name: &str) -> Option<LayerInfo> {
        self.registry().into_iter().find(|l| l.name == name)
    }

    /// Cross-attention weights by registry layer id.
    pub fn cross_weights(&self, layer_id: usize) -> Option<&CrossAttnWeights> {
        let mut id = 0;
        for stage in &self.stages {
            match stage {
                Stage::Res { .. } | Stage::SelfAttn { .. } => id += 1,
                Stage::Cross { w, .. } => {
                    id += 1;
                    if id == layer_id {
                        return Some(w);
                    }
                }
                _ => {}
            }
        }
        None
    }

    /// Names of all cross-attention layers in forward order.
    pub fn cross_layer_names(&self) -> Vec<String> {
        self.registry()
            .into_iter()
            .filter(|l| l.kind == TapKind::CrossAttnOut)
            .map(|l| l.name)
            .collect()
    }

    pub fn cross_weights_by_name(&self, name: &str) -> Option<&CrossAttnWeights> {
        self.stages.iter().find_map(|s| match s {
            Stage::Cross { name: n, w, .. } if n == name => Some(w),
            _ => None,
        })
    }

    pub fn cross_weights_by_name_mut(&mut self, name: &str) -> Option<&mut CrossAttnWeights> {
        self.stages.iter_mut().find_map(|s| match s {
            Stage::Cross { name: n, w, .. } if n == name => Some(w),
            _ => None,
        })
    }

    /// Embed a prompt: token rows plus fixed sinusoidal position encoding,
    /// padded to the configured length.
    pub fn embed_prompt(&self, prompt: &PromptTokens) -> Array2<f64> {
        let s = self.cfg.prompt_len;
        let d = self.cfg.text_dim;
        let padded = prompt.padded();
        let mut ctx = Array2::zeros((s, d));
        for (pos, &tok) in padded.iter().enumerate() {
            let row = self.token_embed.row(tok as usize);
            let pe = position_features(pos, d);
            for j in 0..d {
                ctx[[pos, j]] = row[j] + pe[j];
            }
        }
        ctx
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_param_mut(&mut |_, s| s.fill(0.0));
        out
    }

    /// Replace every parameter with seeded noise of the given scale
    /// (used by gradient checks so no parameter sits at exactly zero).
    pub fn randomize_all(&mut self, seed: u64, std: f64) {
        let mut rng = crate::rng::split_rng(seed, "randomize-all", 0);
        self.for_each_param_mut(&mut |_, s| {
            for v in s.iter_mut() {
                let x: f64 = rng.sample(StandardNormal);
                *v = x * std;
            }
        });
    }

    /// SHA-256 of config + all parameters; identifies a checkpoint.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).unwrap());
        self.for_each_param(&mut |name, s| {
            h.update(name.as_bytes());
            for v in s {
                h.update(v.to_le_bytes());
            }
        });
        hex_string(&h.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Parameter visitation (shared by the optimizer, checkpoint io, and checks)
// ---------------------------------------------------------------------------

impl UNetParams {
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &[f64])) {
        let mut shaped = |name: &str, _shape: &[usize], s: &[f64]| f(name, s);
        self.for_each_param_shaped(&mut shaped);
    }

    pub fn for_each_param_shaped(&self, f: &mut impl FnMut(&str, &[usize], &[f64])) {
        read_walk(self, f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut [f64])) {
        mut_walk(self, f);
    }

    /// Copy all parameters into a name-keyed map (shape, data).
    pub fn to_map(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let mut out = BTreeMap::new();
        self.for_each_param_shaped(&mut |name, shape, s| {
            out.insert(name.to_string(), (shape.to_vec(), s.to_vec()));
        });
        out
    }

    /// Load parameters from a name-keyed map; every parameter must be present
    /// with the right shape.
    pub fn load_map(&mut self, map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        let mut missing = Vec::new();
        self.for_each_param_mut(&mut |name, s| match map.get(name) {
            Some((_, data)) if data.len() == s.len() => s.copy_from_slice(data),
            Some((_, data)) => {
                missing.push(format!("{name}: length {} != {}", data.len(), s.len()))
            }
            None => missing.push(format!("{name}: absent")),
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Incompatible(format!(
                "parameter map mismatch: {}",
                missing.join("; ")
            )))
        }
    }
}

fn read_walk(p: &UNetParams, f: &mut impl FnMut(&str, &[usize], &[f64])) {
    let lin = |f: &mut dyn FnMut(&str, &[usize], &[f64]), prefix: &str, l: &Linear| {
        f(&format!("{prefix}.w"), l.w.shape(), l.w.as_slice().unwrap());
        f(&format!("{prefix}.b"), l.b.shape(), l.b.as_slice().unwrap());
    };
    let conv = |f: &mut dyn FnMut(&str, &[usize], &[f64]), prefix: &str, c: &Conv2d| {
        f(&format!("{prefix}.w"), c.w.shape(), c.w.as_slice().unwrap());
        f(&format!("{prefix}.b"), c.b.shape(), c.b.as_slice().unwrap());
    };
    let gn = |f: &mut dyn FnMut(&str, &[usize], &[f64]), prefix: &str, g: &GroupNorm| {
        f(&format!("{prefix}.gamma"), g.gamma.shape(), g.gamma.as_slice().unwrap());
        f(&format!("{prefix}.beta"), g.beta.shape(), g.beta.as_slice().unwrap());
    };
    f("token_embed", p.token_embed.shape(), p.token_embed.as_slice().unwrap());
    lin(f, "temb1", &p.temb1);
    lin(f, "temb2", &p.temb2);
    conv(f, "in_conv", &p.in_conv);
    for stage in &p.stages {
        match stage {
            Stage::Res { name, block } => {
                gn(f, &format!("{name}.gn1"), &block.gn1);
                conv(f, &format!("{name}.conv1"), &block.conv1);
                lin(f, &format!("{name}.temb"), &block.temb);
                gn(f, &format!("{name}.gn2"), &block.gn2);
                conv(f, &format!("{name}.conv2"), &block.conv2);
                if let Some(skip) = &block.skip {
                    conv(f, &format!("{name}.skip"), skip);
                }
            }
            Stage::SelfAttn { name, gn: g, w } => {
                gn(f, &format!("{name}.gn"), g);
                f(&format!("{name}.wq"), w.wq.shape(), w.wq.as_slice().unwrap());
                f(&format!("{name}.wk"), w.wk.shape(), w.wk.as_slice().unwrap());
                f(&format!("{name}.wv"), w.wv.shape(), w.wv.as_slice().unwrap());
                f(&format!("{name}.wo"), w.wo.shape(), w.wo.as_slice().unwrap());
            }
            Stage::Cross { name, gn: g, w } => {
                gn(f, &format!("{name}.gn"), g);
                f(&format!("{name}.wq"), w.wq.shape(), w.wq.as_slice().unwrap());
                f(&format!("{name}.wk"), w.wk.shape(), w.wk.as_slice().unwrap());
                f(&format!("{name}.wv"), w.wv.shape(), w.wv.as_slice().unwrap());
                f(&format!("{name}.wo"), w.wo.shape(), w.wo.as_slice().unwrap());
            }
            Stage::Down { name, conv: c } | Stage::Up { name, conv: c } => {
                conv(f, name, c);
            }
            Stage::PushSkip | Stage::ConcatSkip => {}
        }
    }
    gn(f, "out_gn", &p.out_gn);
    conv(f, "out_conv", &p.out_conv);
}

fn mut_walk(p: &mut UNetParams, f: &mut impl FnMut(&str, &mut [f64])) {
    let lin = |f: &mut dyn FnMut(&str, &mut [f64]), prefix: &str, l: &mut Linear| {
        f(&format!("{prefix}.w"), l.w.as_slice_mut().unwrap());
        f(&format!("{prefix}.b"), l.b.as_slice_mut().unwrap());
    };
    let conv = |f: &mut dyn FnMut(&str, &mut [f64]), prefix: &str, c: &mut Conv2d| {
        f(&format!("{prefix}.w"), c.w.as_slice_mut().unwrap());
        f(&format!("{prefix}.b"), c.b.as_slice_mut().unwrap());
    };
    let gn = |f: &mut dyn FnMut(&str, &mut [f64]), prefix: &str, g: &mut GroupNorm| {
        f(&format!("{prefix}.gamma"), g.gamma.as_slice_mut().unwrap());
        f(&format!("{prefix}.beta"), g.beta.as_slice_mut().unwrap());
    };
    f("token_embed", p.token_embed.as_slice_mut().unwrap());
    lin(f, "temb1", &mut p.temb1);
    lin(f, "temb2", &mut p.temb2);
    conv(f, "in_conv", &mut p.in_conv);
    for stage in &mut p.stages {
        match stage {
            Stage::Res { name, block } => {
                let name = name.clone();
                gn(f, &format!("{name}.gn1"), &mut block.gn1);
                conv(f, &format!("{name}.conv1"), &mut block.conv1);
                lin(f, &format!("{name}.temb"), &mut block.temb);
                gn(f, &format!("{name}.gn2"), &mut block.gn2);
                conv(f, &format!("{name}.conv2"), &mut block.conv2);
                if let Some(skip) = &mut block.skip {
                    conv(f, &format!("{name}.skip"), skip);
                }
            }
            Stage::SelfAttn { name, gn: g, w } => {
                let name = name.clone();
                gn(f, &format!("{name}.gn"), g);
                f(&format!("{name}.wq"), w.wq.as_slice_mut().unwrap());
                f(&format!("{name}.wk"), w.wk.as_slice_mut().unwrap());
                f(&format!("{name}.wv"), w.wv.as_slice_mut().unwrap());
                f(&format!("{name}.wo"), w.wo.as_slice_mut().unwrap());
            }
            Stage::Cross { name, gn: g, w } => {
                let name = name.clone();
                gn(f, &format!("{name}.gn"), g);
                f(&format!("{name}.wq"), w.wq.as_slice_mut().unwrap());
                f(&format!("{name}.wk"), w.wk.as_slice_mut().unwrap());
                f(&format!("{name}.wv"), w.wv.as_slice_mut().unwrap());
                f(&format!("{name}.wo"), w.wo.as_slice_mut().unwrap());
            }
            Stage::Down { name, conv: c } | Stage::Up { name, conv: c } => {
                let name = name.clone();
                conv(f, &name, c);
            }
            Stage::PushSkip | Stage::ConcatSkip => {}
        }
    }
    gn(f, "out_gn", &mut p.out_gn);
    conv(f, "out_conv", &mut p.out_conv);
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-layer customization point for the cross-attention evaluation. The
/// fusion sampler swaps in a handler that evaluates several personalized
/// branches and fuses them; the standard handler evaluates the backbone's
/// own weights against one context.
pub trait CrossHandler {
    fn eval(
        &mut self,
        info: &LayerInfo,
        backbone: &CrossAttnWeights,
        normed: &Array2<f64>,
    ) -> Result<Array2<f64>>;
}

pub struct StdCross<'a> {
    pub ctx: &'a Array2<f64>,
}

impl CrossHandler for StdCross<'_> {
    fn eval(
        &mut self,
        _info: &LayerInfo,
        backbone: &CrossAttnWeights,
        normed: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        crate::nn::cross_attention(normed, self.ctx, backbone)
    }
}

fn upsample_nearest2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[[ch, y, xx]];
                out[[ch, 2 * y, 2 * xx]] = v;
                out[[ch, 2 * y, 2 * xx + 1]] = v;
                out[[ch, 2 * y + 1, 2 * xx]] = v;
                out[[ch, 2 * y + 1, 2 * xx + 1]] = v;
            }
        }
    }
    out
}

fn downsample_sum2(d: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[ch, y / 2, xx / 2]] += d[[ch, y, xx]];
            }
        }
    }
    out
}

impl UNetParams {
    pub fn validate_hooks(&self, hooks: &ForwardHooks) -> Result<()> {
        let registry = self.registry();
        let find = |key: &LayerKey| -> Result<&LayerInfo> {
            let info = registry
                .iter()
                .find(|l| l.id == key.0)
                .ok_or_else(|| CoreError::Validation(format!("hook layer id {} unknown", key.0)))?;
            if info.kind != key.1 {
                return Err(CoreError::Validation(format!(
                    "hook kind {:?} does not match layer {} ({})",
                    key.1, key.0, info.name
                )));
            }
            Ok(info)
        };
        for key in &hooks.taps {
            find(key)?;
            if hooks.overrides.contains_key(key) {
                return Err(CoreError::Validation(format!(
                    "layer {} may not be both tapped and overridden",
                    key.0
                )));
            }
        }
        for (key, tensor) in &hooks.overrides {
            let info = find(key)?;
            let expect = info.expected_shape();
            if tensor.shape() != expect.as_slice() {
                return Err(CoreError::Shape(format!(
                    "override for layer {} ({}) has shape {:?}, expected {:?}",
                    key.0,
                    info.name,
                    tensor.shape(),
                    expect
                )));
            }
        }
        Ok(())
    }

    fn temb_forward(&self, t: usize) -> (Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>) {
        let tfeat = timestep_features(t, self.cfg.temb_in);
        let h1 = self.temb1.forward1(&tfeat);
        let h1s = silu_arr1(&h1);
        let h2 = self.temb2.forward1(&h1s);
        let h2s = silu_arr1(&h2);
        (tfeat, h1, h2, h2s)
    }

    /// Hooked forward pass with a pluggable cross-attention evaluation.
    /// Deterministic; taps contain exactly the requested entries.
    pub fn forward_with(
        &self,
        z: &Array3<f64>,
        t: usize,
        handler: &mut dyn CrossHandler,
        hooks: &ForwardHooks,
    ) -> Result<(Array3<f64>, Taps)> {
        if t == 0 {
            return Err(CoreError::Validation("eps_predict requires t >= 1".into()));
        }
        self.validate_hooks(hooks)?;
        let registry = self.registry();
        let mut taps: Taps = BTreeMap::new();
        let (_, _, _, temb_s) = self.temb_forward(t);
        let (mut x, _) = self.in_conv.forward(z);
        let mut skips: Vec<Array3<f64>> = Vec::new();
        let mut layer_id = 0usize;
        for stage in &self.stages {
            match stage {
                Stage::Res { .. } | Stage::SelfAttn { .. } | Stage::Cross { .. } => layer_id += 1,
                _ => {}
            }
            match stage {
                Stage::Res { block, .. } => {
                    let key = (layer_id, TapKind::ResnetOut);
                    if let Some(ov) = hooks.overrides.get(&key) {
                        x = ov.clone().into_dimensionality::<Ix3>().unwrap();
                        continue;
                    }
                    let (out, _) = res_forward(block, &x, &temb_s);
                    if hooks.taps.contains(&key) {
                        taps.insert(key, out.clone().into_dyn());
                    }
                    x = out;
                }
                Stage::SelfAttn { gn, w, .. } => {
                    let key = (layer_id, TapKind::SelfAttnOut);
                    if let Some(ov) = hooks.overrides.get(&key) {
                        let h = ov.clone().into_dimensionality::<Ix2>().unwrap();
                        let (hh, ww) = (x.shape()[1], x.shape()[2]);
                        x = &x + &hwc_mat_to_chw(&h.view(), hh, ww);
                        continue;
                    }
                    let (normed, _) = gn.forward(&x);
                    let mat = chw_to_hwc_mat(&normed.view());
                    let (h, _) = self_attention_cached(&mat, w)?;
                    if hooks.taps.contains(&key) {
                        taps.insert(key, h.clone().into_dyn());
                    }
                    let (hh, ww) = (x.shape()[1], x.shape()[2]);
                    x = &x + &hwc_mat_to_chw(&h.view(), hh, ww);
                }
                Stage::Cross { gn, w, .. } => {
                    let key = (layer_id, TapKind::CrossAttnOut);
                    if let Some(ov) = hooks.overrides.get(&key) {
                        let h = ov.clone().into_dimensionality::<Ix2>().unwrap();
                        let (hh, ww) = (x.shape()[1], x.shape()[2]);
                        x = &x + &hwc_mat_to_chw(&h.view(), hh, ww);
                        continue;
                    }
                    let info = &registry[layer_id - 1];
                    let (normed, _) = gn.forward(&x);
                    let mat = chw_to_hwc_mat(&normed.view());
                    let h = handler.eval(info, w, &mat)?;
                    if hooks.taps.contains(&key) {
                        taps.insert(key, h.clone().into_dyn());
                    }
                    let (hh, ww) = (x.shape()[1], x.shape()[2]);
                    x = &x + &hwc_mat_to_chw(&h.view(), hh, ww);
                }
                Stage::Down { conv, .. } => {
                    let (out, _) = conv.forward(&x);
                    x = out;
                }
                Stage::Up { conv, .. } => {
                    let upx = upsample_nearest2(&x);
                    let (out, _) = conv.forward(&upx);
                    x = out;
                }
                Stage::PushSkip => skips.push(x.clone()),
                Stage::ConcatSkip => {
                    let skip = skips.pop().expect("skip stack underflow");
                    x = concatenate(Axis(0), &[x.view(), skip.view()]).unwrap();
                }
            }
        }
        let (gn_out, _) = self.out_gn.forward(&x);
        let act = gn_out.mapv(silu);
        let (eps, _) = self.out_conv.forward(&act);
        Ok((eps, taps))
    }

    /// Plain eps prediction under a prompt, recording any requested taps.
    pub fn eps_predict(
        &self,
        z: &Array3<f64>,
        t: usize,
        prompt: &PromptTokens,
        hooks: &ForwardHooks,
    ) -> Result<(Array3<f64>, Taps)> {
        let ctx = self.embed_prompt(prompt);
        let mut handler = StdCross { ctx: &ctx };
        self.forward_with(z, t, &mut handler, hooks)
    }
}

fn res_forward(block: &ResBlock, x: &Array3<f64>, temb_s: &Array1<f64>) -> (Array3<f64>, ResCache) {
    let (g1, g1c) = block.gn1.forward(x);
    let a1 = g1.mapv(silu);
    let (c1, c1c) = block.conv1.forward(&a1);
    let tproj = block.temb.forward1(temb_s);
    let mut h = c1;
    for (ch, &tv) in tproj.iter().enumerate() {
        h.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + tv);
    }
    let (g2, g2c) = block.gn2.forward(&h);
    let a2 = g2.mapv(silu);
    let (c2, c2c) = block.conv2.forward(&a2);
    let (skip_out, skip_cache) = match &block.skip {
        Some(sc) => {
            let (s, c) = sc.forward(x);
            (s, Some(c))
        }
        None => (x.clone(), None),
    };
    let out = &c2 + &skip_out;
    (out, ResCache { g1, g1c, c1c, g2, g2c, c2c, skip_cache })
}

// ---------------------------------------------------------------------------
// Traced forward + backward (training path)
// ---------------------------------------------------------------------------

pub struct ResCache {
    g1: Array3<f64>,
    g1c: GroupNormCache,
    c1c: ConvCache,
    g2: Array3<f64>,
    g2c: GroupNormCache,
    c2c: ConvCache,
    skip_cache: Option<ConvCache>,
}

pub enum StageCache {
    /// None means the block's output was overridden.
    Res {
        cache: Option<Box<ResCache>>,
        x_in_shape: (usize, usize, usize),
    },
    Attn {
        x_in: Array3<f64>,
        gnc: Option<GroupNormCache>,
        mat: Option<Array2<f64>>,
        attn: Option<AttnCache>,
        overridden: bool,
    },
    Down(ConvCache),
    Up {
        x_in_shape: (usize, usize, usize),
        upx: Array3<f64>,
        cache: ConvCache,
    },
    PushSkip,
    ConcatSkip {
        main_channels: usize,
    },
}

pub struct Trace {
    pub t: usize,
    pub prompt: PromptTokens,
    tfeat: Array1<f64>,
    temb_h1: Array1<f64>,
    temb_h2: Array1<f64>,
    temb_s: Array1<f64>,
    ctx: Array2<f64>,
    in_cache: ConvCache,
    stage_caches: Vec<StageCache>,
    out_gn_in: Array3<f64>,
    out_gn_cache: GroupNormCache,
    out_gn_out: Array3<f64>,
    out_conv_cache: ConvCache,
}

impl UNetParams {
    /// Forward pass that records every intermediate needed for `backward`.
    /// Supports hooks so the override path is gradient-checkable.
    pub fn forward_traced(
        &self,
        z: &Array3<f64>,
        t: usize,
        prompt: &PromptTokens,
        hooks: &ForwardHooks,
    ) -> Result<(Array3<f64>, Trace)> {
        if t == 0 {
            return Err(CoreError::Validation("eps_predict requires t >= 1".into()));
        }
        self.validate_hooks(hooks)?;
        let ctx = self.embed_prompt(prompt);
        let (tfeat, temb_h1, temb_h2, temb_s) = self.temb_forward(t);
        let (mut x, in_cache) = self.in_conv.forward(z);
        let mut skips: Vec<Array3<f64>> = Vec::new();
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        let mut layer_id = 0usize;
        for stage in &self.stages {
            match stage {
                Stage::Res { .. } | Stage::SelfAttn { .. } | Stage::Cross { .. } => layer_id += 1,
                _ => {}
            }
            match stage {
                Stage::Res { block, .. } => {
                    let key = (layer_id, TapKind::ResnetOut);
                    let shape = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    if let Some(ov) = hooks.overrides.get(&key) {
                        stage_caches.push(StageCache::Res { cache: None, x_in_shape: shape });
                        x = ov.clone().into_dimensionality::<Ix3>().unwrap();
                        continue;
                    }
                    let (out, cache) = res_forward(block, &x, &temb_s);
                    stage_caches
                        .push(StageCache::Res { cache: Some(Box::new(cache)), x_in_shape: shape });
                    x = out;
                }
                Stage::SelfAttn { gn, w, .. } => {
                    let key = (layer_id, TapKind::SelfAttnOut);
                    if let Some(ov) = hooks.overrides.get(&key) {
                        let h = ov.clone().into_dimensionality::<Ix2>().unwrap();
                        let (hh, ww) = (x.shape()[1], x.shape()[2]);
                        stage_caches.push(StageCache::Attn {
                            x_in: x.clone(),
                            gnc: None,
                            mat: None,
                            attn: None,
                            overridden: true,
                        });
                        x = &x + &hwc_mat_to_chw(&h.view(), hh, ww);
                        continue;
                    }
                    let (normed, gnc) = gn.forward(&x);
                    let mat = chw_to_hwc_mat(&normed.view());
                    let (h, ac) = self_attention_cached(&mat, w)?;
                    let (hh, ww) = (x.shape()[1], x.shape()[2]);
                    let out = &x + &hwc_mat_to_chw(&h.view(), hh, ww);
                    stage_caches.push(StageCache::Attn {
                        x_in: x.clone(),
                        gnc: Some(gnc),
                        mat: Some(mat),
                        attn: Some(ac),
                        overridden: false,
                    });
                    x = out;
                }
                Stage::Cross { gn, w, .. } => {
                    let key = (layer_id, TapKind::CrossAttnOut);
                    if let Some(ov) = hooks.overrides.get(&key) {
                        let h = ov.clone().into_dimensionality::<Ix2>().unwrap();
                        let (hh, ww) = (x.shape()[1], x.shape()[2]);
                        stage_caches.push(StageCache::Attn {
                            x_in: x.clone(),
                            gnc: None,
                            mat: None,
                            attn: None,
                            overridden: true,
                        });
                        x = &x + &hwc_mat_to_chw(&h.view(), hh, ww);
                        continue;
                    }
                    let (normed, gnc) = gn.forward(&x);
                    let mat = chw_to_hwc_mat(&normed.view());
                    let (h, ac) = cross_attention_cached(&mat, &ctx, w)?;
                    let (hh, ww) = (x.shape()[1], x.shape()[2]);
                    let out = &x + &hwc_mat_to_chw(&h.view(), hh, ww);
                    stage_caches.push(StageCache::Attn {
                        x_in: x.clone(),
                        gnc: Some(gnc),
                        mat: Some(mat),
                        attn: Some(ac),
                        overridden: false,
                    });
                    x = out;
                }
                Stage::Down { conv, .. } => {
                    let (out, cache) = conv.forward(&x);
                    stage_caches.push(StageCache::Down(cache));
                    x = out;
                }
                Stage::Up { conv, .. } => {
                    let shape = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let upx = upsample_nearest2(&x);
                    let (out, cache) = conv.forward(&upx);
                    stage_caches.push(StageCache::Up { x_in_shape: shape, upx, cache });
                    x = out;
                }
                Stage::PushSkip => {
                    skips.push(x.clone());
                    stage_caches.push(StageCache::PushSkip);
                }
                Stage::ConcatSkip => {
                    let skip = skips.pop().expect("skip stack underflow");
                    let main_channels = x.shape()[0];
                    x = concatenate(Axis(0), &[x.view(), skip.view()]).unwrap();
                    stage_caches.push(StageCache::ConcatSkip { main_channels });
                }
            }
        }
        let out_gn_in = x.clone();
        let (gn_out, out_gn_cache) = self.out_gn.forward(&x);
        let act = gn_out.mapv(silu);
        let (eps, out_conv_cache) = self.out_conv.forward(&act);
        Ok((
            eps,
            Trace {
                t,
                prompt: prompt.clone(),
                tfeat,
                temb_h1,
                temb_h2,
                temb_s,
                ctx,
                in_cache,
                stage_caches,
                out_gn_in,
                out_gn_cache,
                out_gn_out: gn_out,
                out_conv_cache,
            },
        ))
    }

    /// Backpropagate d(loss)/d(eps) through the traced forward pass.
    /// Returns gradients in a structure parallel to the parameters.
    pub fn backward(&self, trace: &Trace, d_eps: &Array3<f64>) -> UNetParams {
        let mut g = self.zeros_like();
        // output head
        let (d_act, dw, db) = self.out_conv.backward(&trace.out_conv_cache, d_eps);
        g.out_conv.w += &dw;
        g.out_conv.b += &db;
        let d_gn_out = &d_act * &trace.out_gn_out.mapv(silu_grad);
        let (mut d_x, dgamma, dbeta) = self.out_gn.backward(&trace.out_gn_cache, &d_gn_out);
        g.out_gn.gamma += &dgamma;
        g.out_gn.beta += &dbeta;
        let _ = &trace.out_gn_in;

        let mut d_temb_s = Array1::<f64>::zeros(self.cfg.temb_dim);
        let mut d_ctx = Array2::<f64>::zeros(trace.ctx.raw_dim());
        let mut skip_grads: Vec<Array3<f64>> = Vec::new();

        for (stage, cache) in self.stages.iter().zip(trace.stage_caches.iter()).rev() {
            match (stage, cache) {
                (Stage::Res { block, name }, StageCache::Res { cache, x_in_shape }) => {
                    let rc = match cache {
                        Some(rc) => rc,
                        None => {
                            // output was overridden; nothing upstream of this
                            // block receives gradient through it
                            d_x = Array3::zeros(*x_in_shape);
                            continue;
                        }
                    };
                    let gname = name.clone();
                    let d_out = d_x;
                    // skip path
                    let mut d_in = match (&block.skip, &rc.skip_cache) {
                        (Some(sc), Some(scache)) => {
                            let (dxs, dws, dbs) = sc.backward(scache, &d_out);
                            if let Some(gs) = grad_res_skip(&mut g, &gname) {
                                gs.0.w += &dws;
                                gs.0.b += &dbs;
                            }
                            dxs
                        }
                        _ => d_out.clone(),
                    };
                    // main path: conv2 <- silu <- gn2 <- (+temb) <- conv1 <- silu <- gn1
                    let (d_a2, dw2, db2) = block.conv2.backward(&rc.c2c, &d_out);
                    let d_g2 = &d_a2 * &rc.g2.mapv(silu_grad);
                    let (d_h, dgam2, dbet2) = block.gn2.backward(&rc.g2c, &d_g2);
                    // temb projection: gradient per channel sums over space
                    let c_out = d_h.shape()[0];
                    let mut d_tproj = Array1::<f64>::zeros(c_out);
                    for ch in 0..c_out {
                        d_tproj[ch] = d_h.index_axis(Axis(0), ch).sum();
                    }
                    let (d_temb_local, dwt, dbt) = block.temb.backward1(&trace.temb_s, &d_tproj);
                    d_temb_s += &d_temb_local;
                    let (d_a1, dw1, db1) = block.conv1.backward(&rc.c1c, &d_h);
                    let d_g1 = &d_a1 * &rc.g1.mapv(silu_grad);
                    let (d_in_main, dgam1, dbet1) = block.gn1.backward(&rc.g1c, &d_g1);
                    d_in += &d_in_main;
                    if let Some(gb) = grad_res_block(&mut g, &gname) {
                        gb.conv2.w += &dw2;
                        gb.conv2.b += &db2;
                        gb.gn2.gamma += &dgam2;
                        gb.gn2.beta += &dbet2;
                        gb.temb.w += &dwt;
                        gb.temb.b += &dbt;
                        gb.conv1.w += &dw1;
                        gb.conv1.b += &db1;
                        gb.gn1.gamma += &dgam1;
                        gb.gn1.beta += &dbet1;
                    }
                    d_x = d_in;
                }
                (Stage::SelfAttn { gn, w, name }, StageCache::Attn { x_in, gnc, mat, attn, overridden }) => {
                    if *overridden {
                        // out = x + const, gradient passes straight through
                        continue;
                    }
                    let (hh, ww) = (x_in.shape()[1], x_in.shape()[2]);
                    let d_h_mat = chw_to_hwc_mat(&d_x.view());
                    let ag = self_attention_backward(
                        mat.as_ref().unwrap(),
                        w,
                        attn.as_ref().unwrap(),
                        &d_h_mat,
                    );
                    let d_normed = hwc_mat_to_chw(&ag.d_f.view(), hh, ww);
                    let (d_in_gn, dgam, dbet) = gn.backward(gnc.as_ref().unwrap(), &d_normed);
                    if let Some(sg) = grad_self_attn(&mut g, name) {
                        sg.1.wq += &ag.d_wq;
                        sg.1.wk += &ag.d_wk;
                        sg.1.wv += &ag.d_wv;
                        sg.1.wo += &ag.d_wo;
                        sg.0.gamma += &dgam;
                        sg.0.beta += &dbet;
                    }
                    d_x = &d_x + &d_in_gn;
                }
                (Stage::Cross { gn, w, name }, StageCache::Attn { x_in, gnc, mat, attn, overridden }) => {
                    if *overridden {
                        continue;
                    }
                    let (hh, ww) = (x_in.shape()[1], x_in.shape()[2]);
                    let d_h_mat = chw_to_hwc_mat(&d_x.view());
                    let ag = cross_attention_backward(
                        mat.as_ref().unwrap(),
                        &trace.ctx,
                        w,
                        attn.as_ref().unwrap(),
                        &d_h_mat,
                    );
                    d_ctx += &ag.d_ctx;
                    let d_normed = hwc_mat_to_chw(&ag.d_f.view(), hh, ww);
                    let (d_in_gn, dgam, dbet) = gn.backward(gnc.as_ref().unwrap(), &d_normed);
                    if let Some(cg) = grad_cross_attn(&mut g, name) {
                        cg.1.wq += &ag.d_wq;
                        cg.1.wk += &ag.d_wk;
                        cg.1.wv += &ag.d_wv;
                        cg.1.wo += &ag.d_wo;
                        cg.0.gamma += &dgam;
                        cg.0.beta += &dbet;
                    }
                    d_x = &d_x + &d_in_gn;
                }
                (Stage::Down { conv, name }, StageCache::Down(cc)) => {
                    let (dxp, dw, db) = conv.backward(cc, &d_x);
                    if let Some(cg) = grad_plain_conv(&mut g, name) {
                        cg.w += &dw;
                        cg.b += &db;
                    }
                    d_x = dxp;
                }
                (Stage::Up { conv, name }, StageCache::Up { x_in_shape, upx: _, cache }) => {
                    let (d_upx, dw, db) = conv.backward(cache, &d_x);
                    if let Some(cg) = grad_plain_conv(&mut g, name) {
                        cg.w += &dw;
                        cg.b += &db;
                    }
                    let d_small = downsample_sum2(&d_upx);
                    debug_assert_eq!(d_small.shape(), [x_in_shape.0, x_in_shape.1, x_in_shape.2]);
                    d_x = d_small;
                }
                (Stage::PushSkip, StageCache::PushSkip) => {
                    let d_skip = skip_grads.pop().expect("skip grad underflow");
                    d_x = &d_x + &d_skip;
                }
                (Stage::ConcatSkip, StageCache::ConcatSkip { main_channels }) => {
                    let c_main = *main_channels;
                    let total = d_x.shape()[0];
                    let d_main = d_x.slice(ndarray::s![..c_main, .., ..]).to_owned();
                    let d_skip = d_x.slice(ndarray::s![c_main..total, .., ..]).to_owned();
                    skip_grads.push(d_skip);
                    d_x = d_main;
                }
                _ => unreachable!("stage/cache misalignment"),
            }
        }

        // input conv
        let (_, dw, db) = self.in_conv.backward(&trace.in_cache, &d_x);
        g.in_conv.w += &dw;
        g.in_conv.b += &db;

        // timestep embedding MLP
        let d_h2 = &d_temb_s * &trace.temb_h2.mapv(silu_grad);
        let (d_h1s, dw2, db2) = self.temb2.backward1(&silu_arr1(&trace.temb_h1), &d_h2);
        g.temb2.w += &dw2;
        g.temb2.b += &db2;
        let d_h1 = &d_h1s * &trace.temb_h1.mapv(silu_grad);
        let (_, dw1, db1) = self.temb1.backward1(&trace.tfeat, &d_h1);
        g.temb1.w += &dw1;
        g.temb1.b += &db1;

        // token embedding rows (position encoding is fixed)
        let padded = trace.prompt.padded();
        for (pos, &tok) in padded.iter().enumerate() {
            for j in 0..self.cfg.text_dim {
                g.token_embed[[tok as usize, j]] += d_ctx[[pos, j]];
            }
        }
        g
    }
}

fn grad_res_block<'a>(g: &'a mut UNetParams, name: &str) -> Option<&'a mut ResBlock> {
    g.stages.iter_mut().find_map(|s| match s {
        Stage::Res { name: n, block } if n == name => Some(block),
        _ => None,
    })
}

fn grad_res_skip<'a>(g: &'a mut UNetParams, name: &str) -> Option<(&'a mut Conv2d,)> {
    g.stages.iter_mut().find_map(|s| match s {
        Stage::Res { name: n, block } if n == name => block.skip.as_mut().map(|c| (c,)),
        _ => None,
    })
}

fn grad_self_attn<'a>(
    g: &'a mut UNetParams,
    name: &str,
) -> Option<(&'a mut GroupNorm, &'a mut SelfAttnWeights)> {
    g.stages.iter_mut().find_map(|s| match s {
        Stage::SelfAttn { name: n, gn, w } if n == name => Some((gn, w)),
        _ => None,
    })
}

fn grad_cross_attn<'a>(
    g: &'a mut UNetParams,
    name: &str,
) -> Option<(&'a mut GroupNorm, &'a mut CrossAttnWeights)> {
    g.stages.iter_mut().find_map(|s| match s {
        Stage::Cross { name: n, gn, w } if n == name => Some((gn, w)),
        _ => None,
    })
}

fn grad_plain_conv<'a>(g: &'a mut UNetParams, name: &str) -> Option<&'a mut Conv2d> {
    g.stages.iter_mut().find_map(|s| match s {
        Stage::Down { name: n, conv } | Stage::Up { name: n, conv } if n == name => Some(conv),
        _ => None,
    })
}
