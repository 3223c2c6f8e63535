//! DDIM inversion of a template image under its source prompt, recording
//! structural features (residual and self-attention outputs) at every
//! sampling timestep of the reconstruction pass.
//!
//! Inversion is guidance-free by construction: a single conditional branch
//! with the source prompt in both directions, and always on the base
//! (non-personalized) model.

use crate::error::{CoreError, Result};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::clip_unit;
use crate::unet::{ForwardHooks, LayerKey, TapKind, UNetParams};
use crate::vocab::PromptTokens;
use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Which blocks to record, by stable layer name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSpec {
    pub layers: Vec<(String, TapKind)>,
}

impl Default for ExtractionSpec {
    /// The first decoder residual block at the coarsest level plus every
    /// decoder self-attention block.
    fn default() -> Self {
        ExtractionSpec {
            layers: vec![
                ("dec2.res0".into(), TapKind::ResnetOut),
                ("dec2.self".into(), TapKind::SelfAttnOut),
                ("dec1.self".into(), TapKind::SelfAttnOut),
            ],
        }
    }
}

impl ExtractionSpec {
    pub fn resolve(&self, params: &UNetParams) -> Result<Vec<LayerKey>> {
        let registry = params.registry();
        let mut keys = Vec::with_capacity(self.layers.len());
        for (name, kind) in &self.layers {
            let info = registry
                .iter()
                .find(|l| &l.name == name)
                .ok_or_else(|| CoreError::Validation(format!("extraction layer {name:?} unknown")))?;
            if info.kind != *kind {
                return Err(CoreError::Validation(format!(
                    "extraction layer {name:?} is {:?}, not {:?}",
                    info.kind, kind
                )));
            }
            keys.push((info.id, info.kind));
        }
        Ok(keys)
    }
}

/// Features recorded along one template's reconstruction trajectory,
/// plus the inverted noise that seeds it.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    /// (timestep, layer id, kind) -> tensor.
    pub entries: BTreeMap<(usize, usize, TapKind), ArrayD<f64>>,
    pub source_prompt: PromptTokens,
    pub z_noise: Array3<f64>,
    pub extraction: Vec<LayerKey>,
    pub template_hash: String,
    pub params_hash: String,
    pub schedule: ScheduleConfig,
    pub trajectory_hash: String,
}

impl FeatureCache {
    pub fn feature(&self, t: usize, key: LayerKey) -> Option<&ArrayD<f64>> {
        self.entries.get(&(t, key.0, key.1))
    }

    /// Injection overrides for one timestep, restricted to the given kinds.
    pub fn overrides_at(&self, t: usize, kinds: &[TapKind]) -> BTreeMap<LayerKey, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for &(id, kind) in &self.extraction {
            if kinds.contains(&kind) {
                if let Some(tensor) = self.feature(t, (id, kind)) {
                    out.insert((id, kind), tensor.clone());
                }
            }
        }
        out
    }
}

pub fn image_hash(img: &Array3<f64>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in img.iter() {
        h.update(v.to_le_bytes());
    }
    crate::unet::hex_string(&h.finalize())
}

pub fn prompt_hash(p: &PromptTokens) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in p.tokens() {
        h.update(t.to_le_bytes());
    }
    crate::unet::hex_string(&h.finalize())
}

/// DDIM-invert `template` under `p_src` (guidance 1), then rerun the
/// reverse pass from the inverted noise, tapping the extraction set at
/// every sampling timestep.
pub fn invert_and_cache(
    template: &Array3<f64>,
    p_src: &PromptTokens,
    params: &UNetParams,
    schedule: &NoiseSchedule,
    extraction: &ExtractionSpec,
) -> Result<FeatureCache> {
    if template.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(CoreError::Validation("template values must lie in [-1, 1]".into()));
    }
    let keys = extraction.resolve(params)?;
    let no_hooks = ForwardHooks::default();

    // forward pass: z_0 -> z_T with eps evaluated at the source timestep
    // (clamped to 1 at the t=0 boundary, where the denoiser is undefined)
    let mut z = template.clone();
    for (t, t_next) in schedule.forward_pairs() {
        let (eps, _) = params.eps_predict(&z, t.max(1), p_src, &no_hooks)?;
        z = schedule.ddim_forward_step(&z, &eps, t, t_next)?;
        if !crate::tensor::all_finite3(&z) {
            return Err(CoreError::Numerical(format!(
                "non-finite latent during inversion at t={t}"
            )));
        }
    }
    let z_noise = z.clone();

    // reverse pass: reconstruction with taps at every step
    let mut entries = BTreeMap::new();
    let mut traj_hasher = {
        use sha2::Digest;
        sha2::Sha256::new()
    };
    for (t, t_prev) in schedule.reverse_pairs() {
        let hooks = ForwardHooks::tap_all(keys.iter().copied());
        let (eps, taps) = params.eps_predict(&z, t, p_src, &hooks)?;
        for (key, tensor) in taps {
            entries.insert((t, key.0, key.1), tensor);
        }
        z = schedule.ddim_reverse_step(&z, &eps, t, t_prev)?;
        if !crate::tensor::all_finite3(&z) {
            return Err(CoreError::Numerical(format!(
                "non-finite latent during reconstruction at t={t}"
            )));
        }
        use sha2::Digest;
        for v in z.iter() {
            traj_hasher.update(v.to_le_bytes());
        }
    }
    let trajectory_hash = crate::unet::hex_string(&{
        use sha2::Digest;
        traj_hasher.finalize()
    });

    Ok(FeatureCache {
        entries,
        source_prompt: p_src.clone(),
        z_noise,
        extraction: keys,
        template_hash: image_hash(template),
        params_hash: params.content_hash(),
        schedule: schedule.config.clone(),
        trajectory_hash,
    })
}

/// Plain DDIM reverse from the cached noise under the source prompt,
/// guidance 1, no overrides. Clipped to [-1, 1].
pub fn reconstruct(
    cache: &FeatureCache,
    params: &UNetParams,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    if cache.params_hash != params.content_hash() {
        return Err(CoreError::Incompatible(
            "feature cache was built against different denoiser weights".into(),
        ));
    }
    if cache.schedule != schedule.config {
        return Err(CoreError::Incompatible(
            "feature cache was built against a different schedule".into(),
        ));
    }
    let no_hooks = ForwardHooks::default();
    let mut z = cache.z_noise.clone();
    for (t, t_prev) in schedule.reverse_pairs() {
        let (eps, _) = params.eps_predict(&z, t, &cache.source_prompt, &no_hooks)?;
        z = schedule.ddim_reverse_step(&z, &eps, t, t_prev)?;
    }
    clip_unit(&mut z);
    Ok(z)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

fn kind_tag(kind: TapKind) -> &'static str {
    match kind {
        TapKind::ResnetOut => "resnet_out",
        TapKind::SelfAttnOut => "self_attn_out",
        TapKind::CrossAttnOut => "cross_attn_out",
    }
}

fn parse_kind(tag: &str) -> Option<TapKind> {
    match tag {
        "resnet_out" => Some(TapKind::ResnetOut),
        "self_attn_out" => Some(TapKind::SelfAttnOut),
        "cross_attn_out" => Some(TapKind::CrossAttnOut),
        _ => None,
    }
}

pub fn save_cache(path: &Path, cache: &FeatureCache) -> Result<()> {
    let mut w = crate::container::ContainerWriter::new("feature-cache");
    w.meta("template_hash", cache.template_hash.clone());
    w.meta("params_hash", cache.params_hash.clone());
    w.meta("prompt_hash", prompt_hash(&cache.source_prompt));
    w.meta("prompt_tokens", serde_json::to_string(cache.source_prompt.tokens()).unwrap());
    w.meta("schedule", serde_json::to_string(&cache.schedule).unwrap());
    w.meta("extraction", serde_json::to_string(&cache.extraction).unwrap());
    w.meta("trajectory_hash", cache.trajectory_hash.clone());
    w.tensor("z_noise", cache.z_noise.shape(), cache.z_noise.as_slice().unwrap());
    for ((t, id, kind), tensor) in &cache.entries {
        w.tensor(
            &format!("t{t:04}.l{id:02}.{}", kind_tag(*kind)),
            tensor.shape(),
            tensor.as_slice().unwrap(),
        );
    }
    w.save(path)
}

pub fn load_cache(path: &Path) -> Result<FeatureCache> {
    let r = crate::container::ContainerReader::open(path)?;
    if r.header.kind != "feature-cache" {
        return Err(CoreError::format(path, "not a feature cache container"));
    }
    let tokens: Vec<u16> = serde_json::from_str(r.meta("prompt_tokens")?)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let schedule: ScheduleConfig = serde_json::from_str(r.meta("schedule")?)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let extraction: Vec<LayerKey> = serde_json::from_str(r.meta("extraction")?)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let (zshape, zdata) = r.read_tensor("z_noise")?;
    let z_noise = Array3::from_shape_vec((zshape[0], zshape[1], zshape[2]), zdata)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let mut entries = BTreeMap::new();
    for t in &r.header.tensors {
        if t.name == "z_noise" {
            continue;
        }
        let parts: Vec<&str> = t.name.splitn(3, '.').collect();
        if parts.len() != 3 {
            return Err(CoreError::format(path, format!("bad cache tensor name {}", t.name)));
        }
        let ts: usize = parts[0]
            .strip_prefix('t')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::format(path, format!("bad timestep in {}", t.name)))?;
        let id: usize = parts[1]
            .strip_prefix('l')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CoreError::format(path, format!("bad layer in {}", t.name)))?;
        let kind = parse_kind(parts[2])
            .ok_or_else(|| CoreError::format(path, format!("bad kind in {}", t.name)))?;
        let (shape, data) = r.read_tensor(&t.name)?;
        entries.insert(
            (ts, id, kind),
            ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| CoreError::format(path, e.to_string()))?,
        );
    }
    Ok(FeatureCache {
        entries,
        source_prompt: PromptTokens::new(tokens)?,
        z_noise,
        extraction,
        template_hash: r.meta("template_hash")?.to_string(),
        params_hash: r.meta("params_hash")?.to_string(),
        schedule,
        trajectory_hash: r.meta("trajectory_hash")?.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use crate::unet::UNetConfig;
    use crate::vocab::{filler_token, shape_token};

    fn setup(steps: usize) -> (UNetParams, NoiseSchedule, PromptTokens) {
        let mut params = UNetParams::new(UNetConfig::tiny(), 31).unwrap();
        params.randomize_all(32, 0.05);
        let schedule =
            NoiseSchedule::new(ScheduleConfig { ddim_steps: steps, ..Default::default() })
                .unwrap();
        let prompt = PromptTokens::new(vec![filler_token("a"), shape_token(1)]).unwrap();
        (params, schedule, prompt)
    }

    fn template() -> Array3<f64> {
        let mut t = crate::rng::randn3(&mut crate::rng::seed_rng(9), (3, 8, 8));
        t.mapv_inplace(|v| (v * 0.4).tanh());
        t
    }

    #[test]
    fn zero_denoiser_closed_form() {
        // a freshly initialized net has a zero-initialized output conv, so
        // eps is identically zero: z_T = template * sqrt(alpha_bar(T))
        let (_, schedule, prompt) = setup(10);
        let params = UNetParams::new(UNetConfig::tiny(), 31).unwrap(); // fresh, eps == 0
        let tpl = template();
        let cache =
            invert_and_cache(&tpl, &prompt, &params, &schedule, &ExtractionSpec::default())
                .unwrap();
        let expect = &tpl * schedule.alpha_bar(schedule.t_train).sqrt();
        let diff = (&cache.z_noise - &expect).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn cache_entry_count_is_steps_times_extraction() {
        let (params, schedule, prompt) = setup(10);
        let tpl = template();
        let spec = ExtractionSpec::default();
        let cache = invert_and_cache(&tpl, &prompt, &params, &schedule, &spec).unwrap();
        assert_eq!(cache.entries.len(), schedule.ddim_steps * spec.layers.len());
    }

    #[test]
    fn reconstruction_deterministic_and_taps_reproducible() {
        let (params, schedule, prompt) = setup(8);
        let tpl = template();
        let spec = ExtractionSpec::default();
        let c1 = invert_and_cache(&tpl, &prompt, &params, &schedule, &spec).unwrap();
        let c2 = invert_and_cache(&tpl, &prompt, &params, &schedule, &spec).unwrap();
        assert_eq!(c1.z_noise, c2.z_noise);
        assert_eq!(c1.trajectory_hash, c2.trajectory_hash);
        for (k, v) in &c1.entries {
            assert_eq!(v, &c2.entries[k], "tap {k:?} differs between runs");
        }
        let r1 = reconstruct(&c1, &params, &schedule).unwrap();
        let r2 = reconstruct(&c2, &params, &schedule).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn params_hash_mismatch_rejected() {
        let (params, schedule, prompt) = setup(6);
        let tpl = template();
        let cache =
            invert_and_cache(&tpl, &prompt, &params, &schedule, &ExtractionSpec::default())
                .unwrap();
        let mut other = params.clone();
        other.token_embed[[3, 0]] += 0.1;
        assert!(matches!(
            reconstruct(&cache, &other, &schedule),
            Err(CoreError::Incompatible(_))
        ));
    }

    #[test]
    fn out_of_range_template_rejected() {
        let (params, schedule, prompt) = setup(6);
        let mut tpl = template();
        tpl[[0, 0, 0]] = 1.5;
        assert!(invert_and_cache(
            &tpl,
            &prompt,
            &params,
            &schedule,
            &ExtractionSpec::default()
        )
        .is_err());
    }

    #[test]
    fn cache_file_roundtrip() {
        let (params, schedule, prompt) = setup(5);
        let tpl = template();
        let cache =
            invert_and_cache(&tpl, &prompt, &params, &schedule, &ExtractionSpec::default())
                .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.cache");
        save_cache(&path, &cache).unwrap();
        let loaded = load_cache(&path).unwrap();
        assert_eq!(loaded.z_noise, cache.z_noise);
        assert_eq!(loaded.entries, cache.entries);
        assert_eq!(loaded.source_prompt, cache.source_prompt);
        assert_eq!(loaded.extraction, cache.extraction);
        assert_eq!(loaded.template_hash, cache.template_hash);
        assert_eq!(loaded.trajectory_hash, cache.trajectory_hash);
    }
}
