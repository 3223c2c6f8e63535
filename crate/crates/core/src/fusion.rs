//! Multi-concept fusion sampling: template generation with multi-concept
//! guidance, per-concept prompt plans, mask-guided fusion of cross-attention
//! features with concept-free suppression, structural feature injection
//! windows, and negative-prompt guidance. The naive eps-space mixing
//! ablation lives here too.

use crate::bank::{apply_entry, ConceptBank, ConceptBankEntry};
use crate::error::{CoreError, Result};
use crate::invert::{invert_and_cache, ExtractionSpec, FeatureCache};
use crate::masks::{build_mask_set, default_kernel, filter_template, segment_concepts, MaskSet};
use crate::rng::{randn3, split_rng};
use crate::sampler::combine_guidance;
use crate::scene::{ConceptRegistry, LabeledScene, ShapeClass};
use crate::schedule::NoiseSchedule;
use crate::tensor::clip_unit;
use crate::unet::{
    CrossAttnWeights, CrossHandler, ForwardHooks, LayerInfo, TapKind, UNetParams,
};
use crate::vocab::PromptTokens;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Per-branch text conditions for one fusion run. Each per-concept prompt
/// differs from the base prompt by exactly one modifier-token insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPlan {
    pub p_base: PromptTokens,
    pub per_concept: Vec<PromptTokens>,
    pub p_plus_bg: PromptTokens,
    pub p_neg: PromptTokens,
    pub p_src: PromptTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One backbone traversal; branches are evaluated and fused at each
    /// cross-attention layer and share the post-fusion hidden state.
    Interleaved,
    /// N+2 full passes record per-layer features; a final overridden pass
    /// consumes the fused tensors.
    IndependentPasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Concept-free suppression weight.
    pub lambda_suppress: f64,
    /// Guidance scale.
    pub omega: f64,
    /// Self-attention injection window as a fraction of sampling steps.
    pub tau_self: f64,
    /// Residual injection window.
    pub tau_res: f64,
    pub steps: usize,
    pub fusion_mode: FusionMode,
    /// Multi-concept template guidance weight.
    pub lambda_mc: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda_suppress: 0.3,
            omega: 7.5,
            tau_self: 0.6,
            tau_res: 0.5,
            steps: 50,
            fusion_mode: FusionMode::Interleaved,
            lambda_mc: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_self) || !(0.0..=1.0).contains(&self.tau_res) {
            return Err(CoreError::Validation("tau thresholds must lie in [0, 1]".into()));
        }
        if self.lambda_suppress < 0.0 {
            return Err(CoreError::Validation("lambda_suppress must be >= 0".into()));
        }
        if self.omega < 0.0 {
            return Err(CoreError::Validation("omega must be >= 0".into()));
        }
        if self.steps == 0 {
            return Err(CoreError::Validation("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Build the prompt plan: insert each concept's modifier before its class
/// word (which must occur exactly once), the background modifier before the
/// background word, and tokenize the negative words.
pub fn build_prompts(
    base_prompt: &PromptTokens,
    bank: &ConceptBank,
    registry: &ConceptRegistry,
    concept_ids: &[String],
    bg_id: Option<&str>,
    negative_words: &[u16],
) -> Result<PromptPlan> {
    let mut per_concept = Vec::with_capacity(concept_ids.len());
    for id in concept_ids {
        let entry = bank.get(id)?;
        let def = registry.require(id)?;
        per_concept.push(base_prompt.with_modifier_before(entry.modifier_token, def.class_word())?);
    }
    let p_plus_bg = match bg_id {
        Some(id) => {
            let entry = bank.get(id)?;
            let def = registry.require(id)?;
            base_prompt.with_modifier_before(entry.modifier_token, def.class_word())?
        }
        None => base_prompt.clone(),
    };
    Ok(PromptPlan {
        p_base: base_prompt.clone(),
        per_concept,
        p_plus_bg,
        p_neg: PromptTokens::new(negative_words.to_vec())?,
        p_src: base_prompt.clone(),
    })
}

/// Template generation: standard guided sampling, optionally with a
/// multi-concept guidance prompt added to the conditional branch:
/// eps_cond = eps(p_tg) + lambda_mc * eps(p_mc).
#[allow(clippy::too_many_arguments)]
pub fn generate_template(
    params: &UNetParams,
    p_tg: &PromptTokens,
    p_mc: Option<&PromptTokens>,
    negative: &PromptTokens,
    schedule: &NoiseSchedule,
    omega: f64,
    lambda_mc: f64,
    seed: u64,
) -> Result<Array3<f64>> {
    if omega < 0.0 {
        return Err(CoreError::Validation("omega must be >= 0".into()));
    }
    let hooks = ForwardHooks::default();
    let c = params.cfg.img_channels;
    let hw = params.cfg.img_size;
    let mut rng = split_rng(seed, "sample-init", 0);
    let mut z = randn3(&mut rng, (c, hw, hw));
    for (t, t_prev) in schedule.reverse_pairs() {
        let (mut eps_c, _) = params.eps_predict(&z, t, p_tg, &hooks)?;
        if let Some(mc) = p_mc {
            if lambda_mc != 0.0 {
                let (eps_mc, _) = params.eps_predict(&z, t, mc, &hooks)?;
                eps_c = &eps_c + &(eps_mc * lambda_mc);
            }
        }
        let eps = if omega == 1.0 {
            eps_c
        } else {
            let (eps_n, _) = params.eps_predict(&z, t, negative, &hooks)?;
            combine_guidance(&eps_c, &eps_n, omega)
        };
        z = schedule.ddim_reverse_step(&z, &eps, t, t_prev)?;
    }
    clip_unit(&mut z);
    Ok(z)
}

// ---------------------------------------------------------------------------
// Fusion run state
// ---------------------------------------------------------------------------

/// Materialized branches and contexts for one fusion sampling run.
/// Branch order: concepts (matching the mask order), then background.
pub struct FusionRun<'a> {
    pub base: &'a UNetParams,
    branches: Vec<UNetParams>,
    branch_ctx: Vec<Array2<f64>>,
    base_ctx: Array2<f64>,
    neg_prompt: PromptTokens,
    masks: &'a MaskSet,
    cache: &'a FeatureCache,
    pub cfg: FusionConfig,
    schedule: &'a NoiseSchedule,
}

impl<'a> FusionRun<'a> {
    pub fn new(
        base: &'a UNetParams,
        entries: &[&ConceptBankEntry],
        bg_entry: &ConceptBankEntry,
        plan: &PromptPlan,
        masks: &'a MaskSet,
        cache: &'a FeatureCache,
        cfg: FusionConfig,
        schedule: &'a NoiseSchedule,
    ) -> Result<Self> {
        cfg.validate()?;
        if entries.is_empty() && plan.per_concept.is_empty() {
            // background-only fusion is legal; the mask set must agree
            if masks.n_concepts() != 0 {
                return Err(CoreError::Validation(
                    "mask set has concepts but no entries were given".into(),
                ));
            }
        }
        if entries.len() != plan.per_concept.len() {
            return Err(CoreError::Validation(format!(
                "{} entries but {} per-concept prompts",
                entries.len(),
                plan.per_concept.len()
            )));
        }
        if entries.len() != masks.n_concepts() {
            return Err(CoreError::Validation(format!(
                "{} entries but {} concept masks",
                entries.len(),
                masks.n_concepts()
            )));
        }
        if cache.params_hash != base.content_hash() {
            return Err(CoreError::Incompatible(
                "feature cache belongs to a different base checkpoint".into(),
            ));
        }
        let mut branches = Vec::with_capacity(entries.len() + 1);
        let mut branch_ctx = Vec::with_capacity(entries.len() + 1);
        for (entry, prompt) in entries.iter().zip(plan.per_concept.iter()) {
            let p = apply_entry(base, entry)?;
            branch_ctx.push(p.embed_prompt(prompt));
            branches.push(p);
        }
        let bg = apply_entry(base, bg_entry)?;
        branch_ctx.push(bg.embed_prompt(&plan.p_plus_bg));
        branches.push(bg);
        let base_ctx = base.embed_prompt(&plan.p_base);
        Ok(FusionRun {
            base,
            branches,
            branch_ctx,
            base_ctx,
            neg_prompt: plan.p_neg.clone(),
            masks,
            cache,
            cfg,
            schedule,
        })
    }

    /// Injection overrides active at reverse step index `k` (0 = t=T):
    /// self-attention features for the earliest (1 - tau_self) fraction of
    /// steps, residual features for the earliest (1 - tau_res) fraction.
    pub fn injection_hooks(&self, t: usize, k: usize) -> ForwardHooks {
        let steps = self.schedule.ddim_steps as f64;
        let mut kinds = Vec::new();
        if (k as f64) < steps * (1.0 - self.cfg.tau_self) {
            kinds.push(TapKind::SelfAttnOut);
        }
        if (k as f64) < steps * (1.0 - self.cfg.tau_res) {
            kinds.push(TapKind::ResnetOut);
        }
        ForwardHooks { taps: Default::default(), overrides: self.cache.overrides_at(t, &kinds) }
    }

    /// Region-wise feature fusion with concept-free suppression:
    /// (1 + lambda) * (sum_i h_i M_i + h_bg M_bg) - lambda * h_base.
    fn fuse_features(
        &self,
        info: &LayerInfo,
        normed: &Array2<f64>,
        lambda: f64,
    ) -> Result<Array2<f64>> {
        let weights = self.masks.flat_weights(info.resolution)?;
        debug_assert_eq!(weights.len(), self.branches.len());
        let mut fused: Option<Array2<f64>> = None;
        for (b, branch) in self.branches.iter().enumerate() {
            let w = branch
                .cross_weights(info.id)
                .ok_or_else(|| CoreError::Validation(format!("layer {} not cross", info.id)))?;
            let h = crate::nn::cross_attention(normed, &self.branch_ctx[b], w)?;
            let masked = mask_rows(&h, &weights[b]);
            fused = Some(match fused {
                Some(acc) => acc + masked,
                None => masked,
            });
        }
        let mut fused = fused.expect("at least the background branch exists");
        if lambda != 0.0 {
            let base_w = self.base.cross_weights(info.id).unwrap();
            let h_base = crate::nn::cross_attention(normed, &self.base_ctx, base_w)?;
            fused = fused * (1.0 + lambda) - h_base * lambda;
        }
        Ok(fused)
    }

    /// Fused score estimate for one timestep (interleaved mode).
    fn eps_fuse_interleaved(&self, z: &Array3<f64>, t: usize, hooks: &ForwardHooks) -> Result<Array3<f64>> {
        struct FusedCross<'r, 'a> {
            run: &'r FusionRun<'a>,
        }
        impl CrossHandler for FusedCross<'_, '_> {
            fn eval(
                &mut self,
                info: &LayerInfo,
                _backbone: &CrossAttnWeights,
                normed: &Array2<f64>,
            ) -> Result<Array2<f64>> {
                self.run.fuse_features(info, normed, self.run.cfg.lambda_suppress)
            }
        }
        let mut handler = FusedCross { run: self };
        let (eps, _) = self.base.forward_with(z, t, &mut handler, hooks)?;
        Ok(eps)
    }

    /// Fused score estimate via N+2 independent passes plus a final
    /// overridden pass.
    fn eps_fuse_independent(
        &self,
        z: &Array3<f64>,
        t: usize,
        hooks: &ForwardHooks,
    ) -> Result<Array3<f64>> {
        let cross_keys: Vec<(usize, TapKind)> = self
            .base
            .registry()
            .iter()
            .filter(|l| l.kind == TapKind::CrossAttnOut)
            .map(|l| (l.id, l.kind))
            .collect();
        let registry = self.base.registry();

        struct BranchCross<'p> {
            params: &'p UNetParams,
            ctx: &'p Array2<f64>,
        }
        impl CrossHandler for BranchCross<'_> {
            fn eval(
                &mut self,
                info: &LayerInfo,
                _backbone: &CrossAttnWeights,
                normed: &Array2<f64>,
            ) -> Result<Array2<f64>> {
                let w = self.params.cross_weights(info.id).unwrap();
                crate::nn::cross_attention(normed, self.ctx, w)
            }
        }

        let mut tap_hooks = hooks.clone();
        tap_hooks.taps.extend(cross_keys.iter().copied());

        let mut branch_taps = Vec::with_capacity(self.branches.len());
        for (b, branch) in self.branches.iter().enumerate() {
            let mut handler = BranchCross { params: branch, ctx: &self.branch_ctx[b] };
            let (_, taps) = self.base.forward_with(z, t, &mut handler, &tap_hooks)?;
            branch_taps.push(taps);
        }
        let base_taps = {
            let mut handler = BranchCross { params: self.base, ctx: &self.base_ctx };
            let (_, taps) = self.base.forward_with(z, t, &mut handler, &tap_hooks)?;
            taps
        };

        // assemble h_fuse per cross layer
        let lambda = self.cfg.lambda_suppress;
        let mut final_hooks = hooks.clone();
        for key in &cross_keys {
            let info = registry.iter().find(|l| l.id == key.0).unwrap();
            let weights = self.masks.flat_weights(info.resolution)?;
            let mut fused: Option<Array2<f64>> = None;
            for (b, taps) in branch_taps.iter().enumerate() {
                let h = taps[key].clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                let masked = mask_rows(&h, &weights[b]);
                fused = Some(match fused {
                    Some(acc) => acc + masked,
                    None => masked,
                });
            }
            let mut fused = fused.unwrap();
            if lambda != 0.0 {
                let h_base =
                    base_taps[key].clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                fused = fused * (1.0 + lambda) - h_base * lambda;
            }
            final_hooks.overrides.insert(*key, fused.into_dyn());
        }
        let mut handler = crate::unet::StdCross { ctx: &self.base_ctx };
        let (eps, _) = self.base.forward_with(z, t, &mut handler, &final_hooks)?;
        Ok(eps)
    }

    /// One fusion sampling step: fused score, negative-guidance combination,
    /// and a DDIM reverse move. `k` is the reverse step index (0 at t = T).
    pub fn fuse_step(&self, z: &Array3<f64>, k: usize, t: usize, t_prev: usize) -> Result<Array3<f64>> {
        let hooks = self.injection_hooks(t, k);
        let eps_fuse = match self.cfg.fusion_mode {
            FusionMode::Interleaved => self.eps_fuse_interleaved(z, t, &hooks)?,
            FusionMode::IndependentPasses => self.eps_fuse_independent(z, t, &hooks)?,
        };
        let eps = if self.cfg.omega == 1.0 {
            eps_fuse
        } else {
            let (eps_neg, _) = self.base.eps_predict(z, t, &self.neg_prompt, &hooks)?;
            combine_guidance(&eps_fuse, &eps_neg, self.cfg.omega)
        };
        let z_next = self.schedule.ddim_reverse_step(z, &eps, t, t_prev)?;
        if !crate::tensor::all_finite3(&z_next) {
            return Err(CoreError::Numerical(format!("non-finite latent in fusion at t={t}")));
        }
        Ok(z_next)
    }

    /// Naive ablation: mix the branch score estimates in eps space under the
    /// full-resolution masks instead of fusing features. Injection hooks are
    /// applied per configuration (`inject` = false for the mask-only mode).
    pub fn naive_eps_mix_step(
        &self,
        z: &Array3<f64>,
        k: usize,
        t: usize,
        t_prev: usize,
        inject: bool,
    ) -> Result<Array3<f64>> {
        let hooks = if inject { self.injection_hooks(t, k) } else { ForwardHooks::default() };
        let res = self.base.cfg.img_size;
        let weights = self.masks.flat_weights(res)?;
        let prompts: Vec<&PromptTokens> = Vec::new();
        let _ = prompts;
        let mut eps_mix: Option<Array3<f64>> = None;
        for (b, branch) in self.branches.iter().enumerate() {
            let ctx = &self.branch_ctx[b];
            let mut handler = crate::unet::StdCross { ctx };
            let (eps_b, _) = branch.forward_with(z, t, &mut handler, &hooks)?;
            let masked = mask_channels(&eps_b, &weights[b], res);
            eps_mix = Some(match eps_mix {
                Some(acc) => acc + masked,
                None => masked,
            });
        }
        let eps_mix = eps_mix.expect("at least the background branch exists");
        let eps = if self.cfg.omega == 1.0 {
            eps_mix
        } else {
            let (eps_neg, _) = self.base.eps_predict(z, t, &self.neg_prompt, &hooks)?;
            combine_guidance(&eps_mix, &eps_neg, self.cfg.omega)
        };
        let z_next = self.schedule.ddim_reverse_step(z, &eps, t, t_prev)?;
        if !crate::tensor::all_finite3(&z_next) {
            return Err(CoreError::Numerical(format!("non-finite latent in eps-mix at t={t}")));
        }
        Ok(z_next)
    }

    /// Run the full fusion loop from the cache's inverted noise.
    pub fn sample(&self) -> Result<Array3<f64>> {
        let mut z = self.cache.z_noise.clone();
        for (k, (t, t_prev)) in self.schedule.reverse_pairs().into_iter().enumerate() {
            z = self.fuse_step(&z, k, t, t_prev)?;
        }
        clip_unit(&mut z);
        Ok(z)
    }

    /// Run the eps-mixing loop; `from_noise` starts from seeded Gaussian
    /// noise instead of the inverted latent (the mask-only ablation).
    pub fn sample_eps_mix(&self, inject: bool, from_noise: Option<u64>) -> Result<Array3<f64>> {
        let mut z = match from_noise {
            Some(seed) => {
                let c = self.base.cfg.img_channels;
                let hw = self.base.cfg.img_size;
                randn3(&mut split_rng(seed, "mask-only-init", 0), (c, hw, hw))
            }
            None => self.cache.z_noise.clone(),
        };
        for (k, (t, t_prev)) in self.schedule.reverse_pairs().into_iter().enumerate() {
            z = self.naive_eps_mix_step(&z, k, t, t_prev, inject)?;
        }
        clip_unit(&mut z);
        Ok(z)
    }
}

/// Multiply each row (spatial position) of an (n, c) feature matrix by a
/// per-position weight, broadcast across channels.
fn mask_rows(h: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    debug_assert_eq!(h.shape()[0], weights.len());
    let mut out = h.clone();
    for (mut row, &w) in out.rows_mut().into_iter().zip(weights.iter()) {
        row *= w;
    }
    out
}

/// Multiply each pixel of a (c, r, r) tensor by a per-position weight.
fn mask_channels(eps: &Array3<f64>, weights: &[f64], res: usize) -> Array3<f64> {
    let mut out = eps.clone();
    let c = out.shape()[0];
    for ch in 0..c {
        for y in 0..res {
            for x in 0..res {
                out[[ch, y, x]] *= weights[y * res + x];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// End-to-end fusion of one template
// ---------------------------------------------------------------------------

pub struct FuseInputs<'a> {
    pub base: &'a UNetParams,
    pub bank: &'a ConceptBank,
    pub registry: &'a ConceptRegistry,
    pub schedule: &'a NoiseSchedule,
    pub extraction: &'a ExtractionSpec,
    pub concept_ids: Vec<String>,
    pub bg_id: Option<String>,
    pub base_prompt: PromptTokens,
    pub negative_words: Vec<u16>,
    pub cfg: FusionConfig,
    /// Ground-truth scene for oracle segmentation, when the template came
    /// from the renderer.
    pub gt: Option<&'a LabeledScene>,
    /// Optional probe score for template filtering.
    pub probe_score: Option<f64>,
    pub overlap_threshold: f64,
    pub probe_threshold: f64,
    pub rectangular_masks: bool,
}

pub struct FuseOutput {
    pub image: Array3<f64>,
    pub masks: MaskSet,
    pub plan: PromptPlan,
    pub template_hash: String,
}

/// Structured rejection: the template failed filtering (callers retry with
/// another template seed).
pub enum FuseResult {
    Done(Box<FuseOutput>),
    Rejected(crate::masks::RejectReason),
}

/// Invert the template, extract and filter masks, build prompts, then fuse.
pub fn fuse_sample(template: &Array3<f64>, inputs: &FuseInputs) -> Result<FuseResult> {
    let words: Vec<ShapeClass> = inputs
        .concept_ids
        .iter()
        .map(|id| match &inputs.registry.require(id)?.target {
            crate::scene::ConceptTarget::Object { shape, .. } => Ok(*shape),
            crate::scene::ConceptTarget::Background { .. } => Err(CoreError::Validation(
                format!("concept {id:?} is a background style, not an object"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;

    let seg = segment_concepts(template, &words, inputs.gt)?;
    let verdict = filter_template(
        &seg,
        inputs.probe_score,
        inputs.overlap_threshold,
        inputs.probe_threshold,
    );
    if let crate::masks::Verdict::Reject(reason) = verdict {
        return Ok(FuseResult::Rejected(reason));
    }
    let dense: Vec<_> = seg.iter().filter_map(|r| r.mask().cloned()).collect();
    let resolutions = unet_resolutions(inputs.base);
    let masks = build_mask_set(
        &dense,
        default_kernel(inputs.base.cfg.img_size),
        &resolutions,
        inputs.rectangular_masks,
    )?;

    let plan = build_prompts(
        &inputs.base_prompt,
        inputs.bank,
        inputs.registry,
        &inputs.concept_ids,
        inputs.bg_id.as_deref(),
        &inputs.negative_words,
    )?;
    let cache =
        invert_and_cache(template, &plan.p_src, inputs.base, inputs.schedule, inputs.extraction)?;

    let entries: Vec<&ConceptBankEntry> = inputs
        .concept_ids
        .iter()
        .map(|id| inputs.bank.get(id))
        .collect::<Result<Vec<_>>>()?;
    let bg_entry_owned;
    let bg_entry = match &inputs.bg_id {
        Some(id) => inputs.bank.get(id)?,
        None => {
            bg_entry_owned = crate::bank::identity_entry(inputs.base, "background", crate::vocab::modifier_token(crate::vocab::MODIFIER_SLOTS - 1));
            &bg_entry_owned
        }
    };

    let run = FusionRun::new(
        inputs.base,
        &entries,
        bg_entry,
        &plan,
        &masks,
        &cache,
        inputs.cfg.clone(),
        inputs.schedule,
    )?;
    let image = run.sample()?;
    Ok(FuseResult::Done(Box::new(FuseOutput {
        image,
        masks,
        plan,
        template_hash: cache.template_hash.clone(),
    })))
}

/// Spatial resolutions present in the model's cross-attention layers.
pub fn unet_resolutions(params: &UNetParams) -> Vec<usize> {
    let mut res: Vec<usize> = params
        .registry()
        .iter()
        .filter(|l| l.kind == TapKind::CrossAttnOut)
        .map(|l| l.resolution)
        .collect();
    res.push(params.cfg.img_size);
    res.sort_unstable();
    res.dedup();
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::identity_entry;
    use crate::masks::build_mask_set;
    use crate::schedule::ScheduleConfig;
    use crate::unet::UNetConfig;
    use crate::vocab::{
        bg_token, filler_token, modifier_token, negative_token, shape_token,
    };
    use ndarray::Array2;

    fn tiny_base(seed: u64) -> UNetParams {
        let mut p = UNetParams::new(UNetConfig::tiny(), seed).unwrap();
        p.randomize_all(seed + 1, 0.05);
        p
    }

    fn schedule(steps: usize) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig { ddim_steps: steps, ..Default::default() }).unwrap()
    }

    fn base_prompt() -> PromptTokens {
        PromptTokens::new(vec![
            filler_token("a"),
            shape_token(0),
            filler_token("and"),
            filler_token("a"),
            shape_token(1),
            filler_token("on"),
            bg_token(1),
        ])
        .unwrap()
    }

    fn template_8() -> Array3<f64> {
        let mut t = crate::rng::randn3(&mut crate::rng::seed_rng(77), (3, 8, 8));
        t.mapv_inplace(|v| (v * 0.4).tanh());
        t
    }

    /// Masks for the tiny 8x8 model: left strip, right strip, rest bg.
    fn tiny_masks(resolutions: &[usize]) -> MaskSet {
        let mut a = Array2::<u8>::zeros((8, 8));
        let mut b = Array2::<u8>::zeros((8, 8));
        for y in 0..8 {
            for x in 0..2 {
                a[[y, x]] = 1;
            }
            for x in 6..8 {
                b[[y, x]] = 1;
            }
        }
        build_mask_set(&[a, b], 1, resolutions, false).unwrap()
    }

    fn plan_with_modifiers(base: &PromptTokens) -> PromptPlan {
        PromptPlan {
            p_base: base.clone(),
            per_concept: vec![
                base.with_modifier_before(modifier_token(0), shape_token(0)).unwrap(),
                base.with_modifier_before(modifier_token(1), shape_token(1)).unwrap(),
            ],
            p_plus_bg: base.with_modifier_before(modifier_token(2), bg_token(1)).unwrap(),
            p_neg: PromptTokens::new(vec![negative_token(0), negative_token(1)]).unwrap(),
            p_src: base.clone(),
        }
    }

    #[test]
    fn suppression_formula_scalar_case() {
        // h_1 = 2 on its region, h_bg = 0 elsewhere, h_base = 1, lambda = 0.3
        // fused on the concept region = 1.3 * 2 - 0.3 * 1 = 2.3
        let h1 = 2.0_f64;
        let h_base = 1.0_f64;
        let lambda = 0.3_f64;
        let fused = (1.0 + lambda) * (h1 * 1.0 + 0.0 * 0.0) - lambda * h_base;
        assert!((fused - 2.3).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_suppression_identity() {
        // with lambda = 0 the fused tensor is exactly sum h_i M_i + h_bg M_bg
        let base = tiny_base(41);
        let sched = schedule(4);
        let tpl = template_8();
        let plan = plan_with_modifiers(&base_prompt());
        let resolutions = unet_resolutions(&base);
        let masks = tiny_masks(&resolutions);
        let cache = invert_and_cache(
            &tpl,
            &plan.p_src,
            &base,
            &sched,
            &ExtractionSpec::default(),
        )
        .unwrap();
        let e0 = identity_entry(&base, "c0", modifier_token(0));
        let e1 = identity_entry(&base, "c1", modifier_token(1));
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let mut cfg = FusionConfig { lambda_suppress: 0.0, steps: 4, ..Default::default() };
        cfg.omega = 1.0;
        let run = FusionRun::new(&base, &[&e0, &e1], &ebg, &plan, &masks, &cache, cfg, &sched)
            .unwrap();
        // directly check the fused tensor at one cross layer
        let info = base
            .registry()
            .into_iter()
            .find(|l| l.kind == TapKind::CrossAttnOut)
            .unwrap();
        let normed = crate::rng::randn2(&mut crate::rng::seed_rng(5), 64, info.channels);
        let fused = run.fuse_features(&info, &normed, 0.0).unwrap();
        // manual assembly
        let weights = masks.flat_weights(info.resolution).unwrap();
        let mut expect: Option<Array2<f64>> = None;
        for (b, ctx) in run.branch_ctx.iter().enumerate() {
            let w = run.branches[b].cross_weights(info.id).unwrap();
            let h = crate::nn::cross_attention(&normed, ctx, w).unwrap();
            let m = mask_rows(&h, &weights[b]);
            expect = Some(match expect {
                Some(acc) => acc + m,
                None => m,
            });
        }
        assert_eq!(fused, expect.unwrap());
    }

    #[test]
    fn mask_algebra_identical_branches_return_branch_tensor() {
        // when h_base = h_i = h_bg, (1+l) h - l h = h pointwise up to fp
        let base = tiny_base(43);
        let sched = schedule(3);
        let tpl = template_8();
        let base_p = base_prompt();
        // all prompts identical -> all branch tensors identical
        let plan = PromptPlan {
            p_base: base_p.clone(),
            per_concept: vec![base_p.clone(), base_p.clone()],
            p_plus_bg: base_p.clone(),
            p_neg: base_p.clone(),
            p_src: base_p.clone(),
        };
        let resolutions = unet_resolutions(&base);
        let masks = tiny_masks(&resolutions);
        let cache =
            invert_and_cache(&tpl, &plan.p_src, &base, &sched, &ExtractionSpec::default())
                .unwrap();
        let e0 = identity_entry(&base, "c0", modifier_token(0));
        let e1 = identity_entry(&base, "c1", modifier_token(1));
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let cfg = FusionConfig { lambda_suppress: 0.3, steps: 3, ..Default::default() };
        let run = FusionRun::new(&base, &[&e0, &e1], &ebg, &plan, &masks, &cache, cfg, &sched)
            .unwrap();
        let info = base
            .registry()
            .into_iter()
            .find(|l| l.kind == TapKind::CrossAttnOut)
            .unwrap();
        let normed = crate::rng::randn2(&mut crate::rng::seed_rng(6), 64, info.channels);
        let fused = run.fuse_features(&info, &normed, 0.3).unwrap();
        let w = base.cross_weights(info.id).unwrap();
        let ctx = base.embed_prompt(&base_p);
        let h = crate::nn::cross_attention(&normed, &ctx, w).unwrap();
        let diff = (&fused - &h).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn permutation_equivariance_two_concepts() {
        let base = tiny_base(44);
        let sched = schedule(3);
        let tpl = template_8();
        let plan = plan_with_modifiers(&base_prompt());
        let resolutions = unet_resolutions(&base);
        let masks = tiny_masks(&resolutions);
        let cache =
            invert_and_cache(&tpl, &plan.p_src, &base, &sched, &ExtractionSpec::default())
                .unwrap();
        let e0 = identity_entry(&base, "c0", modifier_token(0));
        let e1 = identity_entry(&base, "c1", modifier_token(1));
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let cfg = FusionConfig { steps: 3, ..Default::default() };

        let run = FusionRun::new(
            &base, &[&e0, &e1], &ebg, &plan, &masks, &cache, cfg.clone(), &sched,
        )
        .unwrap();
        let img = run.sample().unwrap();

        // swap entries, prompts, and masks together
        let mut swapped_masks = masks.clone();
        swapped_masks.concept_masks.swap(0, 1);
        swapped_masks.dense_masks.swap(0, 1);
        for level in swapped_masks.pyramid.values_mut() {
            level.swap(0, 1);
        }
        let swapped_plan = PromptPlan {
            per_concept: vec![plan.per_concept[1].clone(), plan.per_concept[0].clone()],
            ..plan.clone()
        };
        let run2 = FusionRun::new(
            &base,
            &[&e1, &e0],
            &ebg,
            &swapped_plan,
            &swapped_masks,
            &cache,
            cfg,
            &sched,
        )
        .unwrap();
        let img2 = run2.sample().unwrap();
        assert_eq!(img, img2, "fusion is not permutation-equivariant");
    }

    #[test]
    fn all_base_degenerate_fusion_equals_reconstruction() {
        let base = tiny_base(45);
        let sched = schedule(6);
        let tpl = template_8();
        let base_p = base_prompt();
        // p_{+i} = p_base, entries = base, lambda = 0, omega = 1
        let plan = PromptPlan {
            p_base: base_p.clone(),
            per_concept: vec![base_p.clone(), base_p.clone()],
            p_plus_bg: base_p.clone(),
            p_neg: PromptTokens::new(vec![negative_token(0)]).unwrap(),
            p_src: base_p.clone(),
        };
        let resolutions = unet_resolutions(&base);
        let masks = tiny_masks(&resolutions);
        let cache =
            invert_and_cache(&tpl, &plan.p_src, &base, &sched, &ExtractionSpec::default())
                .unwrap();
        let e0 = identity_entry(&base, "c0", modifier_token(0));
        let e1 = identity_entry(&base, "c1", modifier_token(1));
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let cfg = FusionConfig {
            lambda_suppress: 0.0,
            omega: 1.0,
            steps: 6,
            ..Default::default()
        };
        let run = FusionRun::new(&base, &[&e0, &e1], &ebg, &plan, &masks, &cache, cfg, &sched)
            .unwrap();
        let fused = run.sample().unwrap();
        let recon = crate::invert::reconstruct(&cache, &base, &sched).unwrap();
        let diff = crate::tensor::max_abs_diff(&fused.view(), &recon.view());
        assert!(diff <= 1e-5, "max diff {diff}");
    }

    #[test]
    fn interleaved_equals_independent_on_degenerate_case() {
        // 1 concept, all-ones mask, lambda = 0: both modes give the same eps
        let base = tiny_base(46);
        let sched = schedule(4);
        let tpl = template_8();
        let base_p = base_prompt();
        let plan = PromptPlan {
            p_base: base_p.clone(),
            per_concept: vec![base_p
                .with_modifier_before(modifier_token(0), shape_token(0))
                .unwrap()],
            p_plus_bg: base_p.clone(),
            p_neg: PromptTokens::new(vec![negative_token(0)]).unwrap(),
            p_src: base_p.clone(),
        };
        let resolutions = unet_resolutions(&base);
        let ones = Array2::<u8>::ones((8, 8));
        let masks = build_mask_set(&[ones], 1, &resolutions, false).unwrap();
        assert!(masks.background.iter().all(|&v| v == 0));
        let cache =
            invert_and_cache(&tpl, &plan.p_src, &base, &sched, &ExtractionSpec::default())
                .unwrap();
        let e0 = identity_entry(&base, "c0", modifier_token(0));
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let mk = |mode| FusionConfig {
            lambda_suppress: 0.0,
            omega: 1.0,
            steps: 4,
            fusion_mode: mode,
            ..Default::default()
        };
        let run_a = FusionRun::new(
            &base,
            &[&e0],
            &ebg,
            &plan,
            &masks,
            &cache,
            mk(FusionMode::Interleaved),
            &sched,
        )
        .unwrap();
        let run_b = FusionRun::new(
            &base,
            &[&e0],
            &ebg,
            &plan,
            &masks,
            &cache,
            mk(FusionMode::IndependentPasses),
            &sched,
        )
        .unwrap();
        let z = cache.z_noise.clone();
        let pairs = sched.reverse_pairs();
        let (t, t_prev) = pairs[0];
        let za = run_a.fuse_step(&z, 0, t, t_prev).unwrap();
        let zb = run_b.fuse_step(&z, 0, t, t_prev).unwrap();
        let diff = crate::tensor::max_abs_diff(&za.view(), &zb.view());
        assert!(diff <= 1e-12, "modes disagree: {diff}");
    }

    #[test]
    fn eps_mix_single_branch_equals_single_model_step() {
        let base = tiny_base(47);
        let sched = schedule(4);
        let tpl = template_8();
        let base_p = base_prompt();
        let p_plus = base_p.with_modifier_before(modifier_token(0), shape_token(0)).unwrap();
        let plan = PromptPlan {
            p_base: base_p.clone(),
            per_concept: vec![p_plus.clone()],
            p_plus_bg: base_p.clone(),
            p_neg: PromptTokens::new(vec![negative_token(0)]).unwrap(),
            p_src: base_p.clone(),
        };
        let resolutions = unet_resolutions(&base);
        let ones = Array2::<u8>::ones((8, 8));
        let masks = build_mask_set(&[ones], 1, &resolutions, false).unwrap();
        let cache =
            invert_and_cache(&tpl, &plan.p_src, &base, &sched, &ExtractionSpec::default())
                .unwrap();
        let e0 = identity_entry(&base, "c0", modifier_token(0));
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let cfg = FusionConfig { omega: 1.0, steps: 4, ..Default::default() };
        let run =
            FusionRun::new(&base, &[&e0], &ebg, &plan, &masks, &cache, cfg, &sched).unwrap();
        let z = cache.z_noise.clone();
        let (t, t_prev) = sched.reverse_pairs()[0];
        let mixed = run.naive_eps_mix_step(&z, 0, t, t_prev, false).unwrap();
        // reference: plain eps step with the single branch model
        // (background contributes zero since M_bg = 0)
        let (eps, _) = base.eps_predict(&z, t, &p_plus, &ForwardHooks::default()).unwrap();
        let expect = sched.ddim_reverse_step(&z, &eps, t, t_prev).unwrap();
        let diff = crate::tensor::max_abs_diff(&mixed.view(), &expect.view());
        assert!(diff <= 1e-12, "diff {diff}");
    }

    #[test]
    fn eps_mix_respects_partition_regions() {
        // with a hard partition, eps_fuse equals the branch's eps inside
        // each region pointwise
        let base = tiny_base(48);
        let sched = schedule(3);
        let tpl = template_8();
        let plan = plan_with_modifiers(&base_prompt());
        let resolutions = unet_resolutions(&base);
        let masks = tiny_masks(&resolutions);
        let cache =
            invert_and_cache(&tpl, &plan.p_src, &base, &sched, &ExtractionSpec::default())
                .unwrap();
        let e0 = identity_entry(&base, "c0", modifier_token(0));
        let e1 = identity_entry(&base, "c1", modifier_token(1));
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let cfg = FusionConfig { omega: 1.0, steps: 3, ..Default::default() };
        let run = FusionRun::new(&base, &[&e0, &e1], &ebg, &plan, &masks, &cache, cfg, &sched)
            .unwrap();
        let z = cache.z_noise.clone();
        let (t, _) = sched.reverse_pairs()[0];
        // recompute the mixed eps directly (before the ddim move)
        let hooks = ForwardHooks::default();
        let (eps0, _) = run.branches[0].eps_predict(&z, t, &plan.per_concept[0], &hooks).unwrap();
        let (eps1, _) = run.branches[1].eps_predict(&z, t, &plan.per_concept[1], &hooks).unwrap();
        let (epsbg, _) = run.branches[2].eps_predict(&z, t, &plan.p_plus_bg, &hooks).unwrap();
        let weights = masks.flat_weights(8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let pos = y * 8 + x;
                let expected = if weights[0][pos] == 1.0 {
                    &eps0
                } else if weights[1][pos] == 1.0 {
                    &eps1
                } else {
                    &epsbg
                };
                let mix = eps0[[0, y, x]] * weights[0][pos]
                    + eps1[[0, y, x]] * weights[1][pos]
                    + epsbg[[0, y, x]] * weights[2][pos];
                assert!((mix - expected[[0, y, x]]).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn injection_windows_respect_tau() {
        let base = tiny_base(49);
        let sched = schedule(10);
        let tpl = template_8();
        let plan = plan_with_modifiers(&base_prompt());
        let resolutions = unet_resolutions(&base);
        let masks = tiny_masks(&resolutions);
        let cache =
            invert_and_cache(&tpl, &plan.p_src, &base, &sched, &ExtractionSpec::default())
                .unwrap();
        let e0 = identity_entry(&base, "c0", modifier_token(0));
        let e1 = identity_entry(&base, "c1", modifier_token(1));
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let cfg = FusionConfig { tau_self: 0.6, tau_res: 0.5, steps: 10, ..Default::default() };
        let run = FusionRun::new(&base, &[&e0, &e1], &ebg, &plan, &masks, &cache, cfg, &sched)
            .unwrap();
        let pairs = sched.reverse_pairs();
        // 10 steps: self-attn injected for k < 4, residual for k < 5
        for (k, (t, _)) in pairs.iter().enumerate() {
            let hooks = run.injection_hooks(*t, k);
            let has_self = hooks.overrides.keys().any(|ke| ke.1 == TapKind::SelfAttnOut);
            let has_res = hooks.overrides.keys().any(|ke| ke.1 == TapKind::ResnetOut);
            assert_eq!(has_self, k < 4, "self injection window wrong at k={k}");
            assert_eq!(has_res, k < 5, "residual injection window wrong at k={k}");
        }
        // tau = 1.0 disables injection entirely
        let cfg = FusionConfig { tau_self: 1.0, tau_res: 1.0, steps: 10, ..Default::default() };
        let run = FusionRun::new(&base, &[&e0, &e1], &ebg, &plan, &masks, &cache, cfg, &sched)
            .unwrap();
        for (k, (t, _)) in pairs.iter().enumerate() {
            assert!(run.injection_hooks(*t, k).overrides.is_empty());
        }
    }

    #[test]
    fn full_degeneracy_matches_plain_cfg_step() {
        // lambda=0, N=0, bg entry = base weights, injections disabled:
        // a fusion step is exactly a plain guided sampling step
        let base = tiny_base(50);
        let sched = schedule(4);
        let tpl = template_8();
        let base_p = base_prompt();
        let neg = PromptTokens::new(vec![negative_token(0)]).unwrap();
        let plan = PromptPlan {
            p_base: base_p.clone(),
            per_concept: vec![],
            p_plus_bg: base_p.clone(),
            p_neg: neg.clone(),
            p_src: base_p.clone(),
        };
        let resolutions = unet_resolutions(&base);
        // zero concepts: background owns everything
        let masks = MaskSet {
            concept_masks: vec![],
            background: Array2::ones((8, 8)),
            dense_masks: vec![],
            pyramid: resolutions
                .iter()
                .map(|&r| (r, vec![Array2::from_elem((r, r), 1.0)]))
                .collect(),
            kernel: 1,
        };
        let cache =
            invert_and_cache(&tpl, &plan.p_src, &base, &sched, &ExtractionSpec::default())
                .unwrap();
        let ebg = identity_entry(&base, "bg", modifier_token(2));
        let cfg = FusionConfig {
            lambda_suppress: 0.0,
            omega: 7.5,
            tau_self: 1.0,
            tau_res: 1.0,
            steps: 4,
            ..Default::default()
        };
        let run =
            FusionRun::new(&base, &[], &ebg, &plan, &masks, &cache, cfg, &sched).unwrap();
        let z = cache.z_noise.clone();
        let (t, t_prev) = sched.reverse_pairs()[0];
        let fused = run.fuse_step(&z, 0, t, t_prev).unwrap();
        // plain CFG step with the base model under p_base
        let hooks = ForwardHooks::default();
        let (eps_c, _) = base.eps_predict(&z, t, &base_p, &hooks).unwrap();
        let (eps_n, _) = base.eps_predict(&z, t, &neg, &hooks).unwrap();
        let eps = combine_guidance(&eps_c, &eps_n, 7.5);
        let expect = sched.ddim_reverse_step(&z, &eps, t, t_prev).unwrap();
        let diff = crate::tensor::max_abs_diff(&fused.view(), &expect.view());
        assert!(diff <= 1e-12, "diff {diff}");
    }

    #[test]
    fn template_guidance_linearity() {
        let base = tiny_base(51);
        let sched = schedule(4);
        let p = base_prompt();
        let neg = PromptTokens::new(vec![negative_token(0)]).unwrap();
        // lambda_mc = 0 is bit-identical to plain sample()
        let a = generate_template(&base, &p, Some(&p), &neg, &sched, 3.0, 0.0, 9).unwrap();
        let b = crate::sampler::sample(&base, &p, &neg, &sched, 3.0, 9, &ForwardHooks::default())
            .unwrap();
        assert_eq!(a, b);
        // p_mc = p_tg with lambda_mc = 1 doubles the conditional branch:
        // check pointwise on a single step
        let z = crate::rng::randn3(&mut crate::rng::seed_rng(10), (3, 8, 8));
        let (t, _) = sched.reverse_pairs()[0];
        let hooks = ForwardHooks::default();
        let (eps_c, _) = base.eps_predict(&z, t, &p, &hooks).unwrap();
        let doubled = &eps_c + &eps_c;
        let single_plus_mc = &eps_c + &(eps_c.clone() * 1.0);
        let diff = crate::tensor::max_abs_diff(&doubled.view(), &single_plus_mc.view());
        assert!(diff <= 1e-15, "{diff}");
    }

    #[test]
    fn build_prompts_inserts_exactly_one_token() {
        let base = tiny_base(52);
        let registry = ConceptRegistry::standard();
        let mut bank = ConceptBank::new(base.content_hash());
        for def in &registry.concepts {
            bank.insert(identity_entry(&base, &def.id, def.modifier())).unwrap();
        }
        let base_p = base_prompt();
        let plan = build_prompts(
            &base_p,
            &bank,
            &registry,
            &["ring-circle".to_string(), "checker-square".to_string()],
            Some("diag-stripes"),
            &[negative_token(0), negative_token(1)],
        )
        .unwrap();
        assert_eq!(plan.p_src, base_p);
        assert_eq!(plan.per_concept.len(), 2);
        for (i, p) in plan.per_concept.iter().enumerate() {
            assert_eq!(p.len(), base_p.len() + 1, "concept {i} prompt length");
            // exactly one insertion: removing the modifier restores the base
            let toks: Vec<u16> =
                p.tokens().iter().copied().filter(|t| !crate::vocab::is_modifier(*t)).collect();
            assert_eq!(toks, base_p.tokens());
        }
        // first concept's modifier precedes "circle" only
        let toks = plan.per_concept[0].tokens();
        let pos = toks
            .iter()
            .position(|&t| t == registry.get("ring-circle").unwrap().modifier())
            .unwrap();
        assert_eq!(toks[pos + 1], shape_token(0));
        // bg modifier precedes "stripes"
        let toks = plan.p_plus_bg.tokens();
        let pos = toks
            .iter()
            .position(|&t| t == registry.get("diag-stripes").unwrap().modifier())
            .unwrap();
        assert_eq!(toks[pos + 1], bg_token(1));

        // zero concepts, bg only
        let plan = build_prompts(&base_p, &bank, &registry, &[], Some("diag-stripes"), &[]).unwrap();
        assert!(plan.per_concept.is_empty());
        assert_eq!(plan.p_plus_bg.len(), base_p.len() + 1);

        // duplicated class word is rejected
        let dup = PromptTokens::new(vec![shape_token(0), shape_token(0)]).unwrap();
        assert!(build_prompts(
            &dup,
            &bank,
            &registry,
            &["ring-circle".to_string()],
            None,
            &[]
        )
        .is_err());
    }
}
