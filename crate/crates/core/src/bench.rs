//! Benchmark runner: generates filtered templates per combination, runs
//! every requested sampling configuration (the full method and its
//! ablations), scores the results with the probe, and aggregates means with
//! bootstrap confidence half-widths.

use crate::bank::{ConceptBank, ConceptBankEntry};
use crate::error::{CoreError, Result};
use crate::fusion::{
    build_prompts, generate_template, unet_resolutions, FusionConfig, FusionRun,
};
use crate::invert::{invert_and_cache, ExtractionSpec};
use crate::masks::{build_mask_set, default_kernel, filter_template, segment_concepts};
use crate::metrics::{image_alignment, regions_correct, text_alignment, MetricsRow};
use crate::probe::ConceptProbe;
use crate::rng::split;
use crate::scene::{ConceptRegistry, ConceptTarget, ShapeClass};
use crate::schedule::NoiseSchedule;
use crate::unet::UNetParams;
use crate::vocab::PromptTokens;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// (a) naive eps mixing from random noise, no feature injection.
    MaskOnly,
    /// (b) full feature fusion without injection.
    NoInjection,
    /// (c) eps-space mixing from the inverted latent, injections kept.
    EpsMix,
    /// (d) full method with the suppression term removed.
    NoSuppression,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::MaskOnly,
        AblationMode::NoInjection,
        AblationMode::EpsMix,
        AblationMode::NoSuppression,
        AblationMode::Full,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            AblationMode::MaskOnly => "mask_only",
            AblationMode::NoInjection => "no_injection",
            AblationMode::EpsMix => "eps_mix",
            AblationMode::NoSuppression => "no_suppression",
            AblationMode::Full => "full",
        }
    }
}

/// One multi-concept combination to benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchCombination {
    pub name: String,
    pub concepts: Vec<String>,
    pub bg: Option<String>,
    pub prompts: Vec<Vec<u16>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSettings {
    pub n_seeds: usize,
    pub modes: Vec<AblationMode>,
    pub max_template_retries: usize,
    pub fusion: FusionConfig,
    pub overlap_threshold: f64,
    pub probe_threshold: f64,
    pub negative_words: Vec<u16>,
    /// Worker threads; 1 keeps execution strictly sequential.
    pub jobs: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            n_seeds: 10,
            modes: AblationMode::ALL.to_vec(),
            max_template_retries: 8,
            fusion: FusionConfig::default(),
            overlap_threshold: 0.9,
            probe_threshold: 0.3,
            negative_words: vec![crate::vocab::negative_token(0), crate::vocab::negative_token(1)],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub n_rows: usize,
    pub n_accepted: usize,
    pub n_scored: usize,
    pub n_missing: usize,
    pub mean_image_align: Option<f64>,
    pub mean_text_align: Option<f64>,
    pub regions_correct_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<MetricsRow>,
    pub summaries: Vec<ModeSummary>,
    pub filtered_templates: usize,
}

impl BenchReport {
    pub fn summary_for(&self, mode: AblationMode) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode.tag())
    }

    pub fn image_scores(&self, mode: AblationMode) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.mode == mode.tag())
            .filter_map(|r| r.image_align)
            .collect()
    }

    /// Tab-separated table, one row per generation.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "run_id\tcombination\tprompt\tseed\tmode\taccepted\treject_reason\ttext_align\timage_align\tmissing\tregions_correct\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.run_id,
                r.combination,
                r.prompt_index,
                r.seed,
                r.mode,
                r.accepted,
                r.reject_reason.clone().unwrap_or_default(),
                r.text_align.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.image_align.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.missing.join(","),
                r.all_regions_correct.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}

/// Mean-difference bootstrap: resamples both groups `b` times and returns
/// (mean(a) - mean(b), half-width of the central 90% interval).
pub fn bootstrap_diff_90(a: &[f64], b: &[f64], rounds: usize, seed: u64) -> (f64, f64) {
    assert!(!a.is_empty() && !b.is_empty(), "bootstrap needs nonempty groups");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let point = mean(a) - mean(b);
    let mut diffs = Vec::with_capacity(rounds);
    let mut rng = crate::rng::split_rng(seed, "bootstrap", 0);
    use rand::Rng;
    for _ in 0..rounds {
        let ra: f64 = (0..a.len()).map(|_| a[rng.gen_range(0..a.len())]).sum::<f64>()
            / a.len() as f64;
        let rb: f64 = (0..b.len()).map(|_| b[rng.gen_range(0..b.len())]).sum::<f64>()
            / b.len() as f64;
        diffs.push(ra - rb);
    }
    diffs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let lo = diffs[(rounds as f64 * 0.05) as usize];
    let hi = diffs[((rounds as f64 * 0.95) as usize).min(rounds - 1)];
    (point, (hi - lo) / 2.0)
}

struct TemplateBundle {
    template: Array3<f64>,
    attempts: usize,
}

/// Generate a template for (combo, prompt, seed) with the filtering retry
/// loop. Returns the accepted template or the number of filtered attempts.
#[allow(clippy::too_many_arguments)]
fn make_template(
    base: &UNetParams,
    probe: &ConceptProbe,
    registry: &ConceptRegistry,
    prompt: &PromptTokens,
    mc_prompt: &PromptTokens,
    words: &[ShapeClass],
    settings: &BenchSettings,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<std::result::Result<TemplateBundle, usize>> {
    let neg = PromptTokens::new(settings.negative_words.clone())?;
    for attempt in 0..settings.max_template_retries {
        let tseed = split(seed, "template", attempt as u64);
        let template = generate_template(
            base,
            prompt,
            Some(mc_prompt),
            &neg,
            schedule,
            settings.fusion.omega,
            settings.fusion.lambda_mc,
            tseed,
        )?;
        let seg = segment_concepts(&template, words, None)?;
        let probe_score = text_alignment(&template, prompt, probe, registry);
        let verdict = filter_template(
            &seg,
            Some(probe_score),
            settings.overlap_threshold,
            settings.probe_threshold,
        );
        if verdict.is_accept() {
            return Ok(Ok(TemplateBundle { template, attempts: attempt + 1 }));
        }
    }
    Ok(Err(settings.max_template_retries))
}

/// A multi-concept guidance prompt: the bare shape words of the base prompt.
fn mc_prompt_for(prompt: &PromptTokens) -> PromptTokens {
    let toks: Vec<u16> =
        prompt.tokens().iter().copied().filter(|&t| crate::vocab::is_shape_word(t)).collect();
    PromptTokens::new(toks).unwrap_or_else(|_| PromptTokens::empty())
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    base: &UNetParams,
    bank: &ConceptBank,
    probe: &ConceptProbe,
    registry: &ConceptRegistry,
    schedule: &NoiseSchedule,
    extraction: &ExtractionSpec,
    combo: &BenchCombination,
    prompt_index: usize,
    seed: u64,
    settings: &BenchSettings,
) -> Result<Vec<MetricsRow>> {
    let prompt = PromptTokens::new(combo.prompts[prompt_index].clone())?;
    let words: Vec<ShapeClass> = combo
        .concepts
        .iter()
        .map(|id| match &registry.require(id)?.target {
            ConceptTarget::Object { shape, .. } => Ok(*shape),
            ConceptTarget::Background { .. } => Err(CoreError::Validation(format!(
                "combination concept {id:?} is a background style"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mc = mc_prompt_for(&prompt);
    let run_tag = format!("{}-p{}-s{}", combo.name, prompt_index, seed);

    let bundle = match make_template(
        base, probe, registry, &prompt, &mc, &words, settings, schedule, seed,
    )? {
        Ok(b) => b,
        Err(_) => {
            // every attempt was filtered; emit one rejected row per mode
            return Ok(settings
                .modes
                .iter()
                .map(|mode| MetricsRow {
                    run_id: format!("{run_tag}-{}", mode.tag()),
                    combination: combo.name.clone(),
                    prompt_index,
                    seed,
                    mode: mode.tag().to_string(),
                    accepted: false,
                    reject_reason: Some("template_filter_exhausted".into()),
                    text_align: None,
                    image_align: None,
                    per_concept: Vec::new(),
                    missing: Vec::new(),
                    all_regions_correct: None,
                })
                .collect());
        }
    };

    // shared artifacts for every mode
    let seg = segment_concepts(&bundle.template, &words, None)?;
    let dense: Vec<_> = seg.iter().filter_map(|r| r.mask().cloned()).collect();
    let resolutions = unet_resolutions(base);
    let masks = build_mask_set(
        &dense,
        default_kernel(base.cfg.img_size),
        &resolutions,
        false,
    )?;
    let plan = build_prompts(
        &prompt,
        bank,
        registry,
        &combo.concepts,
        combo.bg.as_deref(),
        &settings.negative_words,
    )?;
    let cache = invert_and_cache(&bundle.template, &plan.p_src, base, schedule, extraction)?;
    let entries: Vec<&ConceptBankEntry> =
        combo.concepts.iter().map(|id| bank.get(id)).collect::<Result<Vec<_>>>()?;
    let bg_owned;
    let bg_entry = match &combo.bg {
        Some(id) => bank.get(id)?,
        None => {
            bg_owned = crate::bank::identity_entry(
                base,
                "background",
                crate::vocab::modifier_token(crate::vocab::MODIFIER_SLOTS - 1),
            );
            &bg_owned
        }
    };

    let mut rows = Vec::with_capacity(settings.modes.len());
    for mode in &settings.modes {
        let mut cfg = settings.fusion.clone();
        match mode {
            AblationMode::Full | AblationMode::MaskOnly | AblationMode::EpsMix => {}
            AblationMode::NoInjection => {
                cfg.tau_self = 1.0;
                cfg.tau_res = 1.0;
            }
            AblationMode::NoSuppression => cfg.lambda_suppress = 0.0,
        }
        let run = FusionRun::new(
            base, &entries, bg_entry, &plan, &masks, &cache, cfg, schedule,
        )?;
        let image = match mode {
            AblationMode::MaskOnly => {
                run.sample_eps_mix(false, Some(split(seed, "mask-only", prompt_index as u64)))?
            }
            AblationMode::EpsMix => run.sample_eps_mix(true, None)?,
            _ => run.sample()?,
        };
        let report = image_alignment(&image, probe, registry, &combo.concepts, combo.bg.as_deref())?;
        let text = text_alignment(&image, &prompt, probe, registry);
        let correct = regions_correct(&image, probe, registry, &combo.concepts)?;
        rows.push(MetricsRow {
            run_id: format!("{run_tag}-{}", mode.tag()),
            combination: combo.name.clone(),
            prompt_index,
            seed,
            mode: mode.tag().to_string(),
            accepted: true,
            reject_reason: None,
            text_align: Some(text),
            image_align: report.image_align,
            per_concept: report.per_concept,
            missing: report.missing,
            all_regions_correct: Some(correct),
        });
    }
    let _ = bundle.attempts;
    Ok(rows)
}

/// Run the benchmark over every (combination, prompt, seed, mode). Rows are
/// deterministic in the seeds and independent of the worker count.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    base: &UNetParams,
    bank: &ConceptBank,
    probe: &ConceptProbe,
    registry: &ConceptRegistry,
    schedule: &NoiseSchedule,
    extraction: &ExtractionSpec,
    combinations: &[BenchCombination],
    settings: &BenchSettings,
    root_seed: u64,
) -> Result<BenchReport> {
    for combo in combinations {
        for id in combo.concepts.iter().chain(combo.bg.iter()) {
            bank.get(id)?;
        }
        if combo.prompts.is_empty() {
            return Err(CoreError::Validation(format!(
                "combination {:?} has no prompts",
                combo.name
            )));
        }
    }
    let mut tasks = Vec::new();
    for (ci, combo) in combinations.iter().enumerate() {
        for pi in 0..combo.prompts.len() {
            for si in 0..settings.n_seeds {
                let seed =
                    split(root_seed, "bench", ((ci * 1000 + pi) * 10000 + si) as u64);
                tasks.push((ci, pi, seed));
            }
        }
    }

    let run_task = |&(ci, pi, seed): &(usize, usize, u64)| -> Result<Vec<MetricsRow>> {
        run_one(
            base,
            bank,
            probe,
            registry,
            schedule,
            extraction,
            &combinations[ci],
            pi,
            seed,
            settings,
        )
    };

    let results: Vec<Result<Vec<MetricsRow>>> = if settings.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.jobs)
            .build()
            .map_err(|e| CoreError::Validation(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            tasks.par_iter().map(run_task).collect()
        })
    } else {
        tasks.iter().map(run_task).collect()
    };

    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let filtered_templates = rows.iter().filter(|r| !r.accepted).count() / settings.modes.len().max(1);

    let mut summaries = Vec::new();
    for mode in &settings.modes {
        let mode_rows: Vec<&MetricsRow> =
            rows.iter().filter(|r| r.mode == mode.tag()).collect();
        let accepted: Vec<&&MetricsRow> = mode_rows.iter().filter(|r| r.accepted).collect();
        let image_scores: Vec<f64> = accepted.iter().filter_map(|r| r.image_align).collect();
        let text_scores: Vec<f64> = accepted.iter().filter_map(|r| r.text_align).collect();
        let correct: Vec<bool> =
            accepted.iter().filter_map(|r| r.all_regions_correct).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        summaries.push(ModeSummary {
            mode: mode.tag().to_string(),
            n_rows: mode_rows.len(),
            n_accepted: accepted.len(),
            n_scored: image_scores.len(),
            n_missing: accepted.iter().filter(|r| !r.missing.is_empty()).count(),
            mean_image_align: mean(&image_scores),
            mean_text_align: mean(&text_scores),
            regions_correct_rate: if correct.is_empty() {
                None
            } else {
                Some(correct.iter().filter(|&&b| b).count() as f64 / correct.len() as f64)
            },
        });
    }
    Ok(BenchReport { rows, summaries, filtered_templates })
}

/// The standard three-concept benchmark combination over the toy registry.
pub fn standard_combinations(registry: &ConceptRegistry) -> Vec<BenchCombination> {
    use crate::vocab::{bg_token, filler_token, shape_token};
    let a = filler_token("a");
    let and = filler_token("and");
    let on = filler_token("on");
    let _ = registry;
    vec![BenchCombination {
        name: "rings-checker-diag".into(),
        concepts: vec!["ring-circle".into(), "checker-square".into()],
        bg: Some("diag-stripes".into()),
        prompts: vec![
            vec![a, shape_token(0), and, a, shape_token(1), on, bg_token(1)],
            vec![a, shape_token(1), and, a, shape_token(0), on, bg_token(1)],
        ],
    }]
}
