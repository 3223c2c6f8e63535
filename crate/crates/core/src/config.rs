//! Run configuration: one structured TOML file with defaults for every
//! field, strict unknown-key rejection, range validation, and a canonical
//! serialization so effective configs round-trip byte-for-byte.

use crate::bank::FinetuneMode;
use crate::error::{CoreError, Result};
use crate::fusion::FusionConfig;
use crate::invert::ExtractionSpec;
use crate::probe::ProbeTrainConfig;
use crate::scene::{ConceptDef, ConceptRegistry};
use crate::schedule::ScheduleConfig;
use crate::unet::{TapKind, UNetConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub base_checkpoint: PathBuf,
    pub bank_dir: PathBuf,
    pub probe_file: PathBuf,
    pub cache_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: "runs".into(),
            base_checkpoint: "runs/base.ckpt".into(),
            bank_dir: "runs/bank".into(),
            probe_file: "runs/probe.cftc".into(),
            cache_dir: "runs/caches".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBaseConfig {
    pub n_scenes: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate after the decay point (70% of steps).
    pub lr_final: f64,
    pub dataset_seed: u64,
    pub init_seed: u64,
}

impl Default for TrainBaseConfig {
    fn default() -> Self {
        TrainBaseConfig {
            n_scenes: 3072,
            steps: 9000,
            batch: 4,
            lr: 2e-3,
            lr_final: 4e-4,
            dataset_seed: 101,
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConceptConfig {
    pub steps: usize,
    pub lr: f64,
    pub rank: usize,
    pub batch: usize,
    pub images: usize,
    pub mode: FinetuneMode,
    pub freeze_embedding: bool,
    pub dataset_seed: u64,
}

impl Default for TrainConceptConfig {
    fn default() -> Self {
        TrainConceptConfig {
            steps: 500,
            lr: 1e-5,
            rank: 4,
            batch: 4,
            images: 5,
            mode: FinetuneMode::FullKv,
            freeze_embedding: false,
            dataset_seed: 202,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub overlap_threshold: f64,
    pub probe_threshold: f64,
    pub max_template_retries: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { overlap_threshold: 0.9, probe_threshold: 0.3, max_template_retries: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseCommandConfig {
    pub concepts: Vec<String>,
    pub bg: Option<String>,
    /// Whitespace-separated prompt over the toy vocabulary.
    pub prompt: String,
    pub negative_prompt: String,
    pub rectangular_masks: bool,
}

impl Default for FuseCommandConfig {
    fn default() -> Self {
        FuseCommandConfig {
            concepts: vec!["ring-circle".into(), "checker-square".into()],
            bg: Some("diag-stripes".into()),
            prompt: "a circle and a square on stripes".into(),
            negative_prompt: "blurry deformed".into(),
            rectangular_masks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_seeds: usize,
    pub bootstrap_rounds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_seeds: 10, bootstrap_rounds: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub layers: Vec<(String, TapKind)>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { layers: ExtractionSpec::default().layers }
    }
}

/// The whole run configuration. Every field has a default, so an empty file
/// is a valid config; unknown keys are rejected with their TOML location.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    /// Concept style definitions; empty list means the standard registry.
    pub concepts: Vec<ConceptDef>,
    pub train_base: TrainBaseConfig,
    pub train_concept: TrainConceptConfig,
    pub fusion: FusionConfig,
    pub extraction: ExtractionConfig,
    pub filter: FilterConfig,
    pub probe: ProbeTrainConfig,
    pub fuse: FuseCommandConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn registry(&self) -> ConceptRegistry {
        if self.concepts.is_empty() {
            ConceptRegistry::standard()
        } else {
            ConceptRegistry { concepts: self.concepts.clone() }
        }
    }

    pub fn extraction_spec(&self) -> ExtractionSpec {
        ExtractionSpec { layers: self.extraction.layers.clone() }
    }

    /// Collect every range violation rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if let Err(e) = self.fusion.validate() {
            errors.push(e.to_string());
        }
        if let Err(e) = self.unet.validate() {
            errors.push(e.to_string());
        }
        if self.schedule.t_train == 0 {
            errors.push("schedule.t_train must be positive".into());
        }
        if !(0.0 < self.schedule.beta_start
            && self.schedule.beta_start < self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            errors.push("schedule betas must satisfy 0 < start < end < 1".into());
        }
        if self.schedule.ddim_steps == 0 || self.schedule.ddim_steps > self.schedule.t_train {
            errors.push("schedule.ddim_steps must be in [1, t_train]".into());
        }
        if !(0.0..=1.0).contains(&self.filter.overlap_threshold) {
            errors.push("filter.overlap_threshold must lie in [0, 1]".into());
        }
        if self.filter.max_template_retries == 0 {
            errors.push("filter.max_template_retries must be >= 1".into());
        }
        if self.train_concept.rank == 0 {
            errors.push("train_concept.rank must be >= 1".into());
        }
        if self.train_base.batch == 0 || self.train_concept.batch == 0 {
            errors.push("batch sizes must be >= 1".into());
        }
        if let Err(e) = self.registry().validate() {
            errors.push(e.to_string());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Config(errors.join("; ")))
        }
    }

    /// Canonical serialization (field order fixed by the struct).
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a TOML config with defaults filled, reporting syntax and
/// unknown-key errors with their positions, then validate ranges.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.fusion.lambda_suppress, 0.3);
        assert_eq!(cfg.fusion.omega, 7.5);
        assert_eq!(cfg.schedule.ddim_steps, 50);
        assert_eq!(cfg.train_concept.steps, 500);
        assert_eq!(cfg.train_concept.lr, 1e-5);
        assert_eq!(cfg.train_concept.rank, 4);
    }

    #[test]
    fn range_violation_reported() {
        let err = parse_config("[fusion]\nlambda_suppress = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("lambda_suppress"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_with_position() {
        let err = parse_config("[fusion]\nnot_a_key = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("not_a_key") || msg.contains("unknown field"), "{msg}");
    }

    #[test]
    fn syntax_error_has_location() {
        let err = parse_config("[fusion\nomega = 1").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn multiple_violations_all_listed() {
        let err = parse_config(
            "[fusion]\nlambda_suppress = -1.0\n[schedule]\nddim_steps = 0\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lambda_suppress") && msg.contains("ddim_steps"), "{msg}");
    }

    /// parse . serialize . parse == parse over randomized valid configs.
    #[test]
    fn canonical_roundtrip_on_fuzzed_configs() {
        let mut rng = crate::rng::seed_rng(99);
        for _ in 0..100 {
            let mut cfg = RunConfig::default();
            cfg.fusion.lambda_suppress = rng.gen_range(0.0..2.0);
            cfg.fusion.omega = rng.gen_range(0.0..12.0);
            cfg.fusion.tau_self = rng.gen_range(0.0..1.0);
            cfg.fusion.tau_res = rng.gen_range(0.0..1.0);
            cfg.fusion.steps = rng.gen_range(1..100);
            cfg.schedule.ddim_steps = rng.gen_range(1..100);
            cfg.schedule.t_train = rng.gen_range(cfg.schedule.ddim_steps..2000);
            cfg.train_base.steps = rng.gen_range(1..100000);
            cfg.train_concept.lr = rng.gen_range(1e-7..1e-2);
            cfg.eval.n_seeds = rng.gen_range(0..100);
            let text = cfg.to_canonical_toml();
            let parsed = parse_config(&text).unwrap();
            assert_eq!(parsed, cfg);
            // canonical: serialize(parse(x)) == serialize(parse(serialize(parse(x))))
            assert_eq!(parsed.to_canonical_toml(), text);
        }
    }
}
