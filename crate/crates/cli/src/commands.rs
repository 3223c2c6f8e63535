//! Command implementations. Every command writes its artifact plus a
//! manifest carrying the hashes of all inputs, and publishes files with
//! atomic renames so partially written artifacts are never observed.

use anyhow::anyhow;
use conceptfuse::bank::{self, ConceptBank, FinetuneSpec};
use conceptfuse::bench::{run_benchmark, standard_combinations, AblationMode, BenchSettings};
use conceptfuse::config::{load_config, RunConfig};
use conceptfuse::container::{file_hash, load_checkpoint, save_checkpoint};
use conceptfuse::dataset::DatasetKind;
use conceptfuse::error::CoreError;
use conceptfuse::fusion::{fuse_sample, generate_template, FuseInputs, FuseResult};
use conceptfuse::invert::{image_hash, invert_and_cache, prompt_hash, save_cache};
use conceptfuse::manifest::{load_image_png, save_image_png, RunManifest};
use conceptfuse::masks::{filter_template, save_mask_set, segment_concepts, Verdict};
use conceptfuse::metrics::text_alignment;
use conceptfuse::optim::{AdamConfig, AdamState};
use conceptfuse::probe::{load_probe, save_probe, train_probe, ConceptProbe};
use conceptfuse::rng::{split, split_rng};
use conceptfuse::scene::{ConceptRegistry, ConceptTarget, SceneDomain, ShapeClass};
use conceptfuse::schedule::NoiseSchedule;
use conceptfuse::train::train_step;
use conceptfuse::unet::UNetParams;
use conceptfuse::vocab::{tokenize, PromptTokens};
use std::path::{Path, PathBuf};

pub struct Ctx {
    pub cfg: RunConfig,
    pub registry: ConceptRegistry,
    pub domain: SceneDomain,
    pub schedule: NoiseSchedule,
    pub jobs: usize,
}

impl Ctx {
    pub fn load(config: Option<&Path>, out: Option<&Path>, jobs: usize) -> anyhow::Result<Self> {
        let mut cfg = match config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = out {
            // keep derived paths under the overridden root
            let root = out.to_path_buf();
            cfg.paths.base_checkpoint = root.join("base.ckpt");
            cfg.paths.bank_dir = root.join("bank");
            cfg.paths.probe_file = root.join("probe.cftc");
            cfg.paths.cache_dir = root.join("caches");
            cfg.paths.out_dir = root;
        }
        let registry = cfg.registry();
        registry.validate()?;
        let domain = SceneDomain::new(registry.clone());
        let schedule = NoiseSchedule::new(cfg.schedule.clone())?;
        Ok(Ctx { cfg, registry, domain, schedule, jobs })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.paths.out_dir.join(rel)
    }

    fn load_base(&self) -> anyhow::Result<UNetParams> {
        let path = &self.cfg.paths.base_checkpoint;
        let (params, sched) = load_checkpoint(path).map_err(|e| match e {
            CoreError::Io { .. } => anyhow!(CoreError::MissingArtifact(format!(
                "base checkpoint {} not found (run train-base first)",
                path.display()
            ))),
            other => anyhow!(other),
        })?;
        if sched != self.cfg.schedule {
            return Err(anyhow!(CoreError::Incompatible(
                "configured schedule differs from the checkpoint's".into()
            )));
        }
        Ok(params)
    }

    fn load_bank(&self, base: &UNetParams) -> anyhow::Result<ConceptBank> {
        let bank = bank::load_bank(&self.cfg.paths.bank_dir)?;
        if bank.base_hash != base.content_hash() {
            return Err(anyhow!(CoreError::Incompatible(
                "bank was trained against a different base checkpoint".into()
            )));
        }
        Ok(bank)
    }

    fn negative_prompt(&self) -> anyhow::Result<PromptTokens> {
        Ok(tokenize(&self.cfg.fuse.negative_prompt)?)
    }

    fn manifest(&self, command: &str, seed: u64) -> RunManifest {
        RunManifest::new(command, seed, self.cfg.to_canonical_toml())
    }
}

/// Pretrain the base denoiser. The learning rate steps down to `lr_final`
/// for the last 30% of training.
pub fn train_base(ctx: &Ctx, seed: u64) -> anyhow::Result<()> {
    let tb = &ctx.cfg.train_base;
    let scenes = ctx
        .domain
        .make_dataset(DatasetKind::Base, None, tb.n_scenes, tb.dataset_seed)?;
    println!(
        "train-base: {} scenes, {} steps, batch {}, lr {} -> {}",
        scenes.len(),
        tb.steps,
        tb.batch,
        tb.lr,
        tb.lr_final
    );
    let mut params = UNetParams::new(ctx.cfg.unet.clone(), tb.init_seed)?;
    let mut opt = AdamState::new();
    let t_start = std::time::Instant::now();
    for step in 0..tb.steps {
        let lr = if step * 10 >= tb.steps * 7 { tb.lr_final } else { tb.lr };
        let adam = AdamConfig { lr, ..Default::default() };
        let mut rng = split_rng(seed, "base-batch", step as u64);
        let batch: Vec<_> = (0..tb.batch)
            .map(|_| {
                let s = &scenes[conceptfuse::rng::rand_index(&mut rng, scenes.len())];
                (s.image.clone(), s.prompt.clone())
            })
            .collect();
        let loss = train_step(
            &mut params,
            &batch,
            &ctx.schedule,
            &mut opt,
            &adam,
            &|_| true,
            split(seed, "base-step", step as u64),
        )?;
        if step % 500 == 0 || step + 1 == tb.steps {
            println!(
                "  step {step:>6}  loss {loss:.5}  ({:.1}s)",
                t_start.elapsed().as_secs_f64()
            );
        }
    }
    let path = &ctx.cfg.paths.base_checkpoint;
    save_checkpoint(path, &params, &ctx.cfg.schedule)?;
    let mut m = ctx.manifest("train-base", seed);
    m.input("dataset_seed", tb.dataset_seed.to_string());
    m.output_file("checkpoint", path)?;
    m.save(&path.with_extension("manifest.json"))?;
    println!("train-base: wrote {}", path.display());
    Ok(())
}

/// Fine-tune one concept or every concept in the registry. Jobs > 1 trains
/// concepts in parallel; each entry file is written atomically.
pub fn train_concept(ctx: &Ctx, id: Option<&str>, seed: u64) -> anyhow::Result<()> {
    let base = ctx.load_base()?;
    let ids: Vec<String> = match id {
        Some(one) => vec![ctx.registry.require(one)?.id.clone()],
        None => ctx.registry.concepts.iter().map(|c| c.id.clone()).collect(),
    };
    let tc = &ctx.cfg.train_concept;
    let train_one = |cid: &String| -> anyhow::Result<bank::ConceptBankEntry> {
        let def = ctx.registry.require(cid)?;
        let data = ctx.domain.make_dataset(
            DatasetKind::Concept,
            Some(cid),
            tc.images,
            split(tc.dataset_seed, "concept-data", def.modifier_slot as u64),
        )?;
        let spec = FinetuneSpec {
            mode: tc.mode,
            steps: tc.steps,
            lr: tc.lr,
            rank: tc.rank,
            batch: tc.batch,
            freeze_embedding: tc.freeze_embedding,
            seed: split(seed, "finetune", def.modifier_slot as u64),
            ..FinetuneSpec::new(cid, def.modifier(), def.class_word())
        };
        println!("train-concept: {cid} ({:?}, {} steps)", tc.mode, tc.steps);
        Ok(bank::finetune(&base, &data, &ctx.domain, &ctx.schedule, &spec)?)
    };
    let entries: Vec<anyhow::Result<bank::ConceptBankEntry>> = if ctx.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(ctx.jobs).build()?;
        pool.install(|| {
            use rayon::prelude::*;
            ids.par_iter().map(train_one).collect()
        })
    } else {
        ids.iter().map(train_one).collect()
    };

    // merge into the existing bank when one is present
    let mut bank_obj = bank::load_bank(&ctx.cfg.paths.bank_dir)
        .unwrap_or_else(|_| ConceptBank::new(base.content_hash()));
    if bank_obj.base_hash != base.content_hash() {
        bank_obj = ConceptBank::new(base.content_hash());
    }
    for entry in entries {
        bank_obj.insert(entry?)?;
    }
    bank::save_bank(&ctx.cfg.paths.bank_dir, &bank_obj)?;
    let mut m = ctx.manifest("train-concept", seed);
    m.input_file("base_checkpoint", &ctx.cfg.paths.base_checkpoint)?;
    for cid in &ids {
        m.output_file(cid, &ctx.cfg.paths.bank_dir.join(format!("{cid}.entry")))?;
    }
    m.save(&ctx.cfg.paths.bank_dir.join("train.manifest.json"))?;
    println!("train-concept: bank at {}", ctx.cfg.paths.bank_dir.display());
    Ok(())
}

fn concept_words(ctx: &Ctx) -> anyhow::Result<Vec<ShapeClass>> {
    ctx.cfg
        .fuse
        .concepts
        .iter()
        .map(|id| match &ctx.registry.require(id)?.target {
            ConceptTarget::Object { shape, .. } => Ok(*shape),
            ConceptTarget::Background { .. } => Err(anyhow!(CoreError::Validation(format!(
                "fuse.concepts entry {id:?} is a background style (use fuse.bg)"
            )))),
        })
        .collect()
}

/// Template generation with the filtering retry loop.
fn filtered_template(
    ctx: &Ctx,
    base: &UNetParams,
    probe: Option<&ConceptProbe>,
    prompt: &PromptTokens,
    seed: u64,
) -> anyhow::Result<(conceptfuse::ndarray::Array3<f64>, usize, Vec<String>)> {
    let words = concept_words(ctx)?;
    let neg = ctx.negative_prompt()?;
    let mc: Vec<u16> =
        prompt.tokens().iter().copied().filter(|&t| conceptfuse::vocab::is_shape_word(t)).collect();
    let mc_prompt = PromptTokens::new(mc)?;
    let mut reasons = Vec::new();
    for attempt in 0..ctx.cfg.filter.max_template_retries {
        let tseed = split(seed, "template", attempt as u64);
        let template = generate_template(
            base,
            prompt,
            Some(&mc_prompt),
            &neg,
            &ctx.schedule,
            ctx.cfg.fusion.omega,
            ctx.cfg.fusion.lambda_mc,
            tseed,
        )?;
        let seg = segment_concepts(&template, &words, None)?;
        let score = probe.map(|p| text_alignment(&template, prompt, p, &ctx.registry));
        let verdict = filter_template(
            &seg,
            score,
            ctx.cfg.filter.overlap_threshold,
            ctx.cfg.filter.probe_threshold,
        );
        match verdict {
            Verdict::Accept => return Ok((template, attempt, reasons)),
            Verdict::Reject(reason) => {
                let line = format!(
                    "attempt {attempt} (seed {tseed}): {}",
                    serde_json::to_string(&reason).unwrap_or_else(|_| format!("{reason:?}"))
                );
                println!("  filtered: {line}");
                reasons.push(line);
            }
        }
    }
    Err(anyhow!(CoreError::FilterExhausted(format!(
        "no template passed the filter after {} attempts: [{}]",
        ctx.cfg.filter.max_template_retries,
        reasons.join(" | ")
    ))))
}

fn try_load_probe(ctx: &Ctx) -> Option<ConceptProbe> {
    load_probe(&ctx.cfg.paths.probe_file).ok()
}

pub fn gen_template(ctx: &Ctx, seed: u64) -> anyhow::Result<()> {
    let base = ctx.load_base()?;
    let prompt = tokenize(&ctx.cfg.fuse.prompt)?;
    let probe = try_load_probe(ctx);
    let (template, attempt, reasons) =
        filtered_template(ctx, &base, probe.as_ref(), &prompt, seed)?;
    let path = ctx.out(&format!("templates/template-{seed}.png"));
    save_image_png(&path, &template)?;
    let mut m = ctx.manifest("gen-template", seed);
    m.input_file("base_checkpoint", &ctx.cfg.paths.base_checkpoint)?;
    m.input("prompt", prompt_hash(&prompt));
    m.input("accepted_attempt", attempt.to_string());
    m.input("rejections", reasons.len().to_string());
    m.output_file("template", &path)?;
    m.save(&path.with_extension("manifest.json"))?;
    println!("gen-template: wrote {}", path.display());
    Ok(())
}

fn default_template_path(ctx: &Ctx, seed: u64) -> PathBuf {
    ctx.out(&format!("templates/template-{seed}.png"))
}

pub fn invert(ctx: &Ctx, template: Option<&Path>, seed: u64) -> anyhow::Result<()> {
    let base = ctx.load_base()?;
    let tpl_path = template.map(Path::to_path_buf).unwrap_or_else(|| default_template_path(ctx, seed));
    let template = load_image_png(&tpl_path).map_err(|_| {
        anyhow!(CoreError::MissingArtifact(format!(
            "template {} not found (run gen-template first)",
            tpl_path.display()
        )))
    })?;
    let prompt = tokenize(&ctx.cfg.fuse.prompt)?;
    let cache =
        invert_and_cache(&template, &prompt, &base, &ctx.schedule, &ctx.cfg.extraction_spec())?;
    let name = format!(
        "{}-{}-{}.cache",
        &cache.template_hash[..12],
        &prompt_hash(&prompt)[..8],
        &cache.params_hash[..8]
    );
    let path = ctx.cfg.paths.cache_dir.join(name);
    save_cache(&path, &cache)?;
    let mut m = ctx.manifest("invert", seed);
    m.input_file("base_checkpoint", &ctx.cfg.paths.base_checkpoint)?;
    m.input_file("template", &tpl_path)?;
    m.output_file("cache", &path)?;
    m.save(&path.with_extension("manifest.json"))?;
    println!("invert: wrote {}", path.display());
    Ok(())
}

pub fn mask(ctx: &Ctx, template: Option<&Path>, seed: u64) -> anyhow::Result<()> {
    let tpl_path = template.map(Path::to_path_buf).unwrap_or_else(|| default_template_path(ctx, seed));
    let template = load_image_png(&tpl_path)?;
    let words = concept_words(ctx)?;
    // the renderer's sidecar, when present, provides oracle masks
    let sidecar = tpl_path.with_extension("json");
    let gt = sidecar
        .exists()
        .then(|| {
            let stem = tpl_path.file_stem().unwrap().to_string_lossy().to_string();
            conceptfuse::dataset::load_scene(tpl_path.parent().unwrap(), &stem).ok()
        })
        .flatten();
    let seg = segment_concepts(&template, &words, gt.as_ref())?;
    let probe = try_load_probe(ctx);
    let prompt = tokenize(&ctx.cfg.fuse.prompt)?;
    let score = probe.map(|p| text_alignment(&template, &prompt, &p, &ctx.registry));
    let verdict = filter_template(
        &seg,
        score,
        ctx.cfg.filter.overlap_threshold,
        ctx.cfg.filter.probe_threshold,
    );
    let verdict_path = ctx.out(&format!("masks/verdict-{seed}.json"));
    if let Some(parent) = verdict_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&verdict_path, serde_json::to_string_pretty(&verdict)?)?;
    if let Verdict::Reject(reason) = &verdict {
        return Err(anyhow!(CoreError::FilterExhausted(format!(
            "template rejected: {reason:?} (verdict at {})",
            verdict_path.display()
        ))));
    }
    let dense: Vec<_> = seg.iter().filter_map(|r| r.mask().cloned()).collect();
    let resolutions = vec![
        ctx.cfg.unet.img_size,
        ctx.cfg.unet.img_size / 2,
        ctx.cfg.unet.img_size / 4,
    ];
    let set = conceptfuse::masks::build_mask_set(
        &dense,
        conceptfuse::masks::default_kernel(ctx.cfg.unet.img_size),
        &resolutions,
        ctx.cfg.fuse.rectangular_masks,
    )?;
    let path = ctx.out(&format!("masks/masks-{seed}.json"));
    save_mask_set(&path, &set)?;
    let mut m = ctx.manifest("mask", seed);
    m.input_file("template", &tpl_path)?;
    m.output_file("masks", &path)?;
    m.output_file("verdict", &verdict_path)?;
    m.save(&path.with_extension("manifest.json"))?;
    println!("mask: wrote {}", path.display());
    Ok(())
}

pub fn fuse(ctx: &Ctx, seed: u64) -> anyhow::Result<()> {
    let base = ctx.load_base()?;
    let bank_obj = ctx.load_bank(&base)?;
    let probe = try_load_probe(ctx);
    let prompt = tokenize(&ctx.cfg.fuse.prompt)?;
    let neg = ctx.negative_prompt()?;
    let extraction = ctx.cfg.extraction_spec();

    let mut reasons = Vec::new();
    for attempt in 0..ctx.cfg.filter.max_template_retries {
        let tseed = split(seed, "fuse-template", attempt as u64);
        let mc: Vec<u16> = prompt
            .tokens()
            .iter()
            .copied()
            .filter(|&t| conceptfuse::vocab::is_shape_word(t))
            .collect();
        let template = generate_template(
            &base,
            &prompt,
            Some(&PromptTokens::new(mc)?),
            &neg,
            &ctx.schedule,
            ctx.cfg.fusion.omega,
            ctx.cfg.fusion.lambda_mc,
            tseed,
        )?;
        let probe_score =
            probe.as_ref().map(|p| text_alignment(&template, &prompt, p, &ctx.registry));
        let inputs = FuseInputs {
            base: &base,
            bank: &bank_obj,
            registry: &ctx.registry,
            schedule: &ctx.schedule,
            extraction: &extraction,
            concept_ids: ctx.cfg.fuse.concepts.clone(),
            bg_id: ctx.cfg.fuse.bg.clone(),
            base_prompt: prompt.clone(),
            negative_words: neg.tokens().to_vec(),
            cfg: ctx.cfg.fusion.clone(),
            gt: None,
            probe_score,
            overlap_threshold: ctx.cfg.filter.overlap_threshold,
            probe_threshold: ctx.cfg.filter.probe_threshold,
            rectangular_masks: ctx.cfg.fuse.rectangular_masks,
        };
        match fuse_sample(&template, &inputs)? {
            FuseResult::Done(out) => {
                let img_path = ctx.out(&format!("fused/fused-{seed}.png"));
                save_image_png(&img_path, &out.image)?;
                let tpl_path = ctx.out(&format!("fused/template-{seed}.png"));
                save_image_png(&tpl_path, &template)?;
                let masks_path = ctx.out(&format!("fused/masks-{seed}.json"));
                save_mask_set(&masks_path, &out.masks)?;
                let mut m = ctx.manifest("fuse", seed);
                m.input_file("base_checkpoint", &ctx.cfg.paths.base_checkpoint)?;
                for cid in ctx.cfg.fuse.concepts.iter().chain(ctx.cfg.fuse.bg.iter()) {
                    m.input_file(
                        &format!("bank:{cid}"),
                        &ctx.cfg.paths.bank_dir.join(format!("{cid}.entry")),
                    )?;
                }
                m.input("template", out.template_hash.clone());
                m.input("template_attempt", attempt.to_string());
                m.input("base_prompt", prompt_hash(&prompt));
                m.output_file("fused", &img_path)?;
                m.output_file("template", &tpl_path)?;
                m.output_file("masks", &masks_path)?;
                m.save(&img_path.with_extension("manifest.json"))?;
                println!(
                    "fuse: wrote {} (template attempt {attempt}, hash {})",
                    img_path.display(),
                    image_hash(&out.image)
                );
                return Ok(());
            }
            FuseResult::Rejected(reason) => {
                let line = format!(
                    "attempt {attempt} (seed {tseed}): {}",
                    serde_json::to_string(&reason).unwrap_or_else(|_| format!("{reason:?}"))
                );
                println!("  filtered: {line}");
                reasons.push(line);
            }
        }
    }
    Err(anyhow!(CoreError::FilterExhausted(format!(
        "no template passed the filter after {} attempts: [{}]",
        ctx.cfg.filter.max_template_retries,
        reasons.join(" | ")
    ))))
}

/// Eval (full configuration only) or the full ablation sweep.
pub fn eval(ctx: &mut Ctx, seed: u64, ablate: bool) -> anyhow::Result<()> {
    let base = ctx.load_base()?;
    let bank_obj = ctx.load_bank(&base)?;
    let probe = match try_load_probe(ctx) {
        Some(p) => p,
        None => {
            println!("eval: training probe ({} steps)...", ctx.cfg.probe.steps);
            let p = train_probe(&ctx.domain, &ctx.cfg.probe, split(seed, "probe", 0))?;
            save_probe(&ctx.cfg.paths.probe_file, &p)?;
            println!(
                "eval: probe held-out accuracy {:.4} -> {}",
                p.holdout_accuracy,
                ctx.cfg.paths.probe_file.display()
            );
            p
        }
    };

    // skip combinations referencing concepts that are not in the bank
    let mut combos = Vec::new();
    for combo in standard_combinations(&ctx.registry) {
        let missing: Vec<&String> = combo
            .concepts
            .iter()
            .chain(combo.bg.iter())
            .filter(|id| bank_obj.entries.get(id.as_str()).is_none())
            .collect();
        if missing.is_empty() {
            combos.push(combo);
        } else {
            println!("eval: skipping combination {:?}, missing {missing:?}", combo.name);
        }
    }
    if combos.is_empty() {
        return Err(anyhow!(CoreError::MissingArtifact(
            "no benchmark combination has a fully trained bank (run train-concept)".into()
        )));
    }

    let settings = BenchSettings {
        n_seeds: ctx.cfg.eval.n_seeds,
        modes: if ablate {
            AblationMode::ALL.to_vec()
        } else {
            vec![AblationMode::Full]
        },
        max_template_retries: ctx.cfg.filter.max_template_retries,
        fusion: ctx.cfg.fusion.clone(),
        overlap_threshold: ctx.cfg.filter.overlap_threshold,
        probe_threshold: ctx.cfg.filter.probe_threshold,
        negative_words: ctx.negative_prompt()?.tokens().to_vec(),
        jobs: ctx.jobs,
    };
    let report = run_benchmark(
        &base,
        &bank_obj,
        &probe,
        &ctx.registry,
        &ctx.schedule,
        &ctx.cfg.extraction_spec(),
        &combos,
        &settings,
        seed,
    )?;

    let dir = if ablate { "ablate" } else { "eval" };
    let tsv_path = ctx.out(&format!("{dir}/metrics.tsv"));
    if let Some(parent) = tsv_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&tsv_path, report.to_tsv())?;
    let summary_path = ctx.out(&format!("{dir}/summary.json"));
    let mut summary = serde_json::json!({
        "summaries": report.summaries,
        "filtered_templates": report.filtered_templates,
    });
    if ablate {
        let full = report.image_scores(AblationMode::Full);
        let mut orderings = Vec::new();
        for other in [AblationMode::EpsMix, AblationMode::MaskOnly, AblationMode::NoInjection, AblationMode::NoSuppression] {
            let scores = report.image_scores(other);
            if full.is_empty() || scores.is_empty() {
                continue;
            }
            let (diff, half) = conceptfuse::bench::bootstrap_diff_90(
                &full,
                &scores,
                ctx.cfg.eval.bootstrap_rounds,
                split(seed, "bootstrap", other.tag().len() as u64),
            );
            orderings.push(serde_json::json!({
                "full_minus": other.tag(),
                "mean_diff": diff,
                "ci90_half_width": half,
                "significant": diff > half,
            }));
        }
        summary["orderings"] = serde_json::Value::Array(orderings);
    }
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;

    for s in &report.summaries {
        println!(
            "{dir}: mode {:<14} rows {:>3} accepted {:>3} scored {:>3} image_align {} text_align {}",
            s.mode,
            s.n_rows,
            s.n_accepted,
            s.n_scored,
            s.mean_image_align.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            s.mean_text_align.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        );
    }
    let mut m = ctx.manifest(if ablate { "ablate" } else { "eval" }, seed);
    m.input_file("base_checkpoint", &ctx.cfg.paths.base_checkpoint)?;
    m.input("probe", file_hash(&ctx.cfg.paths.probe_file)?);
    m.output_file("metrics", &tsv_path)?;
    m.output_file("summary", &summary_path)?;
    m.save(&tsv_path.with_extension("manifest.json"))?;
    println!("{dir}: wrote {}", tsv_path.display());
    Ok(())
}
