//! Concept bank: per-concept fine-tuning of cross-attention weights (full
//! K/V replacement or rank-limited LoRA deltas on Q/K/V) plus the modifier
//! token embedding row. Everything else in the base model is frozen.

use crate::error::{CoreError, Result};
use crate::optim::{AdamConfig, AdamState, ParamVisit};
use crate::rng::{split, split_rng};
use crate::scene::{LabeledScene, SceneDomain};
use crate::schedule::NoiseSchedule;
use crate::unet::{ForwardHooks, UNetParams};
use crate::vocab::is_modifier;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    FullKv,
    Lora,
}

/// Low-rank factor pair: delta = a . b with a (d_in, r), b (r, d_out).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraPair {
    fn init(rng: &mut impl Rng, d_in: usize, d_out: usize, rank: usize) -> Self {
        // a gets small noise, b starts at zero, so the initial delta is zero
        let a = Array2::from_shape_simple_fn((d_in, rank), || {
            let v: f64 = rng.sample(StandardNormal);
            v * 0.02
        });
        LoraPair { a, b: Array2::zeros((rank, d_out)) }
    }

    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }
}

/// Per-layer LoRA deltas in Q, K, V order.
pub type LoraLayer = [LoraPair; 3];

#[derive(Debug, Clone, PartialEq)]
pub enum EntryDeltas {
    /// Replacement W^k / W^v per cross-attention layer.
    FullKv(BTreeMap<String, (Array2<f64>, Array2<f64>)>),
    /// Low-rank additive deltas on W^q / W^k / W^v per layer.
    Lora { rank: usize, layers: BTreeMap<String, LoraLayer> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBankEntry {
    pub concept_id: String,
    pub modifier_token: u16,
    pub mode: FinetuneMode,
    pub deltas: EntryDeltas,
    /// Additive delta on the modifier token's embedding row.
    pub embedding_delta: Option<Array1<f64>>,
    pub base_hash: String,
    pub training_meta: TrainingMeta,
}

#[derive(Debug, Clone, Default)]
pub struct ConceptBank {
    pub base_hash: String,
    pub entries: BTreeMap<String, ConceptBankEntry>,
}

impl ConceptBank {
    pub fn new(base_hash: String) -> Self {
        ConceptBank { base_hash, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, entry: ConceptBankEntry) -> Result<()> {
        if entry.base_hash != self.base_hash {
            return Err(CoreError::Incompatible(format!(
                "entry {:?} was trained against a different base checkpoint",
                entry.concept_id
            )));
        }
        if self
            .entries
            .values()
            .any(|e| e.modifier_token == entry.modifier_token && e.concept_id != entry.concept_id)
        {
            return Err(CoreError::Validation(format!(
                "modifier token {} already taken",
                entry.modifier_token
            )));
        }
        self.entries.insert(entry.concept_id.clone(), entry);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&ConceptBankEntry> {
        self.entries
            .get(id)
            .ok_or_else(|| CoreError::MissingArtifact(format!(
                "concept {id:?} not in bank (run train-concept first)"
            )))
    }
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FinetuneSpec {
    pub concept_id: String,
    pub modifier_token: u16,
    /// Embedding row used to initialize the modifier row (the class word).
    pub class_word_token: u16,
    pub mode: FinetuneMode,
    pub steps: usize,
    pub lr: f64,
    pub rank: usize,
    pub batch: usize,
    /// Keep the modifier embedding row at its initialization.
    pub freeze_embedding: bool,
    pub seed: u64,
}

impl FinetuneSpec {
    pub fn new(concept_id: &str, modifier_token: u16, class_word_token: u16) -> Self {
        FinetuneSpec {
            concept_id: concept_id.to_string(),
            modifier_token,
            class_word_token,
            mode: FinetuneMode::FullKv,
            steps: 500,
            lr: 1e-5,
            rank: 4,
            batch: 4,
            freeze_embedding: false,
            seed: 0,
        }
    }
}

/// LoRA factors for all layers, visitable for the optimizer.
struct LoraSet {
    layers: BTreeMap<String, LoraLayer>,
}

impl ParamVisit for LoraSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (name, triple) in &self.layers {
            for (tag, p) in ["q", "k", "v"].iter().zip(triple.iter()) {
                f(&format!("{name}.{tag}.a"), p.a.as_slice().unwrap());
                f(&format!("{name}.{tag}.b"), p.b.as_slice().unwrap());
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (name, triple) in &mut self.layers {
            for (tag, p) in ["q", "k", "v"].iter().zip(triple.iter_mut()) {
                f(&format!("{name}.{tag}.a"), p.a.as_slice_mut().unwrap());
                f(&format!("{name}.{tag}.b"), p.b.as_slice_mut().unwrap());
            }
        }
    }
}

struct EmbRow(Array1<f64>);

impl ParamVisit for EmbRow {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("row", self.0.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("row", self.0.as_slice_mut().unwrap());
    }
}

/// Score-matching fine-tune restricted to cross-attention weights plus the
/// modifier token embedding row, with geometric augmentation per sample.
/// The returned entry stores only the trained deltas.
pub fn finetune(
    base: &UNetParams,
    dataset: &[LabeledScene],
    domain: &SceneDomain,
    schedule: &NoiseSchedule,
    spec: &FinetuneSpec,
) -> Result<ConceptBankEntry> {
    if dataset.is_empty() {
        return Err(CoreError::Validation("finetune requires a nonempty dataset".into()));
    }
    if !is_modifier(spec.modifier_token) {
        return Err(CoreError::Validation(format!(
            "token {} is not a reserved modifier token",
            spec.modifier_token
        )));
    }
    for (i, scene) in dataset.iter().enumerate() {
        if !scene.prompt.contains(spec.modifier_token) {
            return Err(CoreError::Validation(format!(
                "dataset scene {i} prompt lacks the modifier token: {}",
                scene.prompt.describe()
            )));
        }
    }
    let base_hash = base.content_hash();
    let meta = TrainingMeta { steps: spec.steps, lr: spec.lr, seed: spec.seed };

    // zero-step fine-tune is the identity entry
    if spec.steps == 0 {
        let deltas = match spec.mode {
            FinetuneMode::FullKv => EntryDeltas::FullKv(BTreeMap::new()),
            FinetuneMode::Lora => {
                EntryDeltas::Lora { rank: spec.rank, layers: BTreeMap::new() }
            }
        };
        return Ok(ConceptBankEntry {
            concept_id: spec.concept_id.clone(),
            modifier_token: spec.modifier_token,
            mode: spec.mode,
            deltas,
            embedding_delta: None,
            base_hash,
            training_meta: meta,
        });
    }

    let mut rng = split_rng(spec.seed, "finetune", 0);
    let cross_names = base.cross_layer_names();
    let row_idx = spec.modifier_token as usize;

    // the modifier row starts at the class word's embedding plus small noise
    let mut work = base.clone();
    let init_row = {
        let mut row = base.token_embed.row(spec.class_word_token as usize).to_owned();
        for v in row.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += n * 0.01;
        }
        row
    };
    for (j, &v) in init_row.iter().enumerate() {
        work.token_embed[[row_idx, j]] = v;
    }

    let adam = AdamConfig { lr: spec.lr, ..Default::default() };
    let mut weight_opt = AdamState::new();
    let mut emb_opt = AdamState::new();
    let mut emb_row = EmbRow(work.token_embed.row(row_idx).to_owned());

    let mut lora = match spec.mode {
        FinetuneMode::Lora => {
            let mut layers = BTreeMap::new();
            for name in &cross_names {
                let w = base.cross_weights_by_name(name).unwrap();
                layers.insert(
                    name.clone(),
                    [
                        LoraPair::init(&mut rng, w.wq.shape()[0], w.wq.shape()[1], spec.rank),
                        LoraPair::init(&mut rng, w.wk.shape()[0], w.wk.shape()[1], spec.rank),
                        LoraPair::init(&mut rng, w.wv.shape()[0], w.wv.shape()[1], spec.rank),
                    ],
                );
            }
            Some(LoraSet { layers })
        }
        FinetuneMode::FullKv => None,
    };
    let mut lora_opt = AdamState::new();

    let hooks = ForwardHooks::default();
    for step in 0..spec.steps {
        // materialize effective weights for this step
        if let Some(set) = &lora {
            for name in &cross_names {
                let basew = base.cross_weights_by_name(name).unwrap().clone();
                let triple = &set.layers[name];
                let weff = work.cross_weights_by_name_mut(name).unwrap();
                weff.wq = &basew.wq + &triple[0].delta();
                weff.wk = &basew.wk + &triple[1].delta();
                weff.wv = &basew.wv + &triple[2].delta();
            }
        }
        for (j, &v) in emb_row.0.iter().enumerate() {
            work.token_embed[[row_idx, j]] = v;
        }

        // augmented batch
        let step_seed = split(spec.seed, "finetune-step", step as u64);
        let mut srng = split_rng(step_seed, "pick", 0);
        let mut grads = work.zeros_like();
        let mut loss_acc = 0.0;
        for bi in 0..spec.batch {
            let scene = &dataset[srng.gen_range(0..dataset.len())];
            let aug = domain.augment(scene, split(step_seed, "aug", bi as u64))?;
            let t = srng.gen_range(1..=schedule.t_train);
            let eps: Array3<f64> =
                Array3::from_shape_simple_fn(aug.image.dim(), || {
                    srng.sample(StandardNormal)
                });
            let x_t = schedule.add_noise(&aug.image, &eps, t);
            let (pred, trace) = work.forward_traced(&x_t, t, &aug.prompt, &hooks)?;
            let diff = &pred - &eps;
            let numel = diff.len() as f64;
            let loss = diff.mapv(|v| v * v).sum() / numel;
            if !loss.is_finite() {
                return Err(CoreError::Numerical(format!(
                    "non-finite fine-tune loss at step {step}, t={t}"
                )));
            }
            loss_acc += loss;
            let d_eps = diff.mapv(|v| 2.0 * v / (numel * spec.batch as f64));
            let g = work.backward(&trace, &d_eps);
            crate::train::add_params(&mut grads, &g);
        }
        let _ = loss_acc;

        // embedding row gradient (only the modifier row moves)
        if !spec.freeze_embedding {
            let row_grad = EmbRow(grads.token_embed.row(row_idx).to_owned());
            emb_opt.update(&mut emb_row, &row_grad, &adam, &|_| true);
        }

        match spec.mode {
            FinetuneMode::FullKv => {
                // only cross-attention K and V move
                weight_opt.update(&mut work, &grads, &adam, &|name: &str| {
                    cross_names
                        .iter()
                        .any(|l| name == format!("{l}.wk") || name == format!("{l}.wv"))
                });
            }
            FinetuneMode::Lora => {
                // chain rule through delta = a . b for each of q, k, v
                let set = lora.as_mut().unwrap();
                let mut lgrads = LoraSet { layers: BTreeMap::new() };
                for name in &cross_names {
                    let gw = grads.cross_weights_by_name(name).unwrap();
                    let triple = &set.layers[name];
                    let mk = |dw: &Array2<f64>, p: &LoraPair| LoraPair {
                        a: dw.dot(&p.b.t()),
                        b: p.a.t().dot(dw),
                    };
                    lgrads.layers.insert(
                        name.clone(),
                        [
                            mk(&gw.wq, &triple[0]),
                            mk(&gw.wk, &triple[1]),
                            mk(&gw.wv, &triple[2]),
                        ],
                    );
                }
                lora_opt.update(set, &lgrads, &adam, &|_| true);
            }
        }
    }

    // collect deltas
    let embedding_delta = if spec.freeze_embedding {
        let delta = &init_row - &base.token_embed.row(row_idx).to_owned();
        Some(delta)
    } else {
        let delta = &emb_row.0 - &base.token_embed.row(row_idx).to_owned();
        Some(delta)
    };
    let deltas = match spec.mode {
        FinetuneMode::FullKv => {
            let mut map = BTreeMap::new();
            for name in &cross_names {
                let w = work.cross_weights_by_name(name).unwrap();
                map.insert(name.clone(), (w.wk.clone(), w.wv.clone()));
            }
            EntryDeltas::FullKv(map)
        }
        FinetuneMode::Lora => {
            EntryDeltas::Lora { rank: spec.rank, layers: lora.unwrap().layers }
        }
    };
    Ok(ConceptBankEntry {
        concept_id: spec.concept_id.clone(),
        modifier_token: spec.modifier_token,
        mode: spec.mode,
        deltas,
        embedding_delta,
        base_hash,
        training_meta: meta,
    })
}

/// Pure application of an entry to the base weights: full-K/V layers are
/// replaced, LoRA layers get W += A.B, and the modifier embedding row is
/// patched. The base is not modified.
pub fn apply_entry(base: &UNetParams, entry: &ConceptBankEntry) -> Result<UNetParams> {
    if entry.base_hash != base.content_hash() {
        return Err(CoreError::Incompatible(format!(
            "entry {:?} does not match this base checkpoint",
            entry.concept_id
        )));
    }
    let mut out = base.clone();
    match &entry.deltas {
        EntryDeltas::FullKv(map) => {
            for (name, (wk, wv)) in map {
                let w = out.cross_weights_by_name_mut(name).ok_or_else(|| {
                    CoreError::Incompatible(format!("layer {name:?} absent from base"))
                })?;
                w.wk = wk.clone();
                w.wv = wv.clone();
            }
        }
        EntryDeltas::Lora { layers, .. } => {
            for (name, triple) in layers {
                let w = out.cross_weights_by_name_mut(name).ok_or_else(|| {
                    CoreError::Incompatible(format!("layer {name:?} absent from base"))
                })?;
                w.wq = &w.wq + &triple[0].delta();
                w.wk = &w.wk + &triple[1].delta();
                w.wv = &w.wv + &triple[2].delta();
            }
        }
    }
    if let Some(delta) = &entry.embedding_delta {
        let row = entry.modifier_token as usize;
        for (j, &d) in delta.iter().enumerate() {
            out.token_embed[[row, j]] += d;
        }
    }
    Ok(out)
}

/// Entry whose application is exactly the identity; used to stand a plain
/// base model in a fusion branch.
pub fn identity_entry(base: &UNetParams, concept_id: &str, modifier_token: u16) -> ConceptBankEntry {
    ConceptBankEntry {
        concept_id: concept_id.to_string(),
        modifier_token,
        mode: FinetuneMode::FullKv,
        deltas: EntryDeltas::FullKv(BTreeMap::new()),
        embedding_delta: None,
        base_hash: base.content_hash(),
        training_meta: TrainingMeta { steps: 0, lr: 0.0, seed: 0 },
    }
}

// ---------------------------------------------------------------------------
// Persistence: one container per entry + a manifest.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct BankManifest {
    pub base_hash: String,
    pub entries: BTreeMap<String, BankManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BankManifestEntry {
    pub file: String,
    pub modifier_token: u16,
    pub mode: FinetuneMode,
}

pub fn save_entry(dir: &Path, entry: &ConceptBankEntry) -> Result<()> {
    let mut w = crate::container::ContainerWriter::new("bank-entry");
    w.meta("concept_id", entry.concept_id.clone());
    w.meta("modifier_token", entry.modifier_token.to_string());
    w.meta("base_hash", entry.base_hash.clone());
    w.meta("training_meta", serde_json::to_string(&entry.training_meta).unwrap());
    match &entry.deltas {
        EntryDeltas::FullKv(map) => {
            w.meta("mode", "full_kv");
            for (name, (wk, wv)) in map {
                w.tensor(&format!("{name}.wk"), wk.shape(), wk.as_slice().unwrap());
                w.tensor(&format!("{name}.wv"), wv.shape(), wv.as_slice().unwrap());
            }
        }
        EntryDeltas::Lora { rank, layers } => {
            w.meta("mode", "lora");
            w.meta("rank", rank.to_string());
            for (name, triple) in layers {
                for (tag, p) in ["q", "k", "v"].iter().zip(triple.iter()) {
                    w.tensor(&format!("{name}.{tag}.a"), p.a.shape(), p.a.as_slice().unwrap());
                    w.tensor(&format!("{name}.{tag}.b"), p.b.shape(), p.b.as_slice().unwrap());
                }
            }
        }
    }
    if let Some(delta) = &entry.embedding_delta {
        w.tensor("embedding_delta", delta.shape(), delta.as_slice().unwrap());
    }
    w.save(&dir.join(format!("{}.entry", entry.concept_id)))
}

pub fn load_entry(path: &Path) -> Result<ConceptBankEntry> {
    let r = crate::container::ContainerReader::open(path)?;
    if r.header.kind != "bank-entry" {
        return Err(CoreError::format(path, "not a bank entry container"));
    }
    let concept_id = r.meta("concept_id")?.to_string();
    let modifier_token: u16 = r
        .meta("modifier_token")?
        .parse()
        .map_err(|_| CoreError::format(path, "bad modifier_token"))?;
    let base_hash = r.meta("base_hash")?.to_string();
    let training_meta: TrainingMeta = serde_json::from_str(r.meta("training_meta")?)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let all = r.read_all()?;
    let to2 = |shape: &[usize], data: Vec<f64>| {
        Array2::from_shape_vec((shape[0], shape[1]), data).unwrap()
    };
    let mode_str = r.meta("mode")?;
    let (mode, deltas) = match mode_str {
        "full_kv" => {
            let mut map: BTreeMap<String, (Option<Array2<f64>>, Option<Array2<f64>>)> =
                BTreeMap::new();
            for (name, (shape, data)) in &all {
                if let Some(layer) = name.strip_suffix(".wk") {
                    map.entry(layer.to_string()).or_default().0 = Some(to2(shape, data.clone()));
                } else if let Some(layer) = name.strip_suffix(".wv") {
                    map.entry(layer.to_string()).or_default().1 = Some(to2(shape, data.clone()));
                }
            }
            let mut out = BTreeMap::new();
            for (layer, (wk, wv)) in map {
                match (wk, wv) {
                    (Some(k), Some(v)) => {
                        out.insert(layer, (k, v));
                    }
                    _ => return Err(CoreError::format(path, format!("layer {layer} incomplete"))),
                }
            }
            (FinetuneMode::FullKv, EntryDeltas::FullKv(out))
        }
        "lora" => {
            let rank: usize =
                r.meta("rank")?.parse().map_err(|_| CoreError::format(path, "bad rank"))?;
            let mut layers: BTreeMap<String, BTreeMap<String, Array2<f64>>> = BTreeMap::new();
            for (name, (shape, data)) in &all {
                if name == "embedding_delta" {
                    continue;
                }
                let parts: Vec<&str> = name.rsplitn(3, '.').collect();
                if parts.len() != 3 {
                    return Err(CoreError::format(path, format!("bad tensor name {name}")));
                }
                let (suffix, tag, layer) = (parts[0], parts[1], parts[2]);
                layers
                    .entry(layer.to_string())
                    .or_default()
                    .insert(format!("{tag}.{suffix}"), to2(shape, data.clone()));
            }
            let mut out = BTreeMap::new();
            for (layer, mut parts) in layers {
                let mut take = |key: &str| {
                    parts.remove(key).ok_or_else(|| {
                        CoreError::format(path, format!("layer {layer} missing {key}"))
                    })
                };
                let triple = [
                    LoraPair { a: take("q.a")?, b: take("q.b")? },
                    LoraPair { a: take("k.a")?, b: take("k.b")? },
                    LoraPair { a: take("v.a")?, b: take("v.b")? },
                ];
                out.insert(layer, triple);
            }
            (FinetuneMode::Lora, EntryDeltas::Lora { rank, layers: out })
        }
        other => return Err(CoreError::format(path, format!("unknown mode {other:?}"))),
    };
    let embedding_delta = all.get("embedding_delta").map(|(_, data)| Array1::from_vec(data.clone()));
    Ok(ConceptBankEntry {
        concept_id,
        modifier_token,
        mode,
        deltas,
        embedding_delta,
        base_hash,
        training_meta,
    })
}

pub fn save_bank(dir: &Path, bank: &ConceptBank) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut manifest = BankManifest { base_hash: bank.base_hash.clone(), entries: BTreeMap::new() };
    for (id, entry) in &bank.entries {
        save_entry(dir, entry)?;
        manifest.entries.insert(
            id.clone(),
            BankManifestEntry {
                file: format!("{id}.entry"),
                modifier_token: entry.modifier_token,
                mode: entry.mode,
            },
        );
    }
    let text = serde_json::to_string_pretty(&manifest).unwrap();
    let tmp = dir.join("manifest.json.tmp-write");
    std::fs::write(&tmp, text).map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, dir.join("manifest.json"))
        .map_err(|e| CoreError::io(dir.join("manifest.json"), e))?;
    Ok(())
}

pub fn load_bank(dir: &Path) -> Result<ConceptBank> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|_| {
        CoreError::MissingArtifact(format!(
            "bank manifest {} not found (run train-concept first)",
            manifest_path.display()
        ))
    })?;
    let manifest: BankManifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::format(&manifest_path, e.to_string()))?;
    let mut bank = ConceptBank::new(manifest.base_hash);
    for (id, m) in &manifest.entries {
        let entry = load_entry(&dir.join(&m.file))?;
        if &entry.concept_id != id {
            return Err(CoreError::format(
                dir.join(&m.file),
                format!("entry id {:?} disagrees with manifest {id:?}", entry.concept_id),
            ));
        }
        bank.insert(entry)?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetKind;
    use crate::scene::{ConceptRegistry, SceneDomain};
    use crate::schedule::ScheduleConfig;
    use crate::unet::UNetConfig;

    fn setup() -> (UNetParams, SceneDomain, NoiseSchedule, Vec<LabeledScene>) {
        let cfg = UNetConfig { img_size: 32, ..UNetConfig::tiny() };
        let params = UNetParams::new(cfg, 11).unwrap();
        let domain = SceneDomain::new(ConceptRegistry::standard());
        let schedule = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let data = domain
            .make_dataset(DatasetKind::Concept, Some("ring-circle"), 3, 42)
            .unwrap();
        (params, domain, schedule, data)
    }

    fn spec(mode: FinetuneMode, steps: usize) -> FinetuneSpec {
        let registry = ConceptRegistry::standard();
        let def = registry.get("ring-circle").unwrap();
        FinetuneSpec {
            mode,
            steps,
            ..FinetuneSpec::new("ring-circle", def.modifier(), def.class_word())
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (base, domain, schedule, data) = setup();
        for mode in [FinetuneMode::FullKv, FinetuneMode::Lora] {
            let entry = finetune(&base, &data, &domain, &schedule, &spec(mode, 0)).unwrap();
            let applied = apply_entry(&base, &entry).unwrap();
            assert_eq!(applied, base);
        }
    }

    #[test]
    fn dataset_without_modifier_rejected() {
        let (base, domain, schedule, _) = setup();
        let plain = domain.make_dataset(DatasetKind::Base, None, 2, 3).unwrap();
        let err = finetune(&base, &plain, &domain, &schedule, &spec(FinetuneMode::FullKv, 5))
            .unwrap_err();
        assert!(err.to_string().contains("modifier"), "{err}");
    }

    #[test]
    fn isolation_only_cross_kv_and_modifier_row_move() {
        let (base, domain, schedule, data) = setup();
        let entry =
            finetune(&base, &data, &domain, &schedule, &spec(FinetuneMode::FullKv, 6)).unwrap();
        let tuned = apply_entry(&base, &entry).unwrap();
        let before = base.to_map();
        let after = tuned.to_map();
        let modifier = spec(FinetuneMode::FullKv, 0).modifier_token as usize;
        let d = base.cfg.text_dim;
        for (name, (shape, a)) in &before {
            let (_, b) = &after[name];
            let is_kv = name.ends_with(".wk") || name.ends_with(".wv");
            let is_cross_kv = is_kv && base.cross_layer_names().iter().any(|l| name.starts_with(l.as_str()));
            if is_cross_kv {
                continue;
            }
            if name == "token_embed" {
                // only the modifier row may differ
                let cols = shape[1];
                assert_eq!(cols, d);
                for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
                    if i / cols != modifier {
                        assert_eq!(x, y, "token_embed row {} changed", i / cols);
                    }
                }
                continue;
            }
            assert_eq!(a, b, "non-cross parameter {name} changed");
        }
    }

    #[test]
    fn lora_isolation_and_param_count() {
        let (base, domain, schedule, data) = setup();
        let sp = spec(FinetuneMode::Lora, 4);
        let entry = finetune(&base, &data, &domain, &schedule, &sp).unwrap();
        // parameter count: sum over layers of 3 * r * (d_in + d_out)
        let mut expect = 0usize;
        for name in base.cross_layer_names() {
            let w = base.cross_weights_by_name(&name).unwrap();
            for m in [&w.wq, &w.wk, &w.wv] {
                expect += sp.rank * (m.shape()[0] + m.shape()[1]);
            }
        }
        let mut got = 0usize;
        if let EntryDeltas::Lora { layers, .. } = &entry.deltas {
            for triple in layers.values() {
                for p in triple {
                    got += p.a.len() + p.b.len();
                }
            }
        } else {
            panic!("expected lora deltas");
        }
        assert_eq!(got, expect);
        // non-cross weights bit-identical after application
        let tuned = apply_entry(&base, &entry).unwrap();
        assert_eq!(tuned.in_conv, base.in_conv);
        assert_eq!(tuned.out_conv, base.out_conv);
        assert_eq!(tuned.temb1, base.temb1);
        for (s_base, s_tuned) in base.stages.iter().zip(tuned.stages.iter()) {
            if let (
                crate::unet::Stage::Res { block: a, .. },
                crate::unet::Stage::Res { block: b, .. },
            ) = (s_base, s_tuned)
            {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn lora_rank_bound_via_svd() {
        let (base, domain, schedule, data) = setup();
        let sp = spec(FinetuneMode::Lora, 5);
        let entry = finetune(&base, &data, &domain, &schedule, &sp).unwrap();
        let tuned = apply_entry(&base, &entry).unwrap();
        for name in base.cross_layer_names() {
            let wb = base.cross_weights_by_name(&name).unwrap();
            let wt = tuned.cross_weights_by_name(&name).unwrap();
            for (mb, mt) in [(&wb.wq, &wt.wq), (&wb.wk, &wt.wk), (&wb.wv, &wt.wv)] {
                let delta = mt - mb;
                let sv = crate::tensor::singular_values(&delta);
                for (i, &s) in sv.iter().enumerate().skip(sp.rank) {
                    assert!(s <= 1e-6, "{name}: sigma[{i}]={s:.3e} exceeds rank bound");
                }
            }
        }
    }

    #[test]
    fn apply_then_subtract_lora_recovers_base() {
        let (base, domain, schedule, data) = setup();
        let entry = finetune(&base, &data, &domain, &schedule, &spec(FinetuneMode::Lora, 4))
            .unwrap();
        let tuned = apply_entry(&base, &entry).unwrap();
        // negate the deltas and apply to the tuned model
        let mut neg = entry.clone();
        if let EntryDeltas::Lora { layers, .. } = &mut neg.deltas {
            for triple in layers.values_mut() {
                for p in triple.iter_mut() {
                    p.a.mapv_inplace(|v| -v);
                }
            }
        }
        if let Some(d) = &mut neg.embedding_delta {
            d.mapv_inplace(|v| -v);
        }
        neg.base_hash = tuned.content_hash();
        let recovered = apply_entry(&tuned, &neg).unwrap();
        let bm = base.to_map();
        let rm = recovered.to_map();
        for (name, (_, a)) in &bm {
            let (_, b) = &rm[name];
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-7, "{name} differs by {}", (x - y).abs());
            }
        }
    }

    #[test]
    fn hash_mismatch_rejected() {
        let (base, domain, schedule, data) = setup();
        let entry =
            finetune(&base, &data, &domain, &schedule, &spec(FinetuneMode::FullKv, 2)).unwrap();
        let other = UNetParams::new(base.cfg.clone(), 999).unwrap();
        assert!(matches!(apply_entry(&other, &entry), Err(CoreError::Incompatible(_))));
    }

    #[test]
    fn bank_roundtrip_and_uniqueness() {
        let (base, domain, schedule, data) = setup();
        let e1 =
            finetune(&base, &data, &domain, &schedule, &spec(FinetuneMode::FullKv, 2)).unwrap();
        let e2 = finetune(&base, &data, &domain, &schedule, &spec(FinetuneMode::Lora, 2)).unwrap();
        let mut bank = ConceptBank::new(base.content_hash());
        bank.insert(e1.clone()).unwrap();
        // same modifier under a different id is rejected
        let mut clash = e2.clone();
        clash.concept_id = "other".into();
        assert!(bank.insert(clash).is_err());

        let tmp = tempfile::tempdir().unwrap();
        save_bank(tmp.path(), &bank).unwrap();
        let loaded = load_bank(tmp.path()).unwrap();
        assert_eq!(loaded.base_hash, bank.base_hash);
        let le = loaded.get("ring-circle").unwrap();
        assert_eq!(le, &e1);
    }

    #[test]
    fn lora_entry_roundtrip() {
        let (base, domain, schedule, data) = setup();
        let entry =
            finetune(&base, &data, &domain, &schedule, &spec(FinetuneMode::Lora, 2)).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_entry(tmp.path(), &entry).unwrap();
        let loaded = load_entry(&tmp.path().join("ring-circle.entry")).unwrap();
        assert_eq!(loaded, entry);
    }
}
