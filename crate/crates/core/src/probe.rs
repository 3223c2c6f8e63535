//! Concept probe: a small convolutional classifier over concept styles,
//! generic shapes, and background styles. It stands in for an image
//! similarity model at desk scale; all alignment metrics are computed
//! against its class probabilities.

use crate::error::{CoreError, Result};
use crate::nn::{silu, silu_grad, Conv2d, Linear};
use crate::optim::{AdamConfig, AdamState, ParamVisit};
use crate::rng::{split, split_rng, Prng};
use crate::scene::{BgClass, ConceptRegistry, ConceptTarget, LabeledScene, SceneDomain, ShapeClass};
use crate::tensor::resize_bilinear;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const PROBE_INPUT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeClass {
    /// A bank concept's specific style (object texture or background).
    Concept(String),
    /// Any generically styled object of this shape.
    GenericShape(ShapeClass),
    /// A generically styled background of this class.
    GenericBg(BgClass),
    /// Noise and non-scene content.
    Other,
}

#[derive(Debug, Clone)]
pub struct ConceptProbe {
    pub conv1: Conv2d,
    pub conv1b: Conv2d,
    pub conv2: Conv2d,
    pub fc: Linear,
    pub classes: Vec<ProbeClass>,
    /// Per-class accept threshold calibrated on held-out crops.
    pub thresholds: Vec<f64>,
    pub input_size: usize,
    /// Held-out accuracy recorded at training time.
    pub holdout_accuracy: f64,
}

impl ParamVisit for ConceptProbe {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("conv1.w", self.conv1.w.as_slice().unwrap());
        f("conv1.b", self.conv1.b.as_slice().unwrap());
        f("conv1b.w", self.conv1b.w.as_slice().unwrap());
        f("conv1b.b", self.conv1b.b.as_slice().unwrap());
        f("conv2.w", self.conv2.w.as_slice().unwrap());
        f("conv2.b", self.conv2.b.as_slice().unwrap());
        f("fc.w", self.fc.w.as_slice().unwrap());
        f("fc.b", self.fc.b.as_slice().unwrap());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("conv1.w", self.conv1.w.as_slice_mut().unwrap());
        f("conv1.b", self.conv1.b.as_slice_mut().unwrap());
        f("conv1b.w", self.conv1b.w.as_slice_mut().unwrap());
        f("conv1b.b", self.conv1b.b.as_slice_mut().unwrap());
        f("conv2.w", self.conv2.w.as_slice_mut().unwrap());
        f("conv2.b", self.conv2.b.as_slice_mut().unwrap());
        f("fc.w", self.fc.w.as_slice_mut().unwrap());
        f("fc.b", self.fc.b.as_slice_mut().unwrap());
    }
}

fn avgpool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                out[[ch, y, xx]] = (x[[ch, 2 * y, 2 * xx]]
                    + x[[ch, 2 * y, 2 * xx + 1]]
                    + x[[ch, 2 * y + 1, 2 * xx]]
                    + x[[ch, 2 * y + 1, 2 * xx + 1]])
                    * 0.25;
            }
        }
    }
    out
}

fn avgpool2_back(d: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = d[[ch, y, xx]] * 0.25;
                out[[ch, 2 * y, 2 * xx]] = v;
                out[[ch, 2 * y, 2 * xx + 1]] = v;
                out[[ch, 2 * y + 1, 2 * xx]] = v;
                out[[ch, 2 * y + 1, 2 * xx + 1]] = v;
            }
        }
    }
    out
}

struct ProbeTrace {
    c1_cache: crate::nn::conv::ConvCache,
    a1_in: Array3<f64>,
    c1b_cache: crate::nn::conv::ConvCache,
    a1b_in: Array3<f64>,
    c2_cache: crate::nn::conv::ConvCache,
    a2_in: Array3<f64>,
    p2_flat: Array1<f64>,
}

impl ConceptProbe {
    fn new(rng: &mut Prng, classes: Vec<ProbeClass>) -> Self {
        let n = classes.len();
        ConceptProbe {
            conv1: Conv2d::new(rng, 3, 16, 3, 1, 1, (2.0 / 27.0f64).sqrt()),
            conv1b: Conv2d::new(rng, 16, 20, 3, 1, 1, (2.0 / 144.0f64).sqrt()),
            conv2: Conv2d::new(rng, 20, 40, 3, 1, 1, (2.0 / 180.0f64).sqrt()),
            fc: Linear::new(rng, 40 * 5 * 5, n, 0.02),
            thresholds: vec![0.5; n],
            classes,
            input_size: PROBE_INPUT,
            holdout_accuracy: 0.0,
        }
    }

    fn forward_trace(&self, crop: &Array3<f64>) -> (Array1<f64>, ProbeTrace) {
        let (c1, c1_cache) = self.conv1.forward(crop);
        let a1 = c1.mapv(silu);
        let (c1b, c1b_cache) = self.conv1b.forward(&a1);
        let a1b = c1b.mapv(silu);
        let p1 = avgpool2(&a1b);
        let (c2, c2_cache) = self.conv2.forward(&p1);
        let a2 = c2.mapv(silu);
        let p2 = avgpool2(&a2);
        let flat = Array1::from_iter(p2.iter().cloned());
        let logits = self.fc.forward1(&flat);
        (
            logits,
            ProbeTrace {
                c1_cache,
                a1_in: c1,
                c1b_cache,
                a1b_in: c1b,
                c2_cache,
                a2_in: c2,
                p2_flat: flat,
            },
        )
    }

    /// Class probabilities for a crop (resized to the probe input if needed).
    pub fn probs(&self, crop: &Array3<f64>) -> Vec<f64> {
        let sized = if crop.shape()[1] == self.input_size && crop.shape()[2] == self.input_size {
            crop.clone()
        } else {
            resize_bilinear(&crop.view(), self.input_size, self.input_size)
        };
        let (logits, _) = self.forward_trace(&sized);
        softmax_vec(logits.as_slice().unwrap())
    }

    pub fn classify(&self, crop: &Array3<f64>) -> (usize, Vec<f64>) {
        let p = self.probs(crop);
        let arg = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        (arg, p)
    }

    pub fn class_index(&self, class: &ProbeClass) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn prob_of(&self, crop: &Array3<f64>, class: &ProbeClass) -> Option<f64> {
        let idx = self.class_index(class)?;
        Some(self.probs(crop)[idx])
    }

    fn backward(
        &self,
        crop: &Array3<f64>,
        trace: &ProbeTrace,
        d_logits: &Array1<f64>,
    ) -> ConceptProbe {
        let mut g = self.clone();
        g.visit_mut(&mut |_, s| s.fill(0.0));
        let (d_flat, d_fcw, d_fcb) = self.fc.backward1(&trace.p2_flat, d_logits);
        g.fc.w += &d_fcw;
        g.fc.b += &d_fcb;
        let d_p2 =
            Array3::from_shape_vec((40, 5, 5), d_flat.to_vec()).expect("probe feature shape");
        let d_a2 = avgpool2_back(&d_p2);
        let d_c2 = &d_a2 * &trace.a2_in.mapv(silu_grad);
        let (d_p1, d_w2, d_b2) = self.conv2.backward(&trace.c2_cache, &d_c2);
        g.conv2.w += &d_w2;
        g.conv2.b += &d_b2;
        let d_a1b = avgpool2_back(&d_p1);
        let d_c1b = &d_a1b * &trace.a1b_in.mapv(silu_grad);
        let (d_a1, d_w1b, d_b1b) = self.conv1b.backward(&trace.c1b_cache, &d_c1b);
        g.conv1b.w += &d_w1b;
        g.conv1b.b += &d_b1b;
        let d_c1 = &d_a1 * &trace.a1_in.mapv(silu_grad);
        let (_, d_w1, d_b1) = self.conv1.backward(&trace.c1_cache, &d_c1);
        g.conv1.w += &d_w1;
        g.conv1.b += &d_b1;
        let _ = crop;
        g
    }
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

// ---------------------------------------------------------------------------
// Crop extraction and augmentation
// ---------------------------------------------------------------------------

/// Bounding box of a mask: (y0, y1, x0, x1) inclusive, or None when empty.
pub fn mask_bbox(mask: &Array2<u8>) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    any.then_some((y0, y1, x0, x1))
}

/// Crop the bounding rectangle of a mask with a margin, resized to the probe
/// input. Returns None for an empty mask.
pub fn crop_mask_region(
    image: &Array3<f64>,
    mask: &Array2<u8>,
    margin: usize,
) -> Option<Array3<f64>> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if !any {
        return None;
    }
    let y0 = y0.saturating_sub(margin);
    let x0 = x0.saturating_sub(margin);
    let y1 = (y1 + margin + 1).min(h);
    let x1 = (x1 + margin + 1).min(w);
    let region = image.slice(ndarray::s![.., y0..y1, x0..x1]).to_owned();
    Some(resize_bilinear(&region.view(), PROBE_INPUT, PROBE_INPUT))
}

/// Fixed-size window crop at (y0, x0).
pub fn crop_window(image: &Array3<f64>, y0: usize, x0: usize, size: usize) -> Array3<f64> {
    let region = image.slice(ndarray::s![.., y0..y0 + size, x0..x0 + size]).to_owned();
    resize_bilinear(&region.view(), PROBE_INPUT, PROBE_INPUT)
}

/// Separable Gaussian blur in place (sigma <= 0 is a no-op).
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / sum).collect();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * img[[ch, y, sx as usize]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += kv * tmp[[ch, sy as usize, x]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

fn perturb(crop: &Array3<f64>, rng: &mut Prng) -> Array3<f64> {
    let sigma_blur = *[0.0, 0.0, 0.4, 0.7].choose(rng).unwrap();
    let sigma_noise = *[0.0, 0.03, 0.07].choose(rng).unwrap();
    let mut out = gaussian_blur(crop, sigma_blur);
    if sigma_noise > 0.0 {
        out.mapv_inplace(|v| v);
        for v in out.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v + n * sigma_noise).clamp(-1.0, 1.0);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub crops_per_class: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_holdout_accuracy: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            crops_per_class: 420,
            steps: 2600,
            batch: 32,
            lr: 2e-3,
            min_holdout_accuracy: 0.95,
        }
    }
}

/// Build the labeled crop set for every probe class from rendered scenes.
fn build_crop_set(
    domain: &SceneDomain,
    classes: &[ProbeClass],
    per_class: usize,
    seed: u64,
) -> Result<Vec<(Array3<f64>, usize)>> {
    let mut data = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let mut rng = split_rng(seed, "probe-crops", ci as u64);
        let mut count = 0;
        let mut attempt = 0u64;
        while count < per_class {
            attempt += 1;
            if attempt > 40 * per_class as u64 {
                return Err(CoreError::Validation(format!(
                    "could not build enough crops for class {class:?}"
                )));
            }
            let scene_seed = split(seed, "probe-scene", ci as u64 * 1_000_000 + attempt);
            let crop = match class {
                ProbeClass::Concept(id) => {
                    let def = domain.registry.require(id)?;
                    match &def.target {
                        ConceptTarget::Object { .. } => {
                            let scenes = domain.make_dataset(
                                crate::dataset::DatasetKind::Concept,
                                Some(id),
                                3,
                                scene_seed,
                            )?;
                            let scene = &scenes[attempt as usize % scenes.len()];
                            let aug = domain.augment(scene, split(scene_seed, "aug", attempt))?;
                            let margin = proportional_margin(&aug.gt_masks[0], &mut rng);
                            crop_mask_region(&aug.image, &aug.gt_masks[0], margin)
                        }
                        ConceptTarget::Background { .. } => {
                            let scenes = domain.make_dataset(
                                crate::dataset::DatasetKind::Concept,
                                Some(id),
                                3,
                                scene_seed,
                            )?;
                            let scene = &scenes[attempt as usize % scenes.len()];
                            bg_window(scene, &mut rng)
                        }
                    }
                }
                ProbeClass::GenericShape(shape) => {
                    let scene = generic_object_scene(domain, *shape, scene_seed)?;
                    let margin = proportional_margin(&scene.gt_masks[0], &mut rng);
                    crop_mask_region(&scene.image, &scene.gt_masks[0], margin)
                }
                ProbeClass::GenericBg(bg) => {
                    let scene = generic_bg_scene(domain, *bg, scene_seed)?;
                    bg_window(&scene, &mut rng)
                }
                ProbeClass::Other => {
                    if attempt % 3 == 0 {
                        fragment_crop(domain, scene_seed, &mut rng)
                    } else {
                        Some(other_crop(&mut rng))
                    }
                }
            };
            if let Some(c) = crop {
                data.push((c, ci));
                count += 1;
            }
        }
    }
    Ok(data)
}

fn generic_object_scene(
    domain: &SceneDomain,
    shape: ShapeClass,
    seed: u64,
) -> Result<LabeledScene> {
    let mut rng = split_rng(seed, "generic-obj", 0);
    let obj = crate::scene::sample_object(
        &mut rng,
        shape,
        crate::scene::StyleId::Generic,
        &[],
        None,
    )
    .ok_or_else(|| CoreError::Validation("placement failed".into()))?;
    let bg = BgClass::ALL[rng.gen_range(0..4)];
    let spec = crate::scene::SceneSpec {
        objects: vec![obj],
        background: crate::scene::BgSpec { class: bg, style: crate::scene::StyleId::Generic },
    };
    domain.render_scene(&spec, seed)
}

fn generic_bg_scene(domain: &SceneDomain, bg: BgClass, seed: u64) -> Result<LabeledScene> {
    let mut rng = split_rng(seed, "generic-bg", 0);
    let shape = ShapeClass::ALL[rng.gen_range(0..4)];
    let obj = crate::scene::sample_object(
        &mut rng,
        shape,
        crate::scene::StyleId::Generic,
        &[],
        None,
    )
    .ok_or_else(|| CoreError::Validation("placement failed".into()))?;
    let spec = crate::scene::SceneSpec {
        objects: vec![obj],
        background: crate::scene::BgSpec { class: bg, style: crate::scene::StyleId::Generic },
    };
    domain.render_scene(&spec, seed)
}

/// A window sampled from the background region of a scene (at most 5%
/// object pixels).
fn bg_window(scene: &LabeledScene, rng: &mut Prng) -> Option<Array3<f64>> {
    let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
    let size = 14;
    for _ in 0..60 {
        let y0 = rng.gen_range(0..=h - size);
        let x0 = rng.gen_range(0..=w - size);
        let mut obj = 0usize;
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                if scene.gt_masks.iter().any(|m| m[[y, x]] != 0) {
                    obj += 1;
                }
            }
        }
        if obj * 10 <= size * size {
            return Some(crop_window(&scene.image, y0, x0, size));
        }
    }
    None
}

fn other_crop(rng: &mut Prng) -> Array3<f64> {
    if rng.gen_bool(0.5) {
        // uniform noise
        Array3::from_shape_simple_fn((3, PROBE_INPUT, PROBE_INPUT), || rng.gen_range(-1.0..1.0))
    } else {
        // blocky colored static (high-frequency junk, unlike any background)
        let cell = rng.gen_range(2..4usize);
        let mut colors = Vec::new();
        for _ in 0..64 {
            colors.push([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
        }
        Array3::from_shape_fn((3, PROBE_INPUT, PROBE_INPUT), |(c, y, x)| {
            let idx = (y / cell) * 8 + (x / cell) % 8;
            colors[idx % colors.len()][c]
        })
    }
}

/// Margin scaled to the object so the object always fills a substantial
/// part of the crop (tight for small objects, up to half-width for large).
fn proportional_margin(mask: &Array2<u8>, rng: &mut Prng) -> usize {
    let bbox = mask_bbox(mask).map(|(y0, y1, x0, x1)| (y1 - y0 + 1).max(x1 - x0 + 1)).unwrap_or(4);
    rng.gen_range(1..=(2 + bbox / 3).min(8))
}

/// A window that clips a generic object to 15-60% visibility; such partial
/// views train into the junk class so sliding-window detection only fires
/// on (mostly) complete objects.
fn fragment_crop(domain: &SceneDomain, seed: u64, rng: &mut Prng) -> Option<Array3<f64>> {
    let shape = ShapeClass::ALL[rng.gen_range(0..4)];
    let scene = generic_object_scene(domain, shape, seed).ok()?;
    let mask = &scene.gt_masks[0];
    let area: usize = mask.iter().map(|&v| v as usize).sum();
    let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
    let size = *[10usize, 12, 14].choose(rng).unwrap();
    for _ in 0..80 {
        let y0 = rng.gen_range(0..=h - size);
        let x0 = rng.gen_range(0..=w - size);
        let mut covered = 0usize;
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                covered += (mask[[y, x]] != 0) as usize;
            }
        }
        let frac = covered as f64 / area.max(1) as f64;
        if (0.15..=0.75).contains(&frac) {
            return Some(crop_window(&scene.image, y0, x0, size));
        }
    }
    None
}

/// Probe classes for a registry: every bank concept, the four generic
/// shapes, the four generic backgrounds, and a junk class.
pub fn probe_classes(registry: &ConceptRegistry) -> Vec<ProbeClass> {
    let mut classes: Vec<ProbeClass> =
        registry.concepts.iter().map(|c| ProbeClass::Concept(c.id.clone())).collect();
    classes.extend(ShapeClass::ALL.iter().map(|s| ProbeClass::GenericShape(*s)));
    classes.extend(BgClass::ALL.iter().map(|b| ProbeClass::GenericBg(*b)));
    classes.push(ProbeClass::Other);
    classes
}

/// Train the probe on rendered crops. Fails with a confusion matrix when the
/// held-out accuracy misses the configured floor.
pub fn train_probe(
    domain: &SceneDomain,
    cfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<ConceptProbe> {
    let classes = probe_classes(&domain.registry);
    let mut data = build_crop_set(domain, &classes, cfg.crops_per_class, seed)?;
    let mut rng = split_rng(seed, "probe-train", 0);
    data.shuffle(&mut rng);
    let holdout_n = data.len() / 5;
    let (holdout, train) = data.split_at(holdout_n);

    let mut probe = ConceptProbe::new(&mut rng, classes.clone());
    let mut opt = AdamState::new();
    let n_classes = classes.len();
    for step in 0..cfg.steps {
        // step decay for the final stretch
        let lr = if step * 10 >= cfg.steps * 7 { cfg.lr * 0.25 } else { cfg.lr };
        let adam = AdamConfig { lr, ..Default::default() };
        let mut grads = probe.clone();
        grads.visit_mut(&mut |_, s| s.fill(0.0));
        let mut srng = split_rng(seed, "probe-batch", step as u64);
        for _ in 0..cfg.batch {
            let (clean, label) = &train[srng.gen_range(0..train.len())];
            let crop = &perturb(clean, &mut srng);
            let (logits, trace) = probe.forward_trace(crop);
            let probs = softmax_vec(logits.as_slice().unwrap());
            let mut d_logits = Array1::from_vec(probs.clone());
            d_logits[*label] -= 1.0;
            d_logits.mapv_inplace(|v| v / cfg.batch as f64);
            let g = probe.backward(crop, &trace, &d_logits);
            add_probe(&mut grads, &g);
        }
        opt.update(&mut probe, &grads, &adam, &|_| true);
    }

    // held-out evaluation + confusion matrix
    let mut confusion = Array2::<usize>::zeros((n_classes, n_classes));
    let mut correct = 0usize;
    let mut true_probs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (crop, label) in holdout {
        let (pred, probs) = probe.classify(crop);
        confusion[[*label, pred]] += 1;
        if pred == *label {
            correct += 1;
        }
        true_probs.entry(*label).or_default().push(probs[*label]);
    }
    let accuracy = correct as f64 / holdout.len() as f64;
    probe.holdout_accuracy = accuracy;
    if accuracy < cfg.min_holdout_accuracy {
        let mut report = format!(
            "probe held-out accuracy {accuracy:.4} below {:.2}; confusion matrix:\n",
            cfg.min_holdout_accuracy
        );
        for (i, class) in classes.iter().enumerate() {
            report.push_str(&format!("{class:?}: {:?}\n", confusion.index_axis(Axis(0), i)));
        }
        return Err(CoreError::Validation(report));
    }
    // per-class accept threshold: 5th percentile of true-class probabilities
    for (ci, _) in classes.iter().enumerate() {
        let t = match true_probs.get(&ci) {
            Some(ps) => {
                let mut ps = ps.clone();
                ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ps[(ps.len() as f64 * 0.05) as usize].clamp(0.35, 0.9)
            }
            None => 0.5,
        };
        probe.thresholds[ci] = t;
    }
    Ok(probe)
}

fn add_probe(acc: &mut ConceptProbe, g: &ConceptProbe) {
    let mut parts: Vec<Vec<f64>> = Vec::new();
    g.visit(&mut |_, s| parts.push(s.to_vec()));
    let mut i = 0;
    acc.visit_mut(&mut |_, s| {
        for (a, b) in s.iter_mut().zip(parts[i].iter()) {
            *a += b;
        }
        i += 1;
    });
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub fn save_probe(path: &Path, probe: &ConceptProbe) -> Result<()> {
    let mut w = crate::container::ContainerWriter::new("probe");
    w.meta("classes", serde_json::to_string(&probe.classes).unwrap());
    w.meta("thresholds", serde_json::to_string(&probe.thresholds).unwrap());
    w.meta("input_size", probe.input_size.to_string());
    w.meta("holdout_accuracy", probe.holdout_accuracy.to_string());
    probe.visit(&mut |name, s| {
        let shape = match name {
            "conv1.w" => probe.conv1.w.shape().to_vec(),
            "conv1.b" => probe.conv1.b.shape().to_vec(),
            "conv1b.w" => probe.conv1b.w.shape().to_vec(),
            "conv1b.b" => probe.conv1b.b.shape().to_vec(),
            "conv2.w" => probe.conv2.w.shape().to_vec(),
            "conv2.b" => probe.conv2.b.shape().to_vec(),
            "fc.w" => probe.fc.w.shape().to_vec(),
            "fc.b" => probe.fc.b.shape().to_vec(),
            _ => unreachable!(),
        };
        w.tensor(name, &shape, s);
    });
    w.save(path)
}

pub fn load_probe(path: &Path) -> Result<ConceptProbe> {
    let r = crate::container::ContainerReader::open(path)?;
    if r.header.kind != "probe" {
        return Err(CoreError::format(path, "not a probe container"));
    }
    let classes: Vec<ProbeClass> = serde_json::from_str(r.meta("classes")?)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let thresholds: Vec<f64> = serde_json::from_str(r.meta("thresholds")?)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let mut probe = ConceptProbe::new(&mut crate::rng::seed_rng(0), classes);
    probe.thresholds = thresholds;
    probe.holdout_accuracy = r
        .meta("holdout_accuracy")?
        .parse()
        .map_err(|_| CoreError::format(path, "bad holdout_accuracy"))?;
    let all = r.read_all()?;
    probe.visit_mut(&mut |name, s| {
        if let Some((_, data)) = all.get(name) {
            s.copy_from_slice(data);
        }
    });
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> ProbeTrainConfig {
        ProbeTrainConfig {
            crops_per_class: 110,
            steps: 500,
            batch: 24,
            lr: 3e-3,
            min_holdout_accuracy: 0.9,
        }
    }

    #[test]
    fn probe_trains_and_is_deterministic() {
        let domain = SceneDomain::new(ConceptRegistry::standard());
        let cfg = quick_cfg();
        let p1 = train_probe(&domain, &cfg, 42).unwrap();
        assert!(p1.holdout_accuracy >= 0.9, "accuracy {}", p1.holdout_accuracy);
        let p2 = train_probe(&domain, &cfg, 42).unwrap();
        // identical weights for identical seeds
        let mut equal = true;
        let mut parts: Vec<Vec<f64>> = Vec::new();
        p1.visit(&mut |_, s| parts.push(s.to_vec()));
        let mut i = 0;
        p2.visit(&mut |_, s| {
            if parts[i] != s {
                equal = false;
            }
            i += 1;
        });
        assert!(equal, "same seed produced different probes");
    }

    #[test]
    fn probe_separates_training_styles() {
        let domain = SceneDomain::new(ConceptRegistry::standard());
        let probe = train_probe(&domain, &quick_cfg(), 7).unwrap();
        // crops of each concept style score their own class on fresh scenes
        for id in ["ring-circle", "checker-square"] {
            let scenes = domain
                .make_dataset(crate::dataset::DatasetKind::Concept, Some(id), 4, 999)
                .unwrap();
            let crop = crop_mask_region(&scenes[0].image, &scenes[0].gt_masks[0], 2).unwrap();
            let p = probe.prob_of(&crop, &ProbeClass::Concept(id.to_string())).unwrap();
            assert!(p > 0.5, "{id} scored {p:.3} on its own style");
        }
    }

    #[test]
    fn noise_crop_below_concept_thresholds() {
        let domain = SceneDomain::new(ConceptRegistry::standard());
        let probe = train_probe(&domain, &quick_cfg(), 11).unwrap();
        let mut rng = crate::rng::seed_rng(5);
        for _ in 0..5 {
            let noise = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
            let probs = probe.probs(&noise);
            for (ci, class) in probe.classes.iter().enumerate() {
                if matches!(class, ProbeClass::Concept(_)) {
                    assert!(
                        probs[ci] < probe.thresholds[ci],
                        "noise scored {:.3} >= threshold {:.3} for {class:?}",
                        probs[ci],
                        probe.thresholds[ci]
                    );
                }
            }
        }
    }

    #[test]
    fn probe_file_roundtrip() {
        let domain = SceneDomain::new(ConceptRegistry::standard());
        let cfg = ProbeTrainConfig { steps: 40, crops_per_class: 30, ..quick_cfg() };
        let probe = match train_probe(&domain, &cfg, 3) {
            Ok(p) => p,
            // a severely under-trained probe may miss the floor; that is
            // fine for the io test, rebuild without the accuracy gate
            Err(_) => {
                let mut c = cfg.clone();
                c.min_holdout_accuracy = 0.0;
                train_probe(&domain, &c, 3).unwrap()
            }
        };
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("probe.cftc");
        save_probe(&path, &probe).unwrap();
        let loaded = load_probe(&path).unwrap();
        assert_eq!(loaded.classes, probe.classes);
        assert_eq!(loaded.thresholds, probe.thresholds);
        let mut rng = crate::rng::seed_rng(8);
        let crop = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
        assert_eq!(probe.probs(&crop), loaded.probs(&crop));
    }
}
