//! Dataset construction over the toy domain: base-model training scenes,
//! few-shot concept datasets, geometric augmentation, and lossless
//! persistence (PNG + sidecar metadata with run-length encoded masks).

use crate::error::{CoreError, Result};
use crate::rng::{split_rng, Prng};
use crate::scene::{
    sample_object, BgClass, BgSpec, ConceptTarget, LabeledScene, ObjectSpec, SceneDomain,
    SceneSpec, ShapeClass, StyleId, MAX_RADIUS, MIN_RADIUS,
};
use crate::tensor::unit_to_u8;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Base,
    Concept,
}

pub const CONCEPT_MIN_IMAGES: usize = 3;
pub const CONCEPT_MAX_IMAGES: usize = 8;

impl SceneDomain {
    /// Generate `n` scenes. Base datasets vary shapes, styles, and
    /// backgrounds; concept datasets feature only that concept with diverse
    /// pose and scale (3 to 8 images).
    pub fn make_dataset(
        &self,
        kind: DatasetKind,
        concept_id: Option<&str>,
        n: usize,
        seed: u64,
    ) -> Result<Vec<LabeledScene>> {
        match kind {
            DatasetKind::Base => (0..n)
                .map(|i| {
                    let spec_seed = crate::rng::split(seed, "base-scene", i as u64);
                    let spec = self.sample_base_spec(spec_seed)?;
                    self.render_scene(&spec, spec_seed)
                })
                .collect(),
            DatasetKind::Concept => {
                let id = concept_id.ok_or_else(|| {
                    CoreError::Validation("concept dataset requires a concept id".into())
                })?;
                if !(CONCEPT_MIN_IMAGES..=CONCEPT_MAX_IMAGES).contains(&n) {
                    return Err(CoreError::Validation(format!(
                        "concept dataset size {n} outside [{CONCEPT_MIN_IMAGES}, {CONCEPT_MAX_IMAGES}]"
                    )));
                }
                let def = self.registry.require(id)?.clone();
                (0..n)
                    .map(|i| {
                        let spec_seed = crate::rng::split(seed, "concept-scene", i as u64);
                        let spec = self.sample_concept_spec(&def.id, &def.target, spec_seed)?;
                        self.render_scene(&spec, spec_seed)
                    })
                    .collect()
            }
        }
    }

    fn sample_base_spec(&self, seed: u64) -> Result<SceneSpec> {
        let mut rng = split_rng(seed, "base-spec", 0);
        let n_objects = *[1usize, 1, 1, 2, 2, 2, 2, 3]
            .choose(&mut rng)
            .unwrap();
        let bg_class = BgClass::ALL[rng.gen_range(0..4)];
        // mostly well-separated objects; overlap stays legal but rare
        let clearance = if rng.gen_range(0..100u32) < 15 { None } else { Some(0.12) };
        let mut objects: Vec<ObjectSpec> = Vec::new();
        for _ in 0..n_objects {
            let shape = ShapeClass::ALL[rng.gen_range(0..4)];
            if let Some(obj) = sample_object(&mut rng, shape, StyleId::Generic, &objects, clearance)
            {
                objects.push(obj);
            }
        }
        if objects.is_empty() {
            return Err(CoreError::Validation("failed to place any object".into()));
        }
        Ok(SceneSpec {
            objects,
            background: BgSpec { class: bg_class, style: StyleId::Generic },
        })
    }

    fn sample_concept_spec(
        &self,
        id: &str,
        target: &ConceptTarget,
        seed: u64,
    ) -> Result<SceneSpec> {
        let mut rng = split_rng(seed, "concept-spec", 0);
        match target {
            ConceptTarget::Object { shape, .. } => {
                let bg_class = BgClass::ALL[rng.gen_range(0..4)];
                let obj = sample_object(&mut rng, *shape, StyleId::Concept(id.to_string()), &[], None)
                .ok_or_else(|| CoreError::Validation("failed to place concept object".into()))?;
                Ok(SceneSpec {
                    objects: vec![obj],
                    background: BgSpec { class: bg_class, style: StyleId::Generic },
                })
            }
            ConceptTarget::Background { program } => {
                // a styled background scene still contains one generic object
                let shape = ShapeClass::ALL[rng.gen_range(0..4)];
                let obj = sample_object(&mut rng, shape, StyleId::Generic, &[], None)
                    .ok_or_else(|| CoreError::Validation("failed to place object".into()))?;
                Ok(SceneSpec {
                    objects: vec![obj],
                    background: BgSpec {
                        class: program.pattern.class(),
                        style: StyleId::Concept(id.to_string()),
                    },
                })
            }
        }
    }

    /// Apply an explicit scale/translation to every object. Returns None when
    /// the transformed spec violates scene invariants.
    pub fn try_augment(
        &self,
        scene: &LabeledScene,
        scale: f64,
        translate: (f64, f64),
    ) -> Option<LabeledScene> {
        let mut spec = scene.spec.clone();
        for obj in &mut spec.objects {
            obj.radius *= scale;
            obj.center.0 += translate.0;
            obj.center.1 += translate.1;
        }
        if spec.validate().is_err() {
            return None;
        }
        self.render_scene(&spec, scene.seed).ok()
    }

    /// Randomly rescale (factor in [0.5, 1.4]) and translate the scene,
    /// re-rendering so masks stay exact. Prompt is unchanged. Resamples
    /// internally until the transform keeps every object in frame.
    pub fn augment(&self, scene: &LabeledScene, seed: u64) -> Result<LabeledScene> {
        let mut rng = split_rng(seed, "augment", 0);
        for _ in 0..400 {
            let scale = sample_valid_scale(&mut rng, &scene.spec);
            let translate = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            if let Some(mut out) = self.try_augment(scene, scale, translate) {
                out.prompt = scene.prompt.clone();
                return Ok(out);
            }
        }
        Err(CoreError::Validation("augmentation could not find a valid transform".into()))
    }
}

/// Scale factor in [0.5, 1.4] clipped so every radius stays within the
/// renderable range; the position constraint is handled by resampling.
fn sample_valid_scale(rng: &mut Prng, spec: &SceneSpec) -> f64 {
    let rmin = spec.objects.iter().map(|o| o.radius).fold(f64::INFINITY, f64::min);
    let rmax = spec.objects.iter().map(|o| o.radius).fold(0.0, f64::max);
    let lo = (MIN_RADIUS / rmin).max(0.5);
    let hi = (MAX_RADIUS / rmax).min(1.4);
    if lo >= hi {
        return 1.0;
    }
    rng.gen_range(lo..hi)
}

// ---------------------------------------------------------------------------
// Persistence: PNG image + JSON sidecar with spec, prompt, and RLE masks.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub spec: SceneSpec,
    pub seed: u64,
    pub prompt_tokens: Vec<u16>,
    pub mask_rle: Vec<Vec<u32>>,
    pub height: usize,
    pub width: usize,
}

/// Run-length encode a binary mask in row-major order, starting with the
/// run length of zeros.
pub fn rle_encode(mask: &Array2<u8>) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0u32;
    for &v in mask.iter() {
        let v = (v != 0) as u8;
        if v == current {
            count += 1;
        } else {
            runs.push(count);
            current = v;
            count = 1;
        }
    }
    runs.push(count);
    runs
}

pub fn rle_decode(runs: &[u32], h: usize, w: usize) -> Result<Array2<u8>> {
    let total: u32 = runs.iter().sum();
    if total as usize != h * w {
        return Err(CoreError::Validation(format!(
            "rle length {total} != {h}x{w} pixels"
        )));
    }
    let mut flat = Vec::with_capacity(h * w);
    let mut value = 0u8;
    for &run in runs {
        flat.extend(std::iter::repeat(value).take(run as usize));
        value ^= 1;
    }
    Ok(Array2::from_shape_vec((h, w), flat).unwrap())
}

pub fn save_scene(scene: &LabeledScene, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let (h, w) = (scene.image.shape()[1], scene.image.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                unit_to_u8(scene.image[[0, y, x]]),
                unit_to_u8(scene.image[[1, y, x]]),
                unit_to_u8(scene.image[[2, y, x]]),
            ]);
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    let img_path = dir.join(format!("{stem}.png"));
    buf.save(&img_path)
        .map_err(|e| CoreError::format(&img_path, format!("png encode: {e}")))?;
    let sidecar = SceneSidecar {
        spec: scene.spec.clone(),
        seed: scene.seed,
        prompt_tokens: scene.prompt.tokens().to_vec(),
        mask_rle: scene.gt_masks.iter().map(rle_encode).collect(),
        height: h,
        width: w,
    };
    let meta_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| CoreError::format(&meta_path, e.to_string()))?;
    std::fs::write(&meta_path, text).map_err(|e| CoreError::io(&meta_path, e))?;
    Ok(())
}

pub fn load_scene(dir: &Path, stem: &str) -> Result<LabeledScene> {
    let img_path = dir.join(format!("{stem}.png"));
    let meta_path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
    let sidecar: SceneSidecar = serde_json::from_str(&text)
        .map_err(|e| CoreError::format(&meta_path, e.to_string()))?;
    let img = image::open(&img_path)
        .map_err(|e| CoreError::format(&img_path, format!("png decode: {e}")))?
        .to_rgb8();
    let (h, w) = (sidecar.height, sidecar.width);
    if img.height() as usize != h || img.width() as usize != w {
        return Err(CoreError::format(&img_path, "image dimensions disagree with sidecar"));
    }
    let mut image_t = ndarray::Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                image_t[[c, y, x]] = crate::tensor::u8_to_unit(px.0[c]);
            }
        }
    }
    let gt_masks = sidecar
        .mask_rle
        .iter()
        .map(|runs| rle_decode(runs, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledScene {
        image: image_t,
        prompt: crate::vocab::PromptTokens::new(sidecar.prompt_tokens)?,
        gt_masks,
        spec: sidecar.spec,
        seed: sidecar.seed,
    })
}
