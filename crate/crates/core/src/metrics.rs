//! Alignment metrics over generated images, scored by the concept probe:
//! image alignment on re-segmented concept regions (region crops), and text
//! alignment as the fraction of prompted elements detected by a sliding
//! crop grid.

use crate::error::Result;
use crate::masks::{segment_concepts, SegmentResult};
use crate::probe::{crop_mask_region, crop_window, ConceptProbe, ProbeClass};
use crate::scene::{BgClass, ConceptRegistry, ConceptTarget, ShapeClass};
use crate::vocab::{self, PromptTokens};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Per-concept region scores for one generated image. Rows with a missing
/// foreground concept are flagged and excluded from aggregate means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// (concept id, probability of the concept's own style class).
    pub per_concept: Vec<(String, Option<f64>)>,
    pub missing: Vec<String>,
    /// Mean over scored concepts; None when any foreground concept is missing.
    pub image_align: Option<f64>,
}

/// Image alignment per the region-cropping protocol: re-segment the
/// generated image (never the template's masks), crop each concept's
/// bounding rectangle, and read the probe's probability for that concept's
/// style class. Background concepts are scored on windows inside the
/// complement of the found foreground masks.
pub fn image_alignment(
    image: &Array3<f64>,
    probe: &ConceptProbe,
    registry: &ConceptRegistry,
    concept_ids: &[String],
    bg_id: Option<&str>,
) -> Result<AlignmentReport> {
    let mut words = Vec::new();
    for id in concept_ids {
        match &registry.require(id)?.target {
            ConceptTarget::Object { shape, .. } => words.push(*shape),
            ConceptTarget::Background { .. } => {
                return Err(crate::error::CoreError::Validation(format!(
                    "concept {id:?} is a background style; pass it as bg_id"
                )))
            }
        }
    }
    let seg = if words.is_empty() { Vec::new() } else { segment_concepts(image, &words, None)? };

    let mut per_concept = Vec::new();
    let mut missing = Vec::new();
    for (i, id) in concept_ids.iter().enumerate() {
        match seg[i].mask() {
            Some(mask) => {
                let crop = crop_mask_region(image, mask, 2).expect("non-empty mask");
                let score = probe
                    .prob_of(&crop, &ProbeClass::Concept(id.clone()))
                    .unwrap_or(0.0);
                per_concept.push((id.clone(), Some(score)));
            }
            None => {
                per_concept.push((id.clone(), None));
                missing.push(id.clone());
            }
        }
    }

    if let Some(bg) = bg_id {
        let found: Vec<&Array2<u8>> = seg.iter().filter_map(|r| r.mask()).collect();
        let score = bg_region_score(image, probe, &ProbeClass::Concept(bg.to_string()), &found);
        match score {
            Some(s) => per_concept.push((bg.to_string(), Some(s))),
            None => {
                per_concept.push((bg.to_string(), None));
                missing.push(bg.to_string());
            }
        }
    }

    let image_align = if missing.iter().any(|m| concept_ids.contains(m)) {
        // the paper's protocol: no score when a foreground concept is absent
        None
    } else {
        let scores: Vec<f64> = per_concept.iter().filter_map(|(_, s)| *s).collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    };
    Ok(AlignmentReport { per_concept, missing, image_align })
}

/// Mean probe probability over windows that avoid the foreground masks.
fn bg_region_score(
    image: &Array3<f64>,
    probe: &ConceptProbe,
    class: &ProbeClass,
    exclude: &[&Array2<u8>],
) -> Option<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let size = 14.min(h);
    let stride = 6;
    let mut scores = Vec::new();
    let mut y0 = 0;
    while y0 + size <= h {
        let mut x0 = 0;
        while x0 + size <= w {
            let mut obj = 0usize;
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    if exclude.iter().any(|m| m[[y, x]] != 0) {
                        obj += 1;
                    }
                }
            }
            if obj * 10 <= size * size {
                let crop = crop_window(image, y0, x0, size);
                if let Some(p) = probe.prob_of(&crop, class) {
                    scores.push(p);
                }
            }
            x0 += stride;
        }
        y0 += stride;
    }
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// Expected elements of a prompt: one entry per shape-word occurrence plus
/// the background class when a background word is present.
pub fn prompt_elements(prompt: &PromptTokens) -> (Vec<ShapeClass>, Option<BgClass>) {
    let mut shapes = Vec::new();
    let mut bg = None;
    for &tok in prompt.tokens() {
        if vocab::is_shape_word(tok) {
            let idx = ShapeClass::ALL
                .iter()
                .position(|s| s.token() == tok)
                .expect("shape token maps to a class");
            shapes.push(ShapeClass::ALL[idx]);
        } else if vocab::is_bg_word(tok) {
            let idx = BgClass::ALL
                .iter()
                .position(|b| b.token() == tok)
                .expect("bg token maps to a class");
            bg = Some(BgClass::ALL[idx]);
        }
    }
    (shapes, bg)
}

/// Text alignment: the fraction of prompted shape classes and background
/// class detected anywhere in the image by the probe over a sliding crop
/// grid. Not comparable to any external similarity scale.
pub fn text_alignment(
    image: &Array3<f64>,
    prompt: &PromptTokens,
    probe: &ConceptProbe,
    registry: &ConceptRegistry,
) -> f64 {
    let (shapes, bg) = prompt_elements(prompt);
    let expected = shapes.len() + bg.is_some() as usize;
    if expected == 0 {
        return 1.0;
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let stride = 4;
    // classify a multi-scale sliding grid once
    let mut window_hits: Vec<(usize, f64)> = Vec::new();
    for size in [16usize, 20, 24] {
        let size = size.min(h);
        let mut y0 = 0;
        while y0 + size <= h {
            let mut x0 = 0;
            while x0 + size <= w {
                let crop = crop_window(image, y0, x0, size);
                let (arg, probs) = probe.classify(&crop);
                window_hits.push((arg, probs[arg]));
                x0 += stride;
            }
            y0 += stride;
        }
    }

    let class_matches_shape = |class: &ProbeClass, shape: ShapeClass| -> bool {
        match class {
            ProbeClass::GenericShape(s) => *s == shape,
            ProbeClass::Concept(id) => matches!(
                registry.get(id).map(|d| &d.target),
                Some(ConceptTarget::Object { shape: s, .. }) if *s == shape
            ),
            _ => false,
        }
    };
    let class_matches_bg = |class: &ProbeClass, bgc: BgClass| -> bool {
        match class {
            ProbeClass::GenericBg(b) => *b == bgc,
            ProbeClass::Concept(id) => matches!(
                registry.get(id).map(|d| &d.target),
                Some(ConceptTarget::Background { program }) if program.pattern.class() == bgc
            ),
            _ => false,
        }
    };

    let mut detected = 0usize;
    // each prompted shape occurrence needs its own supporting window
    let mut used_windows = vec![false; window_hits.len()];
    for shape in &shapes {
        let hit = window_hits.iter().enumerate().find(|(wi, (arg, p))| {
            !used_windows[*wi]
                && class_matches_shape(&probe.classes[*arg], *shape)
                && *p >= probe.thresholds[*arg]
        });
        if let Some((wi, _)) = hit {
            used_windows[wi] = true;
            detected += 1;
        }
    }
    if let Some(bgc) = bg {
        let hit = window_hits.iter().any(|(arg, p)| {
            class_matches_bg(&probe.classes[*arg], bgc) && *p >= probe.thresholds[*arg]
        });
        if hit {
            detected += 1;
        }
    }
    detected as f64 / expected as f64
}

/// One benchmark result row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub combination: String,
    pub prompt_index: usize,
    pub seed: u64,
    pub mode: String,
    pub accepted: bool,
    pub reject_reason: Option<String>,
    pub text_align: Option<f64>,
    pub image_align: Option<f64>,
    pub per_concept: Vec<(String, Option<f64>)>,
    pub missing: Vec<String>,
    /// Every foreground region classified as its own concept (argmax).
    pub all_regions_correct: Option<bool>,
}

/// Strict region check used by the concept-fidelity criterion: every
/// foreground concept's re-segmented crop must classify (argmax) as that
/// concept's style class.
pub fn regions_correct(
    image: &Array3<f64>,
    probe: &ConceptProbe,
    registry: &ConceptRegistry,
    concept_ids: &[String],
) -> Result<bool> {
    let mut words = Vec::new();
    for id in concept_ids {
        if let ConceptTarget::Object { shape, .. } = &registry.require(id)?.target {
            words.push(*shape);
        }
    }
    if words.is_empty() {
        return Ok(true);
    }
    let seg = segment_concepts(image, &words, None)?;
    for (i, id) in concept_ids.iter().enumerate() {
        let Some(mask) = seg.get(i).and_then(|r| r.mask()) else {
            return Ok(false);
        };
        let crop = crop_mask_region(image, mask, 2).expect("non-empty mask");
        let (arg, _) = probe.classify(&crop);
        if probe.classes[arg] != ProbeClass::Concept(id.clone()) {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn seg_to_masks(seg: &[SegmentResult]) -> Vec<Array2<u8>> {
    seg.iter().filter_map(|r| r.mask().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetKind;
    use crate::probe::{train_probe, ProbeTrainConfig};
    use crate::scene::{BgSpec, ObjectSpec, SceneDomain, SceneSpec, StyleId};
    use crate::vocab::{bg_token, filler_token, shape_token};
    use once_cell::sync::Lazy;

    static FIXTURE: Lazy<(SceneDomain, ConceptProbe)> = Lazy::new(|| {
        let domain = SceneDomain::new(ConceptRegistry::standard());
        let cfg = ProbeTrainConfig {
            crops_per_class: 200,
            steps: 1200,
            min_holdout_accuracy: 0.92,
            ..ProbeTrainConfig::default()
        };
        let probe = train_probe(&domain, &cfg, 77).unwrap();
        (domain, probe)
    });

    #[test]
    fn perfect_scene_text_alignment_is_one() {
        let (domain, probe) = &*FIXTURE;
        let scenes = domain.make_dataset(DatasetKind::Base, None, 12, 31).unwrap();
        let mut ok = 0;
        let mut total = 0;
        for scene in &scenes {
            let score = text_alignment(&scene.image, &scene.prompt, probe, &domain.registry);
            total += 1;
            if score == 1.0 {
                ok += 1;
            }
        }
        // rendered scenes contain exactly their prompted elements
        assert!(ok * 10 >= total * 8, "only {ok}/{total} scenes scored 1.0");
    }

    #[test]
    fn blank_image_text_alignment_is_zero() {
        let (domain, probe) = &*FIXTURE;
        let blank = Array3::from_elem((3, 32, 32), 0.0);
        let prompt = PromptTokens::new(vec![
            filler_token("a"),
            shape_token(0),
            filler_token("on"),
            bg_token(0),
        ])
        .unwrap();
        let score = text_alignment(&blank, &prompt, probe, &domain.registry);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn erased_object_halves_two_element_score() {
        let (domain, probe) = &*FIXTURE;
        // scene with two objects, prompt mentioning only the two shapes
        let spec = SceneSpec {
            objects: vec![
                ObjectSpec {
                    shape: ShapeClass::Circle,
                    style: StyleId::Generic,
                    center: (0.27, 0.3),
                    radius: 0.18,
                },
                ObjectSpec {
                    shape: ShapeClass::Triangle,
                    style: StyleId::Generic,
                    center: (0.72, 0.7),
                    radius: 0.18,
                },
            ],
            background: BgSpec { class: BgClass::Plain, style: StyleId::Generic },
        };
        let scene = domain.render_scene(&spec, 4242).unwrap();
        let prompt = PromptTokens::new(vec![
            filler_token("a"),
            shape_token(0),
            filler_token("and"),
            filler_token("a"),
            shape_token(2),
        ])
        .unwrap();
        let full = text_alignment(&scene.image, &prompt, probe, &domain.registry);
        assert_eq!(full, 1.0, "both objects should be detected");
        // erase the triangle by painting background color over it
        let mut erased = scene.image.clone();
        for y in 0..32 {
            for x in 0..32 {
                if scene.gt_masks[1][[y, x]] != 0 {
                    for c in 0..3 {
                        erased[[c, y, x]] = erased[[c, 0, 0]];
                    }
                }
            }
        }
        let half = text_alignment(&erased, &prompt, probe, &domain.registry);
        assert_eq!(half, 0.5, "one of two objects erased");
    }

    #[test]
    fn image_alignment_on_rendered_concepts() {
        let (domain, probe) = &*FIXTURE;
        // a scene containing both object concepts
        let spec = SceneSpec {
            objects: vec![
                ObjectSpec {
                    shape: ShapeClass::Circle,
                    style: StyleId::Concept("ring-circle".into()),
                    center: (0.27, 0.3),
                    radius: 0.2,
                },
                ObjectSpec {
                    shape: ShapeClass::Square,
                    style: StyleId::Concept("checker-square".into()),
                    center: (0.72, 0.7),
                    radius: 0.2,
                },
            ],
            background: BgSpec {
                class: BgClass::Stripes,
                style: StyleId::Concept("diag-stripes".into()),
            },
        };
        let scene = domain.render_scene(&spec, 99).unwrap();
        let ids = vec!["ring-circle".to_string(), "checker-square".to_string()];
        let report =
            image_alignment(&scene.image, probe, &domain.registry, &ids, Some("diag-stripes"))
                .unwrap();
        assert!(report.missing.is_empty(), "missing: {:?}", report.missing);
        let align = report.image_align.unwrap();
        assert!(align > 0.6, "alignment {align:.3} too low on a perfect render");
        // per-concept scores beat their calibrated thresholds
        for (id, score) in &report.per_concept {
            let ci = probe.class_index(&ProbeClass::Concept(id.clone())).unwrap();
            assert!(
                score.unwrap() >= probe.thresholds[ci] * 0.8,
                "{id} scored {:.3}",
                score.unwrap()
            );
        }
        // strict region check agrees
        assert!(regions_correct(&scene.image, probe, &domain.registry, &ids).unwrap());
    }

    #[test]
    fn wrong_concept_scores_low() {
        let (domain, probe) = &*FIXTURE;
        // a checker-square scene queried as ring-circle
        let spec = SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeClass::Square,
                style: StyleId::Concept("checker-square".into()),
                center: (0.5, 0.5),
                radius: 0.22,
            }],
            background: BgSpec { class: BgClass::Plain, style: StyleId::Generic },
        };
        let scene = domain.render_scene(&spec, 7).unwrap();
        let crop = crop_mask_region(&scene.image, &scene.gt_masks[0], 2).unwrap();
        let wrong = probe
            .prob_of(&crop, &ProbeClass::Concept("ring-circle".into()))
            .unwrap();
        let ci = probe.class_index(&ProbeClass::Concept("ring-circle".into())).unwrap();
        assert!(
            wrong < probe.thresholds[ci],
            "cross-concept crop scored {wrong:.3}, threshold {}",
            probe.thresholds[ci]
        );
    }

    #[test]
    fn crop_robustness_loose_vs_tight_mask() {
        let (domain, probe) = &*FIXTURE;
        let spec = SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeClass::Circle,
                style: StyleId::Concept("ring-circle".into()),
                center: (0.5, 0.5),
                radius: 0.26,
            }],
            background: BgSpec { class: BgClass::Plain, style: StyleId::Generic },
        };
        let scene = domain.render_scene(&spec, 13).unwrap();
        let tight = crop_mask_region(&scene.image, &scene.gt_masks[0], 1).unwrap();
        let whole = Array2::<u8>::ones((32, 32));
        let loose = crop_mask_region(&scene.image, &whole, 0).unwrap();
        let class = ProbeClass::Concept("ring-circle".into());
        let a = probe.prob_of(&tight, &class).unwrap();
        let b = probe.prob_of(&loose, &class).unwrap();
        assert!((a - b).abs() <= 0.25, "tight {a:.3} vs whole-image {b:.3} diverge");
        let _ = domain;
    }

    #[test]
    fn missing_concept_flags_row() {
        let (domain, probe) = &*FIXTURE;
        // plain background only; the queried concept cannot be found
        let img = Array3::from_elem((3, 32, 32), -0.2);
        let ids = vec!["ring-circle".to_string()];
        let report = image_alignment(&img, probe, &domain.registry, &ids, None).unwrap();
        assert_eq!(report.missing, ids);
        assert!(report.image_align.is_none());
    }
}
