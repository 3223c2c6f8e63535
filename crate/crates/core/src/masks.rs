//! Concept region masks: segmentation of a template (ground truth when the
//! template came from the renderer, a classical color/shape segmenter
//! otherwise), square-kernel dilation with dense-mask overlap resolution,
//! background complement, per-resolution pyramid, and template filtering.

use crate::error::{CoreError, Result};
use crate::scene::{LabeledScene, ShapeClass};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One segmentation attempt per requested concept word.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmentResult {
    Found(Array2<u8>),
    NotFound { word: ShapeClass },
}

impl SegmentResult {
    pub fn mask(&self) -> Option<&Array2<u8>> {
        match self {
            SegmentResult::Found(m) => Some(m),
            SegmentResult::NotFound { .. } => None,
        }
    }
}

/// Region masks forming a pixel partition, with per-resolution copies.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// Ownership masks M_1..M_N after dilation and overlap resolution.
    pub concept_masks: Vec<Array2<u8>>,
    /// Complement of the union of concept masks.
    pub background: Array2<u8>,
    /// Pre-dilation originals.
    pub dense_masks: Vec<Array2<u8>>,
    /// resolution -> [concept 0.., background], real-valued, summing to one
    /// at every pixel.
    pub pyramid: BTreeMap<usize, Vec<Array2<f64>>>,
    pub kernel: usize,
}

/// Kernel scales with resolution from the 21x21 reference at 768^2,
/// rounded to odd and floored at 3 (gives 3 at 32x32).
pub fn default_kernel(height: usize) -> usize {
    let k = (21.0 * height as f64 / 768.0).round() as usize;
    let k = if k % 2 == 0 { k + 1 } else { k };
    k.max(3)
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Per-concept dense masks for a template image. With ground truth the masks
/// are the exact rasterizations; otherwise a deterministic classical
/// segmenter runs: saturation thresholding, morphological closing, connected
/// components, and shape-class assignment by bounding-box extent.
pub fn segment_concepts(
    template: &Array3<f64>,
    concept_words: &[ShapeClass],
    gt: Option<&LabeledScene>,
) -> Result<Vec<SegmentResult>> {
    if concept_words.is_empty() {
        return Err(CoreError::Validation("segment_concepts requires at least one word".into()));
    }
    match gt {
        Some(scene) => {
            let mut used = vec![false; scene.spec.objects.len()];
            Ok(concept_words
                .iter()
                .map(|word| {
                    for (i, obj) in scene.spec.objects.iter().enumerate() {
                        if !used[i] && obj.shape == *word {
                            used[i] = true;
                            return SegmentResult::Found(scene.gt_masks[i].clone());
                        }
                    }
                    SegmentResult::NotFound { word: *word }
                })
                .collect())
        }
        None => classical_segment(template, concept_words),
    }
}

/// Expected area / bbox-area ratio per shape class (axis-aligned rendering).
fn class_extent(word: ShapeClass) -> f64 {
    match word {
        ShapeClass::Circle => std::f64::consts::FRAC_PI_4, // 0.785
        ShapeClass::Square => 1.0,
        ShapeClass::Triangle => 0.5,
        ShapeClass::Star => 0.36,
    }
}

struct Component {
    mask: Array2<u8>,
    area: usize,
    extent: f64,
}

fn classical_segment(
    template: &Array3<f64>,
    concept_words: &[ShapeClass],
) -> Result<Vec<SegmentResult>> {
    let (h, w) = (template.shape()[1], template.shape()[2]);
    // objectness: saturated pixels (object palette) vs muted backgrounds
    let mut fg = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let r = template[[0, y, x]];
            let g = template[[1, y, x]];
            let b = template[[2, y, x]];
            let mx = r.max(g).max(b);
            let mn = r.min(g).min(b);
            if mx - mn > 0.55 {
                fg[[y, x]] = 1;
            }
        }
    }
    let fg = close3(&fg);
    let comps = connected_components(&fg, 10);

    // greedy assignment by best extent match across all (word, component)
    let mut results: Vec<Option<SegmentResult>> = vec![None; concept_words.len()];
    let mut taken = vec![false; comps.len()];
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (wi, word) in concept_words.iter().enumerate() {
        for (ci, comp) in comps.iter().enumerate() {
            let score = (comp.extent - class_extent(*word)).abs();
            pairs.push((score, wi, ci));
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (_, wi, ci) in pairs {
        if results[wi].is_none() && !taken[ci] {
            results[wi] = Some(SegmentResult::Found(comps[ci].mask.clone()));
            taken[ci] = true;
        }
    }
    Ok(results
        .into_iter()
        .enumerate()
        .map(|(wi, r)| r.unwrap_or(SegmentResult::NotFound { word: concept_words[wi] }))
        .collect())
}

/// 3x3 morphological closing (dilate then erode).
fn close3(mask: &Array2<u8>) -> Array2<u8> {
    let dil = dilate(mask, 3);
    erode(&dil, 3)
}

/// Square-kernel binary dilation, clipped at borders.
pub fn dilate(mask: &Array2<u8>, kernel: usize) -> Array2<u8> {
    debug_assert!(kernel % 2 == 1);
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let r = (kernel / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy >= 0
                        && sy < h as isize
                        && sx >= 0
                        && sx < w as isize
                        && mask[[sy as usize, sx as usize]] != 0
                    {
                        out[[y as usize, x as usize]] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

fn erode(mask: &Array2<u8>, kernel: usize) -> Array2<u8> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let r = (kernel / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut all = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy < 0
                        || sy >= h as isize
                        || sx < 0
                        || sx >= w as isize
                        || mask[[sy as usize, sx as usize]] == 0
                    {
                        all = false;
                        break 'scan;
                    }
                }
            }
            if all {
                out[[y as usize, x as usize]] = 1;
            }
        }
    }
    out
}

fn connected_components(mask: &Array2<u8>, min_area: usize) -> Vec<Component> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut labels = Array2::<i32>::from_elem((h, w), -1);
    let mut comps = Vec::new();
    let mut next = 0i32;
    for sy in 0..h {
        for sx in 0..w {
            if mask[[sy, sx]] == 0 || labels[[sy, sx]] >= 0 {
                continue;
            }
            // BFS flood fill, 4-connectivity
            let mut queue = vec![(sy, sx)];
            labels[[sy, sx]] = next;
            let mut pixels = Vec::new();
            while let Some((y, x)) = queue.pop() {
                pixels.push((y, x));
                let neighbors =
                    [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && mask[[ny, nx]] != 0 && labels[[ny, nx]] < 0 {
                        labels[[ny, nx]] = next;
                        queue.push((ny, nx));
                    }
                }
            }
            next += 1;
            if pixels.len() < min_area {
                continue;
            }
            let mut m = Array2::zeros((h, w));
            let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
            for &(y, x) in &pixels {
                m[[y, x]] = 1;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
            let bbox_area = (y1 - y0 + 1) * (x1 - x0 + 1);
            comps.push(Component {
                mask: m,
                area: pixels.len(),
                extent: pixels.len() as f64 / bbox_area as f64,
            });
        }
    }
    comps.sort_by(|a, b| b.area.cmp(&a.area));
    comps
}

// ---------------------------------------------------------------------------
// Mask set construction
// ---------------------------------------------------------------------------

/// Dilate dense masks and resolve contested pixels: where two or more
/// dilated masks overlap, ownership reverts to the dense masks (a pixel
/// dense in exactly one mask goes to it); remaining contested pixels go to
/// the lowest concept index. The background is the complement, and pyramid
/// levels are box-averaged then renormalized so the partition holds at
/// every resolution.
pub fn build_mask_set(
    dense: &[Array2<u8>],
    kernel: usize,
    resolutions: &[usize],
    rectangular: bool,
) -> Result<MaskSet> {
    if dense.is_empty() {
        return Err(CoreError::Validation("build_mask_set requires at least one mask".into()));
    }
    if kernel % 2 == 0 {
        return Err(CoreError::Validation(format!("kernel {kernel} must be odd and >= 1")));
    }
    let (h, w) = (dense[0].shape()[0], dense[0].shape()[1]);
    for (i, m) in dense.iter().enumerate() {
        if m.shape() != dense[0].shape() {
            return Err(CoreError::Shape(format!("dense mask {i} shape differs")));
        }
        if m.iter().all(|&v| v == 0) {
            return Err(CoreError::Validation(format!(
                "dense mask {i} is empty (should have been filtered)"
            )));
        }
    }
    let effective: Vec<Array2<u8>> =
        if rectangular { dense.iter().map(bbox_fill).collect() } else { dense.to_vec() };
    let dilated: Vec<Array2<u8>> = effective.iter().map(|m| dilate(m, kernel)).collect();

    let n = dense.len();
    let mut owners = Array2::<i32>::from_elem((h, w), -1);
    for y in 0..h {
        for x in 0..w {
            let in_dilated: Vec<usize> = (0..n).filter(|&i| dilated[i][[y, x]] != 0).collect();
            match in_dilated.len() {
                0 => {}
                1 => owners[[y, x]] = in_dilated[0] as i32,
                _ => {
                    let in_dense: Vec<usize> = in_dilated
                        .iter()
                        .copied()
                        .filter(|&i| effective[i][[y, x]] != 0)
                        .collect();
                    owners[[y, x]] = match in_dense.as_slice() {
                        [] => in_dilated[0] as i32,
                        rest => rest[0] as i32,
                    };
                }
            }
        }
    }
    let mut concept_masks = vec![Array2::<u8>::zeros((h, w)); n];
    let mut background = Array2::<u8>::ones((h, w));
    for y in 0..h {
        for x in 0..w {
            let o = owners[[y, x]];
            if o >= 0 {
                concept_masks[o as usize][[y, x]] = 1;
                background[[y, x]] = 0;
            }
        }
    }

    let mut pyramid = BTreeMap::new();
    for &res in resolutions {
        let mut level: Vec<Array2<f64>> = concept_masks
            .iter()
            .chain(std::iter::once(&background))
            .map(|m| box_average(m, res))
            .collect();
        // renormalize pixelwise so the partition is exact at this level
        for y in 0..res {
            for x in 0..res {
                let total: f64 = level.iter().map(|m| m[[y, x]]).sum();
                if total > 0.0 {
                    for m in level.iter_mut() {
                        m[[y, x]] /= total;
                    }
                }
            }
        }
        pyramid.insert(res, level);
    }

    Ok(MaskSet { concept_masks, background, dense_masks: dense.to_vec(), pyramid, kernel })
}

fn bbox_fill(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    let mut out = Array2::zeros((h, w));
    if y0 <= y1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                out[[y, x]] = 1;
            }
        }
    }
    out
}

fn box_average(mask: &Array2<u8>, res: usize) -> Array2<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    debug_assert!(h % res == 0 && w % res == 0, "resolution must divide mask size");
    let (by, bx) = (h / res, w / res);
    let mut out = Array2::zeros((res, res));
    for y in 0..res {
        for x in 0..res {
            let mut sum = 0.0;
            for dy in 0..by {
                for dx in 0..bx {
                    sum += mask[[y * by + dy, x * bx + dx]] as f64;
                }
            }
            out[[y, x]] = sum / (by * bx) as f64;
        }
    }
    out
}

impl MaskSet {
    /// Flattened per-position weights at a resolution: concepts then bg,
    /// each of length res*res.
    pub fn flat_weights(&self, res: usize) -> Result<Vec<Vec<f64>>> {
        let level = self
            .pyramid
            .get(&res)
            .ok_or_else(|| CoreError::Validation(format!("no pyramid level at {res}")))?;
        Ok(level.iter().map(|m| m.iter().cloned().collect()).collect())
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_masks.len()
    }

    /// Check the partition invariant at full resolution and every level.
    pub fn verify_partition(&self) -> Result<()> {
        let (h, w) = (self.background.shape()[0], self.background.shape()[1]);
        for y in 0..h {
            for x in 0..w {
                let s: u32 = self.concept_masks.iter().map(|m| m[[y, x]] as u32).sum::<u32>()
                    + self.background[[y, x]] as u32;
                if s != 1 {
                    return Err(CoreError::Validation(format!(
                        "partition violated at ({y},{x}): sum {s}"
                    )));
                }
            }
        }
        for (res, level) in &self.pyramid {
            for y in 0..*res {
                for x in 0..*res {
                    let s: f64 = level.iter().map(|m| m[[y, x]]).sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(CoreError::Validation(format!(
                            "pyramid partition violated at {res}:({y},{x}): sum {s}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Template filtering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum RejectReason {
    MaskNotFound { word: String },
    MaskOverlap { i: usize, j: usize, ratio: f64 },
    LowProbeScore { score: f64, threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Template filter: reject when a concept mask was not found, when a dense
/// pair overlaps more than `overlap_threshold` of the smaller mask
/// (strictly greater), or when a supplied probe score falls below
/// `probe_threshold`. Total function: always returns a verdict.
pub fn filter_template(
    seg: &[SegmentResult],
    probe_score: Option<f64>,
    overlap_threshold: f64,
    probe_threshold: f64,
) -> Verdict {
    for r in seg {
        if let SegmentResult::NotFound { word } = r {
            return Verdict::Reject(RejectReason::MaskNotFound { word: format!("{word:?}") });
        }
    }
    let masks: Vec<&Array2<u8>> = seg.iter().filter_map(|r| r.mask()).collect();
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let mut inter = 0usize;
            let mut a = 0usize;
            let mut b = 0usize;
            for (x, y) in masks[i].iter().zip(masks[j].iter()) {
                a += (*x != 0) as usize;
                b += (*y != 0) as usize;
                inter += (*x != 0 && *y != 0) as usize;
            }
            let min_area = a.min(b);
            if min_area == 0 {
                continue;
            }
            let ratio = inter as f64 / min_area as f64;
            if inter as f64 > overlap_threshold * min_area as f64 {
                return Verdict::Reject(RejectReason::MaskOverlap { i, j, ratio });
            }
        }
    }
    if let Some(score) = probe_score {
        if score < probe_threshold {
            return Verdict::Reject(RejectReason::LowProbeScore {
                score,
                threshold: probe_threshold,
            });
        }
    }
    Verdict::Accept
}

// ---------------------------------------------------------------------------
// Persistence: RLE masks + manifest. The pyramid is recomputed on load.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskSetFile {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub resolutions: Vec<usize>,
    pub dense_rle: Vec<Vec<u32>>,
    pub concept_rle: Vec<Vec<u32>>,
    pub background_rle: Vec<u32>,
}

pub fn save_mask_set(path: &Path, masks: &MaskSet) -> Result<()> {
    let (h, w) = (masks.background.shape()[0], masks.background.shape()[1]);
    let file = MaskSetFile {
        height: h,
        width: w,
        kernel: masks.kernel,
        resolutions: masks.pyramid.keys().copied().collect(),
        dense_rle: masks.dense_masks.iter().map(crate::dataset::rle_encode).collect(),
        concept_rle: masks.concept_masks.iter().map(crate::dataset::rle_encode).collect(),
        background_rle: crate::dataset::rle_encode(&masks.background),
    };
    let text =
        serde_json::to_string_pretty(&file).map_err(|e| CoreError::format(path, e.to_string()))?;
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, text).map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn load_mask_set(path: &Path) -> Result<MaskSet> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let file: MaskSetFile =
        serde_json::from_str(&text).map_err(|e| CoreError::format(path, e.to_string()))?;
    let dense = file
        .dense_rle
        .iter()
        .map(|r| crate::dataset::rle_decode(r, file.height, file.width))
        .collect::<Result<Vec<_>>>()?;
    build_mask_set(&dense, file.kernel, &file.resolutions, false)
}
