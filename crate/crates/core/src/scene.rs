//! Procedural toy image domain: styled shapes on styled backgrounds, with
//! exact ground-truth masks and tokenized prompts. All rendering is
//! deterministic in (spec, seed) and quantized to the u8 grid so PNG
//! persistence is lossless.

use crate::error::{CoreError, Result};
use crate::rng::{split_rng, Prng};
use crate::tensor::u8_to_unit;
use crate::vocab::{
    bg_token, color_token, filler_token, modifier_token, shape_token, PromptTokens,
};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const IMG_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Star,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] =
        [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle, ShapeClass::Star];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }

    pub fn token(self) -> u16 {
        shape_token(self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgClass {
    Plain,
    Stripes,
    Dots,
    Gradient,
}

impl BgClass {
    pub const ALL: [BgClass; 4] =
        [BgClass::Plain, BgClass::Stripes, BgClass::Dots, BgClass::Gradient];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }

    pub fn token(self) -> u16 {
        bg_token(self.index())
    }
}

/// Style reference: either seeded generic styling or a named bank concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleId {
    Generic,
    Concept(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeClass,
    pub style: StyleId,
    /// Fractional center in [0,1]^2.
    pub center: (f64, f64),
    /// Fractional radius of the circumscribing circle, in [0.1, 0.3].
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgSpec {
    pub class: BgClass,
    pub style: StyleId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: BgSpec,
}

pub const MIN_RADIUS: f64 = 0.1;
pub const MAX_RADIUS: f64 = 0.3;
pub const MIN_CENTER_DIST: f64 = 0.1;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 4 {
            return Err(CoreError::Validation(format!(
                "scene must have 1..=4 objects, got {}",
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(MIN_RADIUS..=MAX_RADIUS).contains(&o.radius) {
                return Err(CoreError::Validation(format!(
                    "object {i} radius {} outside [{MIN_RADIUS}, {MAX_RADIUS}]",
                    o.radius
                )));
            }
            let (cx, cy) = o.center;
            if cx - o.radius < 0.0 || cx + o.radius > 1.0 || cy - o.radius < 0.0
                || cy + o.radius > 1.0
            {
                return Err(CoreError::Validation(format!(
                    "object {i} bounding box exceeds image bounds (center=({cx:.3},{cy:.3}), r={:.3})",
                    o.radius
                )));
            }
        }
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                let (ax, ay) = self.objects[i].center;
                let (bx, by) = self.objects[j].center;
                let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
                if d < MIN_CENTER_DIST {
                    return Err(CoreError::Validation(format!(
                        "objects {i} and {j} centers too close: {d:.4} < {MIN_CENTER_DIST}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub type Rgb = [u8; 3];

/// Saturated palette for objects; index order matches `vocab::COLOR_WORDS`.
pub const OBJECT_PALETTE: [Rgb; 8] = [
    [230, 40, 40],   // red
    [240, 140, 30],  // orange
    [240, 220, 40],  // yellow
    [50, 200, 60],   // green
    [40, 210, 220],  // cyan
    [50, 90, 230],   // blue
    [220, 60, 220],  // magenta
    [245, 120, 170], // pink
];

/// Muted palette for backgrounds, kept low-saturation so the classical
/// segmenter can separate objects from any background.
pub const BG_PALETTE: [Rgb; 6] = [
    [62, 62, 72],    // dark slate
    [188, 188, 194], // pale gray
    [52, 60, 84],    // dark navy
    [198, 188, 170], // pale sand
    [74, 82, 64],    // dark olive
    [172, 186, 198], // pale blue-gray
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Solid,
    Rings,
    Checker,
    Rays,
    Speckle,
}

/// Deterministic texture program for one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleProgram {
    pub pattern: Pattern,
    pub color_a: Rgb,
    pub color_b: Rgb,
}

impl StyleProgram {
    /// Color at object-local coordinates (u,v) in [-1,1]^2 (unit circumcircle).
    fn shade(&self, u: f64, v: f64) -> Rgb {
        let pick = |flag: bool| if flag { self.color_b } else { self.color_a };
        match self.pattern {
            Pattern::Solid => self.color_a,
            Pattern::Rings => {
                let rho = (u * u + v * v).sqrt();
                pick(((rho / 0.34).floor() as i64).rem_euclid(2) == 1)
            }
            Pattern::Checker => {
                let i = ((u + 1.0) / 0.5).floor() as i64;
                let j = ((v + 1.0) / 0.5).floor() as i64;
                pick((i + j).rem_euclid(2) == 1)
            }
            Pattern::Rays => {
                let theta = v.atan2(u) + std::f64::consts::PI;
                pick(((theta / (std::f64::consts::PI / 3.0)).floor() as i64).rem_euclid(2) == 1)
            }
            Pattern::Speckle => {
                let i = ((u + 1.0) / 0.4).floor() as i64;
                let j = ((v + 1.0) / 0.4).floor() as i64;
                // small integer hash, stable across platforms
                let h = (i.wrapping_mul(0x9E37_79B9) ^ j.wrapping_mul(0x85EB_CA6B))
                    .wrapping_mul(0xC2B2_AE35);
                pick((h >> 13) & 1 == 1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgPattern {
    Plain,
    HBars,
    DiagBars,
    DotsGrid,
    VGradient,
}

impl BgPattern {
    pub fn class(self) -> BgClass {
        match self {
            BgPattern::Plain => BgClass::Plain,
            BgPattern::HBars | BgPattern::DiagBars => BgClass::Stripes,
            BgPattern::DotsGrid => BgClass::Dots,
            BgPattern::VGradient => BgClass::Gradient,
        }
    }

    fn default_for(class: BgClass) -> Self {
        match class {
            BgClass::Plain => BgPattern::Plain,
            BgClass::Stripes => BgPattern::HBars,
            BgClass::Dots => BgPattern::DotsGrid,
            BgClass::Gradient => BgPattern::VGradient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgProgram {
    pub pattern: BgPattern,
    pub color_a: Rgb,
    pub color_b: Rgb,
}

impl BgProgram {
    fn shade(&self, x: usize, y: usize, h: usize) -> Rgb {
        let pick = |flag: bool| if flag { self.color_b } else { self.color_a };
        match self.pattern {
            BgPattern::Plain => self.color_a,
            BgPattern::HBars => pick((y / 4) % 2 == 1),
            BgPattern::DiagBars => pick(((x + y) / 5) % 2 == 1),
            BgPattern::DotsGrid => {
                let dx = (x % 7) as f64 - 3.0;
                let dy = (y % 7) as f64 - 3.0;
                pick(dx * dx + dy * dy <= 1.6 * 1.6)
            }
            BgPattern::VGradient => {
                let t = y as f64 / (h - 1) as f64;
                let mut c = [0u8; 3];
                for k in 0..3 {
                    c[k] = (self.color_a[k] as f64 * (1.0 - t) + self.color_b[k] as f64 * t)
                        .round() as u8;
                }
                c
            }
        }
    }
}

/// What a bank concept looks like in the toy domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptTarget {
    Object { shape: ShapeClass, program: StyleProgram },
    Background { program: BgProgram },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDef {
    pub id: String,
    /// Which reserved vocabulary slot this concept's modifier token uses.
    pub modifier_slot: usize,
    pub target: ConceptTarget,
}

impl ConceptDef {
    pub fn modifier(&self) -> u16 {
        modifier_token(self.modifier_slot)
    }

    /// Vocabulary word the modifier precedes in prompts.
    pub fn class_word(&self) -> u16 {
        match &self.target {
            ConceptTarget::Object { shape, .. } => shape.token(),
            ConceptTarget::Background { program } => program.pattern.class().token(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptRegistry {
    pub concepts: Vec<ConceptDef>,
}

impl ConceptRegistry {
    pub fn get(&self, id: &str) -> Option<&ConceptDef> {
        self.concepts.iter().find(|c| c.id == id)
    }

    pub fn require(&self, id: &str) -> Result<&ConceptDef> {
        self.get(id)
            .ok_or_else(|| CoreError::Validation(format!("unknown concept id {id:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.concepts.iter().enumerate() {
            for b in self.concepts.iter().skip(i + 1) {
                if a.id == b.id {
                    return Err(CoreError::Validation(format!("duplicate concept id {:?}", a.id)));
                }
                if a.modifier_slot == b.modifier_slot {
                    return Err(CoreError::Validation(format!(
                        "concepts {:?} and {:?} share modifier slot {}",
                        a.id, b.id, a.modifier_slot
                    )));
                }
            }
        }
        Ok(())
    }

    /// The three-concept registry used by the benchmark and tests:
    /// two styled objects plus one styled background.
    pub fn standard() -> Self {
        ConceptRegistry {
            concepts: vec![
                ConceptDef {
                    id: "ring-circle".into(),
                    modifier_slot: 0,
                    target: ConceptTarget::Object {
                        shape: ShapeClass::Circle,
                        program: StyleProgram {
                            pattern: Pattern::Rings,
                            color_a: OBJECT_PALETTE[0], // red
                            color_b: OBJECT_PALETTE[2], // yellow
                        },
                    },
                },
                ConceptDef {
                    id: "checker-square".into(),
                    modifier_slot: 1,
                    target: ConceptTarget::Object {
                        shape: ShapeClass::Square,
                        program: StyleProgram {
                            pattern: Pattern::Checker,
                            color_a: OBJECT_PALETTE[3], // green
                            color_b: OBJECT_PALETTE[6], // magenta
                        },
                    },
                },
                ConceptDef {
                    id: "diag-stripes".into(),
                    modifier_slot: 2,
                    target: ConceptTarget::Background {
                        program: BgProgram {
                            pattern: BgPattern::DiagBars,
                            color_a: BG_PALETTE[2], // dark navy
                            color_b: BG_PALETTE[3], // pale sand
                        },
                    },
                },
            ],
        }
    }
}

/// Rendered scene with exact per-object masks.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    /// (3, H, W) in [-1, 1], values on the u8 grid.
    pub image: Array3<f64>,
    pub prompt: PromptTokens,
    /// One binary (H, W) mask per object, geometric occupancy (may overlap).
    pub gt_masks: Vec<Array2<u8>>,
    pub spec: SceneSpec,
    pub seed: u64,
}

/// Rendering context: image size plus the concept style registry.
#[derive(Debug, Clone)]
pub struct SceneDomain {
    pub height: usize,
    pub width: usize,
    pub registry: ConceptRegistry,
}

impl SceneDomain {
    pub fn new(registry: ConceptRegistry) -> Self {
        SceneDomain { height: IMG_SIZE, width: IMG_SIZE, registry }
    }

    /// Resolve an object's style to a concrete program. Generic styles are
    /// seeded per (seed, object index).
    fn object_program(&self, spec: &ObjectSpec, seed: u64, index: usize) -> Result<StyleProgram> {
        match &spec.style {
            StyleId::Concept(id) => match &self.registry.require(id)?.target {
                ConceptTarget::Object { shape, program } => {
                    if *shape != spec.shape {
                        return Err(CoreError::Validation(format!(
                            "concept {id:?} is a {shape:?}, object is {:?}",
                            spec.shape
                        )));
                    }
                    Ok(program.clone())
                }
                ConceptTarget::Background { .. } => Err(CoreError::Validation(format!(
                    "concept {id:?} is a background style, used on an object"
                ))),
            },
            StyleId::Generic => {
                let mut rng = split_rng(seed, "obj-style", index as u64);
                let ci = rng.gen_range(0..OBJECT_PALETTE.len());
                let pattern = match rng.gen_range(0..8u32) {
                    0..=3 => Pattern::Solid,
                    4 => Pattern::Rings,
                    5 => Pattern::Checker,
                    6 => Pattern::Rays,
                    _ => Pattern::Speckle,
                };
                let mut cj = rng.gen_range(0..OBJECT_PALETTE.len());
                if cj == ci {
                    cj = (cj + 3) % OBJECT_PALETTE.len();
                }
                Ok(StyleProgram {
                    pattern,
                    color_a: OBJECT_PALETTE[ci],
                    color_b: OBJECT_PALETTE[cj],
                })
            }
        }
    }

    /// Primary palette color index of an object program, for color words.
    fn primary_color_index(program: &StyleProgram) -> Option<usize> {
        OBJECT_PALETTE.iter().position(|c| *c == program.color_a)
    }

    fn bg_program(&self, bg: &BgSpec, seed: u64) -> Result<BgProgram> {
        match &bg.style {
            StyleId::Concept(id) => match &self.registry.require(id)?.target {
                ConceptTarget::Background { program } => {
                    if program.pattern.class() != bg.class {
                        return Err(CoreError::Validation(format!(
                            "concept {id:?} renders {:?}, spec says {:?}",
                            program.pattern.class(),
                            bg.class
                        )));
                    }
                    Ok(program.clone())
                }
                ConceptTarget::Object { .. } => Err(CoreError::Validation(format!(
                    "concept {id:?} is an object style, used as background"
                ))),
            },
            StyleId::Generic => {
                let mut rng = split_rng(seed, "bg-style", 0);
                // patterned backgrounds pair one dark with one pale color so
                // the pattern stays locally visible
                let dark = [0usize, 2, 4];
                let pale = [1usize, 3, 5];
                let ci = dark[rng.gen_range(0..dark.len())];
                let cj = pale[rng.gen_range(0..pale.len())];
                let (ca, cb) = if rng.gen_bool(0.5) { (ci, cj) } else { (cj, ci) };
                Ok(BgProgram {
                    pattern: BgPattern::default_for(bg.class),
                    color_a: BG_PALETTE[ca],
                    color_b: BG_PALETTE[cb],
                })
            }
        }
    }

    /// Deterministic rasterization of `spec`. Masks mark exactly the pixels
    /// each object geometrically occupies (pixel-center rule).
    pub fn render_scene(&self, spec: &SceneSpec, seed: u64) -> Result<LabeledScene> {
        spec.validate()?;
        let (h, w) = (self.height, self.width);
        let bg = self.bg_program(&spec.background, seed)?;
        let mut rgb = vec![[0u8; 3]; h * w];
        for y in 0..h {
            for x in 0..w {
                rgb[y * w + x] = bg.shade(x, y, h);
            }
        }
        let mut gt_masks = Vec::with_capacity(spec.objects.len());
        for (i, obj) in spec.objects.iter().enumerate() {
            let program = self.object_program(obj, seed, i)?;
            let mut mask = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    let px = (x as f64 + 0.5) / w as f64;
                    let py = (y as f64 + 0.5) / h as f64;
                    if inside_shape(obj, px, py) {
                        mask[[y, x]] = 1;
                        let u = (px - obj.center.0) / obj.radius;
                        let v = (py - obj.center.1) / obj.radius;
                        rgb[y * w + x] = program.shade(u, v);
                    }
                }
            }
            gt_masks.push(mask);
        }
        let mut image = Array3::<f64>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    image[[c, y, x]] = u8_to_unit(rgb[y * w + x][c]);
                }
            }
        }
        let prompt = self.prompt_for(spec, seed)?;
        Ok(LabeledScene { image, prompt, gt_masks, spec: spec.clone(), seed })
    }

    /// Prompt derived from the spec: `a [color] [<ck>] shape (and ...) on [<ck>] bg`.
    /// Color words appear only for generic solid-colored objects.
    pub fn prompt_for(&self, spec: &SceneSpec, seed: u64) -> Result<PromptTokens> {
        let mut toks: Vec<u16> = Vec::new();
        for (i, obj) in spec.objects.iter().enumerate() {
            if i > 0 {
                toks.push(filler_token("and"));
            }
            toks.push(filler_token("a"));
            match &obj.style {
                StyleId::Concept(id) => {
                    toks.push(self.registry.require(id)?.modifier());
                }
                StyleId::Generic => {
                    let program = self.object_program(obj, seed, i)?;
                    if program.pattern == Pattern::Solid {
                        if let Some(ci) = Self::primary_color_index(&program) {
                            toks.push(color_token(ci));
                        }
                    }
                }
            }
            toks.push(obj.shape.token());
        }
        toks.push(filler_token("on"));
        if let StyleId::Concept(id) = &spec.background.style {
            toks.push(self.registry.require(id)?.modifier());
        }
        toks.push(spec.background.class.token());
        PromptTokens::new(toks)
    }
}

/// Point-in-shape test at fractional image coordinates.
pub fn inside_shape(obj: &ObjectSpec, px: f64, py: f64) -> bool {
    let (cx, cy) = obj.center;
    let r = obj.radius;
    let dx = px - cx;
    let dy = py - cy;
    match obj.shape {
        ShapeClass::Circle => dx * dx + dy * dy <= r * r,
        ShapeClass::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeClass::Triangle => {
            // equilateral, apex up, inscribed in the circumcircle
            let verts = triangle_vertices(cx, cy, r);
            point_in_convex(&verts, px, py)
        }
        ShapeClass::Star => {
            let verts = star_vertices(cx, cy, r);
            point_in_polygon(&verts, px, py)
        }
    }
}

fn triangle_vertices(cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    // y axis points down in image coordinates; apex at angle -90 degrees
    [-90.0f64, 30.0, 150.0]
        .iter()
        .map(|deg| {
            let a = deg.to_radians();
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn star_vertices(cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    let inner = 0.45 * r;
    (0..10)
        .map(|k| {
            let a = (-90.0 + 36.0 * k as f64).to_radians();
            let rad = if k % 2 == 0 { r } else { inner };
            (cx + rad * a.cos(), cy + rad * a.sin())
        })
        .collect()
}

fn point_in_convex(verts: &[(f64, f64)], px: f64, py: f64) -> bool {
    let n = verts.len();
    let mut sign = 0i8;
    for i in 0..n {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % n];
        let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
        let s = if cross > 0.0 {
            1
        } else if cross < 0.0 {
            -1
        } else {
            0
        };
        if s != 0 {
            if sign == 0 {
                sign = s;
            } else if sign != s {
                return false;
            }
        }
    }
    true
}

fn point_in_polygon(verts: &[(f64, f64)], px: f64, py: f64) -> bool {
    // even-odd rule
    let n = verts.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if ((yi > py) != (yj > py))
            && (px < (xj - xi) * (py - yi) / (yj - yi) + xi)
        {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Random scene sampling helpers shared by dataset generation. `clearance`
/// additionally requires a gap beyond touching circumcircles (None permits
/// any legal placement, including overlap).
pub fn sample_object(
    rng: &mut Prng,
    shape: ShapeClass,
    style: StyleId,
    existing: &[ObjectSpec],
    clearance: Option<f64>,
) -> Option<ObjectSpec> {
    for _ in 0..200 {
        let radius = rng.gen_range(MIN_RADIUS..=MAX_RADIUS);
        let cx = rng.gen_range(radius..=1.0 - radius);
        let cy = rng.gen_range(radius..=1.0 - radius);
        let ok = existing.iter().all(|o| {
            let d = ((o.center.0 - cx).powi(2) + (o.center.1 - cy).powi(2)).sqrt();
            let min = match clearance {
                Some(gap) => (o.radius + radius + gap).max(MIN_CENTER_DIST),
                None => MIN_CENTER_DIST,
            };
            d >= min
        });
        if ok {
            return Some(ObjectSpec { shape, style, center: (cx, cy), radius });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_circle_spec() -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeClass::Circle,
                style: StyleId::Generic,
                center: (0.5, 0.5),
                radius: 0.25,
            }],
            background: BgSpec { class: BgClass::Plain, style: StyleId::Generic },
        }
    }

    #[test]
    fn centered_disk_mask_area() {
        let domain = SceneDomain::new(ConceptRegistry::default());
        let scene = domain.render_scene(&one_circle_spec(), 11).unwrap();
        let area: u32 = scene.gt_masks[0].iter().map(|&v| v as u32).sum();
        // pi * (0.25 * 32)^2 = 201.06..., allow one perimeter (2*pi*8 ~ 50) of slack
        let expected = std::f64::consts::PI * 64.0;
        assert!(
            (area as f64 - expected).abs() < 2.0 * std::f64::consts::PI * 8.0,
            "disk area {area} too far from {expected:.1}"
        );
    }

    #[test]
    fn render_is_deterministic() {
        let domain = SceneDomain::new(ConceptRegistry::standard());
        let a = domain.render_scene(&one_circle_spec(), 42).unwrap();
        let b = domain.render_scene(&one_circle_spec(), 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt_masks, b.gt_masks);
        assert_eq!(a.prompt, b.prompt);
        let c = domain.render_scene(&one_circle_spec(), 43).unwrap();
        // a different seed picks different generic styling (almost surely)
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn disjoint_objects_have_disjoint_masks() {
        let spec = SceneSpec {
            objects: vec![
                ObjectSpec {
                    shape: ShapeClass::Circle,
                    style: StyleId::Generic,
                    center: (0.25, 0.25),
                    radius: 0.15,
                },
                ObjectSpec {
                    shape: ShapeClass::Square,
                    style: StyleId::Generic,
                    center: (0.72, 0.72),
                    radius: 0.15,
                },
            ],
            background: BgSpec { class: BgClass::Stripes, style: StyleId::Generic },
        };
        let domain = SceneDomain::new(ConceptRegistry::default());
        let scene = domain.render_scene(&spec, 5).unwrap();
        // brute-force pixel scan
        let mut overlap = 0u32;
        for y in 0..IMG_SIZE {
            for x in 0..IMG_SIZE {
                if scene.gt_masks[0][[y, x]] == 1 && scene.gt_masks[1][[y, x]] == 1 {
                    overlap += 1;
                }
            }
        }
        assert_eq!(overlap, 0);
    }

    #[test]
    fn invalid_specs_name_the_violation() {
        let domain = SceneDomain::new(ConceptRegistry::default());
        let mut spec = one_circle_spec();
        spec.objects[0].radius = 0.5;
        let err = domain.render_scene(&spec, 1).unwrap_err();
        assert!(err.to_string().contains("radius"), "{err}");

        let mut spec = one_circle_spec();
        spec.objects[0].center = (0.05, 0.5);
        let err = domain.render_scene(&spec, 1).unwrap_err();
        assert!(err.to_string().contains("bounding box"), "{err}");

        let mut spec = one_circle_spec();
        spec.objects.push(spec.objects[0].clone());
        let err = domain.render_scene(&spec, 1).unwrap_err();
        assert!(err.to_string().contains("too close"), "{err}");
    }

    #[test]
    fn concept_styles_render_their_program() {
        let registry = ConceptRegistry::standard();
        let domain = SceneDomain::new(registry.clone());
        let spec = SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeClass::Circle,
                style: StyleId::Concept("ring-circle".into()),
                center: (0.5, 0.5),
                radius: 0.25,
            }],
            background: BgSpec { class: BgClass::Plain, style: StyleId::Generic },
        };
        let scene = domain.render_scene(&spec, 7).unwrap();
        // prompt carries the modifier token right before "circle"
        let toks = scene.prompt.tokens();
        let m = registry.get("ring-circle").unwrap().modifier();
        let pos = toks.iter().position(|&t| t == m).unwrap();
        assert_eq!(toks[pos + 1], ShapeClass::Circle.token());
        // center pixel is the ring program's color_a (red)
        let center = [scene.image[[0, 16, 16]], scene.image[[1, 16, 16]], scene.image[[2, 16, 16]]];
        assert!(center[0] > 0.5 && center[1] < 0.0, "center {center:?} not red-ish");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let domain = SceneDomain::new(ConceptRegistry::standard());
        let spec = SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeClass::Star,
                style: StyleId::Concept("ring-circle".into()),
                center: (0.5, 0.5),
                radius: 0.2,
            }],
            background: BgSpec { class: BgClass::Plain, style: StyleId::Generic },
        };
        assert!(domain.render_scene(&spec, 1).is_err());
    }
}
