//! Procedural scene world: parametric scene specs, a deterministic
//! rasterizer, exact question oracles, and balanced task-case samplers.
//! Every label in the system bottoms out here, so predicates are evaluated
//! on the scene description, never on pixels.

use crate::error::{Error, Result};
use crate::overlay::{
    apply_overlay, check_color, round_half_away, OverlaySpec, PointSpec, Rgb, RED,
};
use crate::real::Real;
use crate::rng::{mix64, stream, STEP_GENERATION};
use crate::tensor::{ImageShape, ImageTensor, Tensor};
use crate::vqa::{
    check_dataset_coverage, Answer, DiscExample, NamedColor, PointLabel, Question, NAMED_COLORS,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Max-abs color tolerance for palette and attribute predicates.
pub const COLOR_TOL: f64 = 0.15;
/// Horizon alignment tolerance as a fraction of image height.
pub const ALIGN_TOL: f64 = 0.05;
/// Canonical raster used for fraction-space geometry predicates.
pub const CANON_HW: usize = 32;

/// Fixed fraction-space locations of the two labeled marks.
pub const POINT_A: (f64, f64) = (0.3, 0.45);
pub const POINT_B: (f64, f64) = (0.7, 0.45);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Rgb,
    pub x_frac: f64,
    pub y_frac: f64,
    /// Shape extent as a fraction of min(H, W); the radius (disc) or
    /// half-side (square) in pixels is `size_frac * min(H, W) / 2`.
    pub size_frac: f64,
    /// Larger rank is nearer to the camera and occludes smaller ranks.
    pub depth_rank: u32,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub background_color: Rgb,
    /// Sky/ground split; rows at or below round(frac*(H-1)) are ground.
    pub horizon_row_frac: Option<f64>,
    /// Required exactly when a horizon is present.
    pub ground_color: Option<Rgb>,
    pub objects: Vec<SceneObject>,
    /// When set, every object is outlined in black at this pixel weight.
    pub outline_thickness_px: Option<usize>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        check_color(&self.background_color)?;
        if self.horizon_row_frac.is_some() != self.ground_color.is_some() {
            return Err(Error::invalid(
                "horizon_row_frac and ground_color must be set together",
            ));
        }
        if let Some(h) = self.horizon_row_frac {
            if !(0.0..=1.0).contains(&h) {
                return Err(Error::invalid("horizon_row_frac outside [0, 1]"));
            }
        }
        if let Some(g) = &self.ground_color {
            check_color(g)?;
        }
        if let Some(t) = self.outline_thickness_px {
            if t == 0 {
                return Err(Error::invalid("outline thickness must be at least 1"));
            }
        }
        let mut ranks = Vec::new();
        for (i, obj) in self.objects.iter().enumerate() {
            check_color(&obj.color)?;
            if !(0.0..=1.0).contains(&obj.x_frac) || !(0.0..=1.0).contains(&obj.y_frac) {
                return Err(Error::invalid(format!("object {} center outside [0, 1]", i)));
            }
            if !(obj.size_frac > 0.0 && obj.size_frac <= 1.0) {
                return Err(Error::invalid(format!("object {} size outside (0, 1]", i)));
            }
            if ranks.contains(&obj.depth_rank) {
                return Err(Error::invalid(format!(
                    "duplicate depth rank {} in scene",
                    obj.depth_rank
                )));
            }
            ranks.push(obj.depth_rank);
        }
        Ok(())
    }

    /// All colors visible in the scene: background, ground, objects.
    pub fn colors(&self) -> Vec<Rgb> {
        let mut out = vec![self.background_color];
        if let Some(g) = self.ground_color {
            out.push(g);
        }
        out.extend(self.objects.iter().map(|o| o.color));
        out
    }
}

// ---------------------------------------------------------------------------
// Rasterizer
// ---------------------------------------------------------------------------

fn object_extent_px(obj: &SceneObject, shape: ImageShape) -> f64 {
    obj.size_frac * shape.height.min(shape.width) as f64 / 2.0
}

fn object_covers(obj: &SceneObject, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match obj.shape {
        ShapeKind::Disc => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
    }
}

/// Deterministic rasterization: background fill, optional two-region
/// horizon split, then objects painted back to front by depth rank.
pub fn render<T: Real>(scene: &SceneSpec, shape: ImageShape) -> Result<ImageTensor<T>> {
    scene.validate()?;
    let (h, w) = (shape.height, shape.width);
    let mut data = vec![T::zero(); shape.numel()];
    let split = scene
        .horizon_row_frac
        .map(|f| round_half_away(f * (h - 1) as f64));
    for y in 0..h {
        let row_color = match (split, &scene.ground_color) {
            (Some(s), Some(g)) if (y as i64) >= s => g,
            _ => &scene.background_color,
        };
        for x in 0..w {
            for c in 0..3 {
                data[shape.index(c, y, x)] = T::from_f64(row_color[c]);
            }
        }
    }

    let mut order: Vec<&SceneObject> = scene.objects.iter().collect();
    order.sort_by_key(|o| o.depth_rank);
    let black = NamedColor::Black.rgb();
    for obj in order {
        let cx = obj.x_frac * (w - 1) as f64;
        let cy = obj.y_frac * (h - 1) as f64;
        let r = object_extent_px(obj, shape);
        let inner = scene
            .outline_thickness_px
            .map(|t| (r - t as f64).max(0.0));
        for y in 0..h {
            for x in 0..w {
                if !object_covers(obj, x as f64, y as f64, cx, cy, r) {
                    continue;
                }
                let color = match inner {
                    Some(ri) if !object_covers(obj, x as f64, y as f64, cx, cy, ri) => &black,
                    _ => &obj.color,
                };
                for c in 0..3 {
                    data[shape.index(c, y, x)] = T::from_f64(color[c]);
                }
            }
        }
    }
    Tensor::new(shape.dims(), data)
}

// ---------------------------------------------------------------------------
// Condition catalog
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionId {
    Landscape,
    TwoObjects,
    OutlinedShape,
    ColoredScene,
}

pub const CONDITIONS: [ConditionId; 4] = [
    ConditionId::Landscape,
    ConditionId::TwoObjects,
    ConditionId::OutlinedShape,
    ConditionId::ColoredScene,
];

impl ConditionId {
    pub fn index(self) -> usize {
        CONDITIONS.iter().position(|&c| c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditionId::Landscape => "landscape",
            ConditionId::TwoObjects => "two_objects",
            ConditionId::OutlinedShape => "outlined_shape",
            ConditionId::ColoredScene => "colored_scene",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        CONDITIONS
            .iter()
            .find(|c| c.name() == name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown condition '{}'", name)))
    }
}

/// Declared horizon support for the landscape condition.
pub const LANDSCAPE_HORIZON_RANGE: (f64, f64) = (0.3, 0.7);

const SKY_COLORS: [NamedColor; 4] = [
    NamedColor::White,
    NamedColor::Cyan,
    NamedColor::Yellow,
    NamedColor::Blue,
];
const GROUND_COLORS: [NamedColor; 4] = [
    NamedColor::Green,
    NamedColor::Black,
    NamedColor::Red,
    NamedColor::Magenta,
];

fn pick<R: Rng>(rng: &mut R, options: &[NamedColor]) -> NamedColor {
    options[rng.random_range(0..options.len())]
}

fn pick_excluding<R: Rng>(rng: &mut R, exclude: &[NamedColor]) -> NamedColor {
    let pool: Vec<NamedColor> = NAMED_COLORS
        .iter()
        .copied()
        .filter(|c| !exclude.contains(c))
        .collect();
    pool[rng.random_range(0..pool.len())]
}

fn jitter<R: Rng>(rng: &mut R, base: Rgb, amount: f64) -> Rgb {
    let mut out = base;
    for v in &mut out {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(-1.0, 1.0);
    }
    out
}

/// Jitter kept under half the color tolerance so nearest-named-color
/// recovery is unambiguous.
pub const COLOR_JITTER: f64 = 0.1;

/// Draw a scene from the condition's declared parameter distribution.
pub fn sample_scene(cond: ConditionId, seed: u64) -> SceneSpec {
    let rng = &mut stream(seed, cond.index() as u64, STEP_GENERATION);
    match cond {
        ConditionId::Landscape => {
            let h = rng.random_range(LANDSCAPE_HORIZON_RANGE.0..=LANDSCAPE_HORIZON_RANGE.1);
            let sky = pick(rng, &SKY_COLORS);
            let ground = pick(rng, &GROUND_COLORS);
            SceneSpec {
                background_color: sky.rgb(),
                horizon_row_frac: Some(h),
                ground_color: Some(ground.rgb()),
                objects: vec![],
                outline_thickness_px: None,
            }
        }
        ConditionId::TwoObjects => {
            let bg = pick(rng, &NAMED_COLORS);
            let ca = pick_excluding(rng, &[bg]);
            let cb = pick_excluding(rng, &[bg, ca]);
            let first_near = rng.random_range(0..2) == 0;
            let (rank_a, rank_b) = if first_near { (2, 1) } else { (1, 2) };
            let size_of = |rank: u32| if rank == 2 { 0.42 } else { 0.28 };
            SceneSpec {
                background_color: bg.rgb(),
                horizon_row_frac: None,
                ground_color: None,
                objects: vec![
                    SceneObject {
                        shape: ShapeKind::Disc,
                        color: ca.rgb(),
                        x_frac: POINT_A.0,
                        y_frac: POINT_A.1,
                        size_frac: size_of(rank_a),
                        depth_rank: rank_a,
                    },
                    SceneObject {
                        shape: ShapeKind::Disc,
                        color: cb.rgb(),
                        x_frac: POINT_B.0,
                        y_frac: POINT_B.1,
                        size_frac: size_of(rank_b),
                        depth_rank: rank_b,
                    },
                ],
                outline_thickness_px: None,
            }
        }
        ConditionId::OutlinedShape => {
            let bg = pick(rng, &NAMED_COLORS);
            let fill = pick_excluding(rng, &[bg, NamedColor::Black]);
            let size = rng.random_range(0.5..=0.65);
            let t = rng.random_range(1..=4usize);
            SceneSpec {
                background_color: bg.rgb(),
                horizon_row_frac: None,
                ground_color: None,
                objects: vec![SceneObject {
                    shape: ShapeKind::Square,
                    color: fill.rgb(),
                    x_frac: 0.5,
                    y_frac: 0.5,
                    size_frac: size,
                    depth_rank: 1,
                }],
                outline_thickness_px: Some(t),
            }
        }
        ConditionId::ColoredScene => {
            let bg = pick(rng, &NAMED_COLORS);
            let c1 = pick_excluding(rng, &[bg]);
            let c2 = pick_excluding(rng, &[bg, c1]);
            let shape_of = |r: &mut ChaCha8Rng| {
                if r.random_range(0..2) == 0 {
                    ShapeKind::Disc
                } else {
                    ShapeKind::Square
                }
            };
            let s1 = shape_of(rng);
            let s2 = shape_of(rng);
            SceneSpec {
                background_color: jitter(rng, bg.rgb(), COLOR_JITTER),
                horizon_row_frac: None,
                ground_color: None,
                objects: vec![
                    SceneObject {
                        shape: s1,
                        color: jitter(rng, c1.rgb(), COLOR_JITTER),
                        x_frac: rng.random_range(0.2..=0.32),
                        y_frac: rng.random_range(0.32..=0.55),
                        size_frac: rng.random_range(0.2..=0.3),
                        depth_rank: 1,
                    },
                    SceneObject {
                        shape: s2,
                        color: jitter(rng, c2.rgb(), COLOR_JITTER),
                        x_frac: rng.random_range(0.68..=0.8),
                        y_frac: rng.random_range(0.32..=0.55),
                        size_frac: rng.random_range(0.2..=0.3),
                        depth_rank: 2,
                    },
                ],
                outline_thickness_px: None,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Question oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct OracleVerdict {
    pub answer: Answer,
    /// Set when the question references a scene element that is absent,
    /// which answers "No" by definition.
    pub note: Option<String>,
}

fn within(c: &Rgb, target: &Rgb, tol: f64) -> bool {
    (0..3).all(|i| (c[i] - target[i]).abs() <= tol)
}

/// Nearest named color under max-abs distance.
pub fn nearest_named(c: &Rgb) -> NamedColor {
    *NAMED_COLORS
        .iter()
        .min_by(|a, b| a.distance(c).partial_cmp(&b.distance(c)).unwrap())
        .unwrap()
}

fn point_location(label: PointLabel) -> (f64, f64) {
    match label {
        PointLabel::A => POINT_A,
        PointLabel::B => POINT_B,
    }
}

/// Highest-rank (visible) object covering the point, in canonical raster
/// geometry.
fn object_at(scene: &SceneSpec, loc: (f64, f64)) -> Option<&SceneObject> {
    let canon = ImageShape::new(CANON_HW, CANON_HW);
    let s = (CANON_HW - 1) as f64;
    scene
        .objects
        .iter()
        .filter(|o| {
            let r = object_extent_px(o, canon);
            object_covers(o, loc.0 * s, loc.1 * s, o.x_frac * s, o.y_frac * s, r)
        })
        .max_by_key(|o| o.depth_rank)
}

/// Exact predicate evaluation on the SceneSpec. Total over the question
/// catalog; questions about absent elements answer "No" with a note.
pub fn oracle_verdict(question: &Question, scene: &SceneSpec) -> Result<OracleVerdict> {
    scene.validate()?;
    let yes = |a: bool| OracleVerdict {
        answer: if a { Answer::Yes } else { Answer::No },
        note: None,
    };
    let no_with = |note: String| OracleVerdict {
        answer: Answer::No,
        note: Some(note),
    };
    Ok(match question {
        Question::PaletteMatch { colors } => {
            if colors.is_empty() {
                return Err(Error::invalid("palette question with no colors"));
            }
            let ok = scene
                .colors()
                .iter()
                .all(|c| colors.iter().any(|p| within(c, &p.rgb(), COLOR_TOL)));
            yes(ok)
        }
        Question::LineAlignment { row_frac } => match scene.horizon_row_frac {
            Some(h) => yes((h - row_frac).abs() <= ALIGN_TOL),
            None => no_with("scene has no horizon".to_string()),
        },
        Question::LineThickness { thickness_px } => match scene.outline_thickness_px {
            Some(t) => yes(t == *thickness_px),
            None => no_with("scene has no outlined shape".to_string()),
        },
        Question::DepthOrder { first, second } => {
            let a = object_at(scene, point_location(*first));
            let b = object_at(scene, point_location(*second));
            match (a, b) {
                (Some(oa), Some(ob)) => yes(oa.depth_rank > ob.depth_rank),
                _ => no_with("a marked point lies on no object".to_string()),
            }
        }
        Question::AttributePresence { color } => yes(
            scene
                .objects
                .iter()
                .any(|o| within(&o.color, &color.rgb(), COLOR_TOL)),
        ),
    })
}

pub fn oracle_answer(question: &Question, scene: &SceneSpec) -> Result<Answer> {
    Ok(oracle_verdict(question, scene)?.answer)
}

// ---------------------------------------------------------------------------
// Task families and balanced case sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Palette,
    LineAlignment,
    LineThickness,
    DepthOrder,
    Attribute,
}

pub const TASK_FAMILIES: [TaskFamily; 5] = [
    TaskFamily::Palette,
    TaskFamily::LineAlignment,
    TaskFamily::LineThickness,
    TaskFamily::DepthOrder,
    TaskFamily::Attribute,
];

impl TaskFamily {
    pub fn index(self) -> usize {
        TASK_FAMILIES.iter().position(|&f| f == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Palette => "palette",
            TaskFamily::LineAlignment => "line_alignment",
            TaskFamily::LineThickness => "line_thickness",
            TaskFamily::DepthOrder => "depth_order",
            TaskFamily::Attribute => "attribute",
        }
    }

    pub fn condition(self) -> ConditionId {
        match self {
            TaskFamily::Palette => ConditionId::ColoredScene,
            TaskFamily::LineAlignment => ConditionId::Landscape,
            TaskFamily::LineThickness => ConditionId::OutlinedShape,
            TaskFamily::DepthOrder => ConditionId::TwoObjects,
            TaskFamily::Attribute => ConditionId::ColoredScene,
        }
    }
}

/// Strip height used for palette overlays.
pub const PALETTE_STRIP_FRAC: f64 = 0.12;
/// Row fraction for the thickness-reference line overlay.
pub const THICKNESS_LINE_ROW: f64 = 0.06;

/// One fully specified rating case: a scene, a question about it, the
/// oracle's answer, and the overlay that visualizes the question.
#[derive(Debug, Clone, PartialEq)]
pub struct QaCase {
    pub condition: ConditionId,
    pub scene: SceneSpec,
    pub question: Question,
    pub answer: Answer,
    pub overlay: Option<OverlaySpec>,
}

/// Deterministic balanced sampler: even case indices produce "Yes" cases,
/// odd indices "No" cases.
pub fn sample_case(family: TaskFamily, base_seed: u64, case_index: u64) -> Result<QaCase> {
    let scene_seed = mix64(base_seed, case_index, 10 + family.index() as u64);
    let scene = sample_scene(family.condition(), scene_seed);
    let qrng = &mut stream(base_seed, case_index, 20 + family.index() as u64);
    let want = if case_index % 2 == 0 {
        Answer::Yes
    } else {
        Answer::No
    };

    let (question, overlay) = match family {
        TaskFamily::Palette => {
            let mut used: Vec<NamedColor> = Vec::new();
            for c in scene.colors() {
                let n = nearest_named(&c);
                if !used.contains(&n) {
                    used.push(n);
                }
            }
            if want == Answer::No {
                let replacement = pick_excluding(qrng, &used);
                let at = qrng.random_range(0..used.len());
                used[at] = replacement;
            }
            let strip = OverlaySpec::PaletteStrip {
                colors: used.iter().map(|c| c.rgb()).collect(),
                strip_height_frac: PALETTE_STRIP_FRAC,
            };
            (Question::PaletteMatch { colors: used }, Some(strip))
        }
        TaskFamily::LineAlignment => {
            let h = scene.horizon_row_frac.unwrap();
            let row = if want == Answer::Yes {
                h
            } else {
                let off = qrng.random_range((3.0 * ALIGN_TOL)..=(5.0 * ALIGN_TOL));
                if h < 0.5 {
                    h + off
                } else {
                    h - off
                }
            };
            let mark = OverlaySpec::LineMark {
                row_frac: row,
                thickness_px: 1,
                color: RED,
            };
            (Question::LineAlignment { row_frac: row }, Some(mark))
        }
        TaskFamily::LineThickness => {
            let t = scene.outline_thickness_px.unwrap();
            let k = if want == Answer::Yes {
                t
            } else {
                let others: Vec<usize> = (1..=4).filter(|&v| v != t).collect();
                others[qrng.random_range(0..others.len())]
            };
            let mark = OverlaySpec::LineMark {
                row_frac: THICKNESS_LINE_ROW,
                thickness_px: k,
                color: RED,
            };
            (Question::LineThickness { thickness_px: k }, Some(mark))
        }
        TaskFamily::DepthOrder => {
            let rank_at = |loc: (f64, f64)| object_at(&scene, loc).unwrap().depth_rank;
            let a_nearer = rank_at(POINT_A) > rank_at(POINT_B);
            let (first, second) = match (want, a_nearer) {
                (Answer::Yes, true) | (Answer::No, false) => (PointLabel::A, PointLabel::B),
                _ => (PointLabel::B, PointLabel::A),
            };
            let marks = OverlaySpec::PointMark {
                points: vec![
                    PointSpec {
                        x_frac: POINT_A.0,
                        y_frac: POINT_A.1,
                        radius_px: 1,
                        label_glyph: PointLabel::A.glyph(),
                    },
                    PointSpec {
                        x_frac: POINT_B.0,
                        y_frac: POINT_B.1,
                        radius_px: 1,
                        label_glyph: PointLabel::B.glyph(),
                    },
                ],
                color: RED,
            };
            (Question::DepthOrder { first, second }, Some(marks))
        }
        TaskFamily::Attribute => {
            let used: Vec<NamedColor> = scene.colors().iter().map(nearest_named).collect();
            let color = if want == Answer::Yes {
                let objs: Vec<NamedColor> =
                    scene.objects.iter().map(|o| nearest_named(&o.color)).collect();
                objs[qrng.random_range(0..objs.len())]
            } else {
                pick_excluding(qrng, &used)
            };
            (Question::AttributePresence { color }, None)
        }
    };

    let answer = oracle_answer(&question, &scene)?;
    debug_assert_eq!(answer, want, "sampler produced an off-label case");
    Ok(QaCase {
        condition: family.condition(),
        scene,
        question,
        answer,
        overlay,
    })
}

/// Render the case's scene and stamp its overlay.
pub fn render_case<T: Real>(case: &QaCase, shape: ImageShape) -> Result<ImageTensor<T>> {
    let img = render(&case.scene, shape)?;
    match &case.overlay {
        Some(spec) => Ok(apply_overlay(&img, spec, shape)?.image),
        None => Ok(img),
    }
}

/// Balanced labeled dataset across all five task families, ready for
/// discriminator training.
pub fn build_disc_dataset<T: Real>(
    shape: ImageShape,
    n_per_family: usize,
    base_seed: u64,
) -> Result<Vec<DiscExample<T>>> {
    if n_per_family < 2 {
        return Err(Error::invalid(
            "need at least 2 cases per family for both labels",
        ));
    }
    let mut out = Vec::with_capacity(n_per_family * TASK_FAMILIES.len());
    for i in 0..n_per_family {
        for family in TASK_FAMILIES {
            let case = sample_case(family, base_seed, i as u64)?;
            out.push(DiscExample {
                image: render_case(&case, shape)?,
                question: case.question.tokenize()?,
                label: case.answer,
            });
        }
    }
    check_dataset_coverage(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape32() -> ImageShape {
        ImageShape::new(32, 32)
    }

    fn flat_scene(bg: Rgb) -> SceneSpec {
        SceneSpec {
            background_color: bg,
            horizon_row_frac: None,
            ground_color: None,
            objects: vec![],
            outline_thickness_px: None,
        }
    }

    #[test]
    fn empty_scene_renders_constant_background() {
        let scene = flat_scene([0.25, -0.5, 1.0]);
        let img = render::<f64>(&scene, shape32()).unwrap();
        let shape = shape32();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(img.data()[shape.index(0, y, x)], 0.25);
                assert_eq!(img.data()[shape.index(1, y, x)], -0.5);
                assert_eq!(img.data()[shape.index(2, y, x)], 1.0);
            }
        }
    }

    #[test]
    fn horizon_half_splits_at_row_16() {
        let scene = SceneSpec {
            background_color: NamedColor::Cyan.rgb(),
            horizon_row_frac: Some(0.5),
            ground_color: Some(NamedColor::Green.rgb()),
            objects: vec![],
            outline_thickness_px: None,
        };
        let img = render::<f64>(&scene, shape32()).unwrap();
        let shape = shape32();
        for y in 0..32 {
            let expect = if y < 16 {
                NamedColor::Cyan.rgb()
            } else {
                NamedColor::Green.rgb()
            };
            for c in 0..3 {
                assert_eq!(img.data()[shape.index(c, y, 0)], expect[c], "row {}", y);
            }
        }
    }

    #[test]
    fn higher_depth_rank_occludes() {
        let mut scene = flat_scene(NamedColor::White.rgb());
        scene.objects = vec![
            SceneObject {
                shape: ShapeKind::Disc,
                color: NamedColor::Red.rgb(),
                x_frac: 0.5,
                y_frac: 0.5,
                size_frac: 0.4,
                depth_rank: 1,
            },
            SceneObject {
                shape: ShapeKind::Disc,
                color: NamedColor::Blue.rgb(),
                x_frac: 0.5,
                y_frac: 0.5,
                size_frac: 0.25,
                depth_rank: 2,
            },
        ];
        let img = render::<f64>(&scene, shape32()).unwrap();
        let shape = shape32();
        // center shows the nearer (blue) disc regardless of listing order
        let center = [
            img.data()[shape.index(0, 16, 16)],
            img.data()[shape.index(1, 16, 16)],
            img.data()[shape.index(2, 16, 16)],
        ];
        assert_eq!(center, NamedColor::Blue.rgb());
        scene.objects.swap(0, 1);
        let img2 = render::<f64>(&scene, shape32()).unwrap();
        assert_eq!(img.data(), img2.data());
    }

    #[test]
    fn outline_ring_is_black_interior_keeps_fill() {
        let scene = SceneSpec {
            background_color: NamedColor::White.rgb(),
            horizon_row_frac: None,
            ground_color: None,
            objects: vec![SceneObject {
                shape: ShapeKind::Square,
                color: NamedColor::Yellow.rgb(),
                x_frac: 0.5,
                y_frac: 0.5,
                size_frac: 0.5,
                depth_rank: 1,
            }],
            outline_thickness_px: Some(2),
        };
        let img = render::<f64>(&scene, shape32()).unwrap();
        let shape = shape32();
        // center of square: fill color
        for c in 0..3 {
            assert_eq!(
                img.data()[shape.index(c, 16, 16)],
                NamedColor::Yellow.rgb()[c]
            );
        }
        // half-side is 8px around center 15.5: columns 8..=23 covered;
        // the leftmost covered column sits in the ring
        for c in 0..3 {
            assert_eq!(
                img.data()[shape.index(c, 16, 8)],
                NamedColor::Black.rgb()[c]
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        for cond in CONDITIONS {
            let a = sample_scene(cond, 99);
            let b = sample_scene(cond, 99);
            assert_eq!(a, b);
            let ia = render::<f64>(&a, shape32()).unwrap();
            let ib = render::<f64>(&b, shape32()).unwrap();
            assert_eq!(ia.data(), ib.data());
        }
        let x = sample_scene(ConditionId::Landscape, 1);
        let y = sample_scene(ConditionId::Landscape, 2);
        assert_ne!(x, y);
    }

    #[test]
    fn landscape_always_has_horizon() {
        for seed in 0..50 {
            let s = sample_scene(ConditionId::Landscape, seed);
            assert!(s.horizon_row_frac.is_some());
            assert!(s.ground_color.is_some());
        }
    }

    #[test]
    fn horizon_distribution_stays_within_declared_bounds() {
        let (lo, hi) = LANDSCAPE_HORIZON_RANGE;
        let mid = 0.5 * (lo + hi);
        let mut below = 0;
        let mut above = 0;
        for seed in 0..1000 {
            let h = sample_scene(ConditionId::Landscape, seed)
                .horizon_row_frac
                .unwrap();
            assert!((lo..=hi).contains(&h), "horizon {} out of bounds", h);
            if h < mid {
                below += 1;
            } else {
                above += 1;
            }
        }
        // crude uniformity audit: both halves well represented
        assert!(below > 300 && above > 300, "split {}/{}", below, above);
    }

    #[test]
    fn alignment_oracle_matches_tolerance() {
        let scene = SceneSpec {
            background_color: NamedColor::Cyan.rgb(),
            horizon_row_frac: Some(0.5),
            ground_color: Some(NamedColor::Green.rgb()),
            objects: vec![],
            outline_thickness_px: None,
        };
        let at = |row: f64| Question::LineAlignment { row_frac: row };
        assert_eq!(oracle_answer(&at(0.5), &scene).unwrap(), Answer::Yes);
        assert_eq!(oracle_answer(&at(0.54), &scene).unwrap(), Answer::Yes);
        assert_eq!(oracle_answer(&at(0.6), &scene).unwrap(), Answer::No);
        // no horizon: No by definition, with a note
        let flat = flat_scene(NamedColor::Cyan.rgb());
        let v = oracle_verdict(&at(0.5), &flat).unwrap();
        assert_eq!(v.answer, Answer::No);
        assert!(v.note.is_some());
    }

    #[test]
    fn palette_oracle_rejects_uncovered_color() {
        let mut scene = flat_scene(NamedColor::Red.rgb());
        scene.objects.push(SceneObject {
            shape: ShapeKind::Disc,
            color: NamedColor::Blue.rgb(),
            x_frac: 0.5,
            y_frac: 0.5,
            size_frac: 0.3,
            depth_rank: 1,
        });
        let only_red = Question::PaletteMatch {
            colors: vec![NamedColor::Red],
        };
        assert_eq!(oracle_answer(&only_red, &scene).unwrap(), Answer::No);
        let both = Question::PaletteMatch {
            colors: vec![NamedColor::Red, NamedColor::Blue],
        };
        assert_eq!(oracle_answer(&both, &scene).unwrap(), Answer::Yes);
    }

    #[test]
    fn depth_oracle_compares_ranks_at_points() {
        let scene = sample_scene(ConditionId::TwoObjects, 7);
        let a_rank = object_at(&scene, POINT_A).unwrap().depth_rank;
        let b_rank = object_at(&scene, POINT_B).unwrap().depth_rank;
        let q = Question::DepthOrder {
            first: PointLabel::A,
            second: PointLabel::B,
        };
        let expect = if a_rank > b_rank { Answer::Yes } else { Answer::No };
        assert_eq!(oracle_answer(&q, &scene).unwrap(), expect);
        // uncovered point: No with note
        let flat = flat_scene(NamedColor::White.rgb());
        let v = oracle_verdict(&q, &flat).unwrap();
        assert_eq!(v.answer, Answer::No);
        assert!(v.note.is_some());
    }

    #[test]
    fn attribute_oracle_accepts_jittered_colors() {
        let scene = sample_scene(ConditionId::ColoredScene, 11);
        for obj in &scene.objects {
            let name = nearest_named(&obj.color);
            let q = Question::AttributePresence { color: name };
            assert_eq!(oracle_answer(&q, &scene).unwrap(), Answer::Yes);
        }
    }

    #[test]
    fn rendered_horizon_row_matches_spec_level_split() {
        for seed in 0..10 {
            let scene = sample_scene(ConditionId::Landscape, seed);
            let img = render::<f64>(&scene, shape32()).unwrap();
            let shape = shape32();
            let expected = round_half_away(scene.horizon_row_frac.unwrap() * 31.0) as usize;
            let top = [
                img.data()[shape.index(0, 0, 0)],
                img.data()[shape.index(1, 0, 0)],
                img.data()[shape.index(2, 0, 0)],
            ];
            let mut boundary = 32;
            for y in 1..32 {
                let row = [
                    img.data()[shape.index(0, y, 0)],
                    img.data()[shape.index(1, y, 0)],
                    img.data()[shape.index(2, y, 0)],
                ];
                if row != top {
                    boundary = y;
                    break;
                }
            }
            assert_eq!(boundary, expected, "seed {}", seed);
        }
    }

    #[test]
    fn case_sampler_is_balanced_and_self_consistent() {
        for family in TASK_FAMILIES {
            for idx in 0..6u64 {
                let case = sample_case(family, 42, idx).unwrap();
                let expect = if idx % 2 == 0 { Answer::Yes } else { Answer::No };
                assert_eq!(case.answer, expect, "{:?} case {}", family, idx);
                assert_eq!(
                    oracle_answer(&case.question, &case.scene).unwrap(),
                    case.answer
                );
                assert_eq!(case.condition, family.condition());
                let has_overlay = case.overlay.is_some();
                assert_eq!(has_overlay, family != TaskFamily::Attribute);
                // case must render with its overlay applied
                render_case::<f64>(&case, shape32()).unwrap();
            }
        }
    }

    #[test]
    fn disc_dataset_passes_coverage_and_balance() {
        let data = build_disc_dataset::<f64>(shape32(), 4, 5).unwrap();
        assert_eq!(data.len(), 20);
        let yes = data.iter().filter(|e| e.label == Answer::Yes).count();
        assert_eq!(yes, 10);
    }

    #[test]
    fn scene_spec_round_trips_through_json() {
        let scene = sample_scene(ConditionId::TwoObjects, 3);
        let s = serde_json::to_string(&scene).unwrap();
        let back: SceneSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn validation_rejects_malformed_scenes() {
        let mut s = flat_scene(NamedColor::White.rgb());
        s.horizon_row_frac = Some(0.5);
        assert!(s.validate().is_err(), "horizon without ground color");
        let mut dup = flat_scene(NamedColor::White.rgb());
        let obj = SceneObject {
            shape: ShapeKind::Disc,
            color: NamedColor::Red.rgb(),
            x_frac: 0.5,
            y_frac: 0.5,
            size_frac: 0.2,
            depth_rank: 1,
        };
        dup.objects = vec![obj.clone(), obj];
        assert!(dup.validate().is_err(), "duplicate depth ranks");
    }
}
