//! Visual-prompt compositor: palette strips, horizontal line marks, and
//! labeled points stamped onto generated images before scoring. Overlaid
//! pixels are replaced exactly (and carry no gradient); all other pixels
//! pass through bit-for-bit.
//!
//! Geometry rules, frozen for reproducibility:
//! - palette strip: bottom `floor(frac * H)` rows, equal-width swatches of
//!   `floor(W / n)` columns, leftover columns to the rightmost swatch;
//! - line: `thickness` rows starting at `round(row_frac * (H-1)) -
//!   (thickness-1)/2` (integer division), clipped to bounds;
//! - point disc: pixel included iff its center is within `radius` of the
//!   point center (Euclidean); label glyphs come from a 3x5 bitmap font,
//!   top-left corner at `(cx + radius + 2, cy - 2)`, clipped not rejected.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::{check_image_shape, ImageShape, ImageTensor, Tensor};
use std::rc::Rc;

pub type Rgb = [f64; 3];

/// Red in [-1, 1] channel space, the default annotation color.
pub const RED: Rgb = [1.0, -1.0, -1.0];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PointSpec {
    pub x_frac: f64,
    pub y_frac: f64,
    pub radius_px: usize,
    /// Single character from the built-in A-Z micro-font.
    pub label_glyph: char,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OverlaySpec {
    PaletteStrip {
        colors: Vec<Rgb>,
        strip_height_frac: f64,
    },
    LineMark {
        row_frac: f64,
        thickness_px: usize,
        color: Rgb,
    },
    PointMark {
        points: Vec<PointSpec>,
        color: Rgb,
    },
    RawInstruction {
        /// Row-major `[3, H, W]` pixel values.
        image: Vec<f64>,
        /// Row-major `[H, W]` 0/1 mask.
        mask: Vec<f64>,
    },
}

/// Binary per-pixel mask (shared across channels).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Builds from a numeric `[H, W]` map; every entry must be exactly 0 or 1.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "mask has {} values for {}x{}",
                values.len(),
                height,
                width
            )));
        }
        let mut bits = Vec::with_capacity(values.len());
        for &v in values {
            if v == 0.0 {
                bits.push(false);
            } else if v == 1.0 {
                bits.push(true);
            } else {
                return Err(Error::invalid(format!("mask entry {} is not binary", v)));
            }
        }
        Ok(PixelMask {
            height,
            width,
            bits,
        })
    }

    pub fn set(&mut self, y: usize, x: usize) {
        self.bits[y * self.width + x] = true;
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_disjoint(&self, other: &PixelMask) -> bool {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .all(|(&a, &b)| !(a && b))
    }

    /// Expand to one flag per tensor element of a `[C, H, W]` image.
    pub fn expand_channels(&self, channels: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(channels * self.bits.len());
        for _ in 0..channels {
            out.extend_from_slice(&self.bits);
        }
        out
    }
}

/// Result of stamping an instruction onto an image.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult<T> {
    pub image: ImageTensor<T>,
    pub mask: PixelMask,
}

pub(crate) fn check_color(c: &Rgb) -> Result<()> {
    for &v in c {
        if !(-1.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::invalid(format!(
                "color channel {} outside [-1, 1]",
                v
            )));
        }
    }
    Ok(())
}

fn check_frac(v: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || !v.is_finite() {
        return Err(Error::invalid(format!("{} {} outside [0, 1]", what, v)));
    }
    Ok(())
}

/// 3x5 bitmap micro-font, A-Z. Each glyph is five rows of three bits, most
/// significant bit leftmost.
const FONT_3X5: [[u8; 5]; 26] = [
    [0b010, 0b101, 0b111, 0b101, 0b101], // A
    [0b110, 0b101, 0b110, 0b101, 0b110], // B
    [0b011, 0b100, 0b100, 0b100, 0b011], // C
    [0b110, 0b101, 0b101, 0b101, 0b110], // D
    [0b111, 0b100, 0b110, 0b100, 0b111], // E
    [0b111, 0b100, 0b110, 0b100, 0b100], // F
    [0b011, 0b100, 0b101, 0b101, 0b011], // G
    [0b101, 0b101, 0b111, 0b101, 0b101], // H
    [0b111, 0b010, 0b010, 0b010, 0b111], // I
    [0b001, 0b001, 0b001, 0b101, 0b010], // J
    [0b101, 0b110, 0b100, 0b110, 0b101], // K
    [0b100, 0b100, 0b100, 0b100, 0b111], // L
    [0b101, 0b111, 0b111, 0b101, 0b101], // M
    [0b101, 0b111, 0b111, 0b111, 0b101], // N
    [0b010, 0b101, 0b101, 0b101, 0b010], // O
    [0b110, 0b101, 0b110, 0b100, 0b100], // P
    [0b010, 0b101, 0b101, 0b011, 0b001], // Q
    [0b110, 0b101, 0b110, 0b101, 0b101], // R
    [0b011, 0b100, 0b010, 0b001, 0b110], // S
    [0b111, 0b010, 0b010, 0b010, 0b010], // T
    [0b101, 0b101, 0b101, 0b101, 0b111], // U
    [0b101, 0b101, 0b101, 0b101, 0b010], // V
    [0b101, 0b101, 0b111, 0b111, 0b101], // W
    [0b101, 0b101, 0b010, 0b101, 0b101], // X
    [0b101, 0b101, 0b010, 0b010, 0b010], // Y
    [0b111, 0b001, 0b010, 0b100, 0b111], // Z
];

/// Five rows of three bits for an uppercase letter.
pub fn glyph_rows(c: char) -> Result<[u8; 5]> {
    if !c.is_ascii_uppercase() {
        return Err(Error::invalid(format!(
            "glyph '{}' outside the A-Z micro-font",
            c
        )));
    }
    Ok(FONT_3X5[(c as u8 - b'A') as usize])
}

pub(crate) fn round_half_away(v: f64) -> i64 {
    v.round() as i64
}

fn paint<T: Real>(
    instr: &mut ImageTensor<T>,
    mask: &mut PixelMask,
    shape: ImageShape,
    y: i64,
    x: i64,
    color: &Rgb,
) {
    if y < 0 || x < 0 || y >= shape.height as i64 || x >= shape.width as i64 {
        return;
    }
    let (y, x) = (y as usize, x as usize);
    for c in 0..shape.channels {
        instr.data_mut()[shape.index(c, y, x)] = T::from_f64(color[c]);
    }
    mask.set(y, x);
}

/// Rasterize an overlay spec into an instruction image and its mask.
/// Unmasked instruction pixels are zero and never used.
pub fn render_instruction<T: Real>(
    spec: &OverlaySpec,
    shape: ImageShape,
) -> Result<(ImageTensor<T>, PixelMask)> {
    let (h, w) = (shape.height, shape.width);
    let mut instr = Tensor::zeros(shape.dims());
    let mut mask = PixelMask::empty(h, w);
    match spec {
        OverlaySpec::PaletteStrip {
            colors,
            strip_height_frac,
        } => {
            if colors.is_empty() {
                return Err(Error::invalid("palette needs at least one color"));
            }
            if colors.len() > w {
                return Err(Error::invalid(format!(
                    "{} palette colors cannot fit width {}",
                    colors.len(),
                    w
                )));
            }
            for c in colors {
                check_color(c)?;
            }
            check_frac(*strip_height_frac, "strip_height_frac")?;
            let strip_h = (strip_height_frac * h as f64).floor() as usize;
            if strip_h >= h {
                return Err(Error::invalid(
                    "palette strip would cover the entire image",
                ));
            }
            let base = w / colors.len();
            for y in h - strip_h..h {
                for x in 0..w {
                    let i = (x / base).min(colors.len() - 1);
                    paint(&mut instr, &mut mask, shape, y as i64, x as i64, &colors[i]);
                }
            }
        }
        OverlaySpec::LineMark {
            row_frac,
            thickness_px,
            color,
        } => {
            check_frac(*row_frac, "row_frac")?;
            check_color(color)?;
            if *thickness_px < 1 || *thickness_px > h {
                return Err(Error::invalid(format!(
                    "line thickness {} does not fit height {}",
                    thickness_px, h
                )));
            }
            let r0 = round_half_away(row_frac * (h - 1) as f64);
            let start = r0 - ((*thickness_px as i64 - 1) / 2);
            for dy in 0..*thickness_px as i64 {
                for x in 0..w {
                    paint(&mut instr, &mut mask, shape, start + dy, x as i64, color);
                }
            }
        }
        OverlaySpec::PointMark { points, color } => {
            if points.is_empty() {
                return Err(Error::invalid("point mark needs at least one point"));
            }
            check_color(color)?;
            for p in points {
                check_frac(p.x_frac, "x_frac")?;
                check_frac(p.y_frac, "y_frac")?;
                if p.radius_px < 1 {
                    return Err(Error::invalid("point radius must be >= 1 px"));
                }
                let cx = round_half_away(p.x_frac * (w - 1) as f64);
                let cy = round_half_away(p.y_frac * (h - 1) as f64);
                let r = p.radius_px as i64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dy * dy + dx * dx <= r * r {
                            paint(&mut instr, &mut mask, shape, cy + dy, cx + dx, color);
                        }
                    }
                }
                let rows = glyph_rows(p.label_glyph)?;
                let (gx, gy) = (cx + r + 2, cy - 2);
                for (dy, bits) in rows.iter().enumerate() {
                    for dx in 0..3i64 {
                        if bits & (0b100 >> dx) != 0 {
                            paint(&mut instr, &mut mask, shape, gy + dy as i64, gx + dx, color);
                        }
                    }
                }
            }
        }
        OverlaySpec::RawInstruction { image, mask: m } => {
            if image.len() != shape.numel() {
                return Err(Error::shape(format!(
                    "raw instruction has {} values for shape {:?}",
                    image.len(),
                    shape.dims()
                )));
            }
            let pm = PixelMask::from_values(h, w, m)?;
            for (i, &v) in image.iter().enumerate() {
                instr.data_mut()[i] = T::from_f64(v);
            }
            mask = pm;
        }
    }
    Ok((instr, mask))
}

/// Masked replacement: `out = mask * instruction + (1 - mask) * img`.
pub fn compose<T: Real>(
    img: &ImageTensor<T>,
    instruction: &ImageTensor<T>,
    mask: &PixelMask,
) -> Result<CompositeResult<T>> {
    if !img.same_shape(instruction) {
        return Err(Error::shape(format!(
            "compose: image {:?} vs instruction {:?}",
            img.shape(),
            instruction.shape()
        )));
    }
    let dims = img.shape();
    if dims.len() != 3 || (mask.height, mask.width) != (dims[1], dims[2]) {
        return Err(Error::shape(format!(
            "compose: mask {}x{} vs image {:?}",
            mask.height,
            mask.width,
            img.shape()
        )));
    }
    let channels = dims[0];
    let full = mask.expand_channels(channels);
    let data: Vec<T> = img
        .data()
        .iter()
        .zip(instruction.data().iter())
        .zip(full.iter())
        .map(|((&a, &b), &m)| if m { b } else { a })
        .collect();
    Ok(CompositeResult {
        image: Tensor::new(dims.to_vec(), data)?,
        mask: mask.clone(),
    })
}

/// Stamp an overlay spec onto an image (plain, non-graph path).
pub fn apply_overlay<T: Real>(
    img: &ImageTensor<T>,
    spec: &OverlaySpec,
    shape: ImageShape,
) -> Result<CompositeResult<T>> {
    check_image_shape(img, shape)?;
    let (instr, mask) = render_instruction::<T>(spec, shape)?;
    compose(img, &instr, &mask)
}

/// Graph path: identical arithmetic to [`apply_overlay`], with gradients
/// blocked on overlaid pixels.
pub fn apply_overlay_node<T: Real>(
    g: &mut Graph<T>,
    img: NodeId,
    spec: &OverlaySpec,
    shape: ImageShape,
) -> Result<NodeId> {
    check_image_shape(g.value(img), shape)?;
    let (instr, mask) = render_instruction::<T>(spec, shape)?;
    let full = Rc::new(mask.expand_channels(shape.channels));
    Ok(g.compose_masked(img, &instr, full))
}

pub fn overlay_palette<T: Real>(
    img: &ImageTensor<T>,
    colors: &[Rgb],
    strip_height_frac: f64,
) -> Result<CompositeResult<T>> {
    let shape = image_shape_of(img)?;
    apply_overlay(
        img,
        &OverlaySpec::PaletteStrip {
            colors: colors.to_vec(),
            strip_height_frac,
        },
        shape,
    )
}

pub fn overlay_line<T: Real>(
    img: &ImageTensor<T>,
    row_frac: f64,
    thickness_px: usize,
    color: Rgb,
) -> Result<CompositeResult<T>> {
    let shape = image_shape_of(img)?;
    apply_overlay(
        img,
        &OverlaySpec::LineMark {
            row_frac,
            thickness_px,
            color,
        },
        shape,
    )
}

pub fn overlay_points<T: Real>(
    img: &ImageTensor<T>,
    points: &[PointSpec],
    color: Rgb,
) -> Result<CompositeResult<T>> {
    let shape = image_shape_of(img)?;
    apply_overlay(
        img,
        &OverlaySpec::PointMark {
            points: points.to_vec(),
            color,
        },
        shape,
    )
}

fn image_shape_of<T: Real>(img: &ImageTensor<T>) -> Result<ImageShape> {
    let dims = img.shape();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(Error::shape(format!("not a [3, H, W] image: {:?}", dims)));
    }
    Ok(ImageShape::new(dims[1], dims[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(seed: u64, h: usize, w: usize) -> ImageTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![3, h, w], &mut rng)
    }

    #[test]
    fn palette_single_color_fills_bottom_rows() {
        let img = test_image(1, 32, 32);
        let out = overlay_palette(&img, &[[0.5, -0.5, 1.0]], 4.0 / 32.0).unwrap();
        let shape = ImageShape::new(32, 32);
        for y in 28..32 {
            for x in 0..32 {
                assert!(out.mask.get(y, x));
                assert_eq!(out.image.data()[shape.index(0, y, x)], 0.5);
                assert_eq!(out.image.data()[shape.index(1, y, x)], -0.5);
                assert_eq!(out.image.data()[shape.index(2, y, x)], 1.0);
            }
        }
        assert_eq!(out.mask.count(), 4 * 32);
    }

    #[test]
    fn palette_three_swatches_widths_10_10_12() {
        let img = test_image(2, 32, 32);
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let out = overlay_palette(&img, &colors, 4.0 / 32.0).unwrap();
        let shape = ImageShape::new(32, 32);
        let y = 31;
        let swatch_at = |x: usize| -> usize {
            let r = out.image.data()[shape.index(0, y, x)];
            let g = out.image.data()[shape.index(1, y, x)];
            if r == 1.0 {
                0
            } else if g == 1.0 {
                1
            } else {
                2
            }
        };
        for x in 0..10 {
            assert_eq!(swatch_at(x), 0, "x={}", x);
        }
        for x in 10..20 {
            assert_eq!(swatch_at(x), 1, "x={}", x);
        }
        for x in 20..32 {
            assert_eq!(swatch_at(x), 2, "x={}", x);
        }
    }

    #[test]
    fn unmasked_pixels_are_bit_identical() {
        let img = test_image(3, 32, 32);
        let out = overlay_palette(&img, &[RED], 0.25).unwrap();
        let shape = ImageShape::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                if !out.mask.get(y, x) {
                    for c in 0..3 {
                        let i = shape.index(c, y, x);
                        assert_eq!(img.data()[i].to_bits(), out.image.data()[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn palette_covering_whole_image_errors() {
        let img = test_image(4, 32, 32);
        assert!(overlay_palette(&img, &[RED], 1.0).is_err());
    }

    #[test]
    fn line_row_half_on_h33_is_row_16() {
        let img = test_image(5, 33, 8);
        let out = overlay_line(&img, 0.5, 1, RED).unwrap();
        assert_eq!(out.mask.count(), 8);
        for x in 0..8 {
            assert!(out.mask.get(16, x));
        }
    }

    #[test]
    fn line_at_top_edge_clips() {
        let img = test_image(6, 32, 8);
        let one = overlay_line(&img, 0.0, 1, RED).unwrap();
        assert!(one.mask.get(0, 0));
        assert_eq!(one.mask.count(), 8);
        let two = overlay_line(&img, 0.0, 2, RED).unwrap();
        assert!(two.mask.get(0, 0) && two.mask.get(1, 0));
        assert_eq!(two.mask.count(), 16);
    }

    #[test]
    fn line_mask_population_is_thickness_times_width() {
        let img = test_image(7, 32, 32);
        let out = overlay_line(&img, 0.5, 3, RED).unwrap();
        assert_eq!(out.mask.count(), 3 * 32);
    }

    #[test]
    fn radius_one_disc_is_center_plus_4_neighborhood() {
        let img = test_image(8, 32, 32);
        let p = PointSpec {
            x_frac: 0.5,
            y_frac: 0.5,
            radius_px: 1,
            label_glyph: 'A',
        };
        let out = overlay_points(&img, &[p], RED).unwrap();
        // center of a 32-wide axis: round(0.5 * 31) = 16
        for (y, x) in [(16, 16), (15, 16), (17, 16), (16, 15), (16, 17)] {
            assert!(out.mask.get(y, x), "({},{})", y, x);
        }
        assert!(!out.mask.get(15, 15));
        // glyph A at top-left (19, 14): verify the documented bitmap
        let a = glyph_rows('A').unwrap();
        assert_eq!(a, [0b010, 0b101, 0b111, 0b101, 0b101]);
        for (dy, bits) in a.iter().enumerate() {
            for dx in 0..3usize {
                let on = bits & (0b100 >> dx) != 0;
                assert_eq!(out.mask.get(14 + dy, 19 + dx), on, "glyph ({},{})", dy, dx);
            }
        }
    }

    #[test]
    fn corner_points_have_disjoint_masks() {
        let img = test_image(9, 32, 32);
        let mk = |x: f64, y: f64, g: char| PointSpec {
            x_frac: x,
            y_frac: y,
            radius_px: 1,
            label_glyph: g,
        };
        let a = overlay_points(&img, &[mk(0.1, 0.1, 'A')], RED).unwrap();
        let b = overlay_points(&img, &[mk(0.9, 0.9, 'B')], RED).unwrap();
        assert!(a.mask.is_disjoint(&b.mask));
    }

    #[test]
    fn glyph_clipping_is_not_an_error() {
        let img = test_image(10, 32, 32);
        let p = PointSpec {
            x_frac: 1.0,
            y_frac: 0.0,
            radius_px: 1,
            label_glyph: 'B',
        };
        let out = overlay_points(&img, &[p], RED).unwrap();
        assert!(out.mask.count() > 0);
    }

    #[test]
    fn compose_extremes() {
        let img = test_image(11, 8, 8);
        let instr = Tensor::full(vec![3, 8, 8], 0.25f32);
        let none = PixelMask::empty(8, 8);
        let out = compose(&img, &instr, &none).unwrap();
        assert_eq!(out.image, img);
        let all = PixelMask::from_values(8, 8, &vec![1.0; 64]).unwrap();
        let out = compose(&img, &instr, &all).unwrap();
        assert_eq!(out.image, instr);
    }

    #[test]
    fn non_binary_mask_rejected() {
        assert!(PixelMask::from_values(2, 2, &[0.0, 1.0, 0.5, 0.0]).is_err());
    }

    #[test]
    fn graph_and_plain_composition_agree() {
        let img = test_image(12, 32, 32);
        let spec = OverlaySpec::PaletteStrip {
            colors: vec![RED, [0.0, 1.0, 0.0]],
            strip_height_frac: 0.2,
        };
        let shape = ImageShape::new(32, 32);
        let plain = apply_overlay(&img, &spec, shape).unwrap();
        let mut g = Graph::new();
        let zn = g.leaf(img, true);
        let node = apply_overlay_node(&mut g, zn, &spec, shape).unwrap();
        assert_eq!(g.value(node), &plain.image);

        // gradient gating: masked pixels get exactly zero
        let loss = g.sq_sum(node);
        let grads = g.backward(loss);
        let dimg = grads.wrt(zn);
        for y in 0..32 {
            for x in 0..32 {
                let masked = plain.mask.get(y, x);
                for c in 0..3 {
                    let gv = dimg.data()[shape.index(c, y, x)];
                    if masked {
                        assert_eq!(gv, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn overlay_spec_serializes_via_run_config_schema() {
        let spec = OverlaySpec::LineMark {
            row_frac: 0.5,
            thickness_px: 2,
            color: RED,
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: OverlaySpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
        assert!(text.contains("\"type\":\"line_mark\""));
    }
}
