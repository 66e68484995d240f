//! Stroke templates and their anti-aliased rasterization.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{arg_err, Error, Result};
use crate::kernel::Tensor;
use crate::rng::Rng;

/// Number of distinct templates: digits then upper-case letters.
pub const MAX_CLASSES: usize = 36;

pub const CLASS_CHARS: &[u8; MAX_CLASSES] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// A pen stroke in glyph coordinates: unit square, x right, y down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stroke {
    Line {
        from: (f64, f64),
        to: (f64, f64),
    },
    /// Elliptic arc through `center + (rx cos t, ry sin t)` for `t` from
    /// `start` to `end` degrees.
    Arc {
        center: (f64, f64),
        radii: (f64, f64),
        start: f64,
        end: f64,
    },
}

impl Stroke {
    fn is_degenerate(&self) -> bool {
        match *self {
            Stroke::Line { from, to } => from == to,
            Stroke::Arc { radii, start, end, .. } => start == end || (radii.0 == 0.0 && radii.1 == 0.0),
        }
    }

    /// Appends the stroke as polyline segments.
    fn flatten(&self, out: &mut Vec<((f64, f64), (f64, f64))>) {
        match *self {
            Stroke::Line { from, to } => out.push((from, to)),
            Stroke::Arc { center, radii, start, end } => {
                let sweep = end - start;
                let n = ((sweep.abs() / 10.0).ceil() as usize).max(8);
                let at = |i: usize| {
                    let t = (start + sweep * i as f64 / n as f64).to_radians();
                    (center.0 + radii.0 * t.cos(), center.1 + radii.1 * t.sin())
                };
                for i in 0..n {
                    out.push((at(i), at(i + 1)));
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub class_id: usize,
    pub strokes: Vec<Stroke>,
    /// Pen width as a fraction of the image size.
    pub stroke_width: f64,
}

const fn l(x0: f64, y0: f64, x1: f64, y1: f64) -> Stroke {
    Stroke::Line { from: (x0, y0), to: (x1, y1) }
}

const fn a(cx: f64, cy: f64, rx: f64, ry: f64, start: f64, end: f64) -> Stroke {
    Stroke::Arc { center: (cx, cy), radii: (rx, ry), start, end }
}

fn template(class_id: usize) -> Vec<Stroke> {
    match CLASS_CHARS[class_id] {
        b'0' => vec![a(0.5, 0.5, 0.35, 0.45, 0.0, 360.0), l(0.3, 0.8, 0.7, 0.2)],
        b'1' => vec![l(0.5, 0.05, 0.5, 0.95), l(0.3, 0.2, 0.5, 0.05), l(0.3, 0.95, 0.7, 0.95)],
        b'2' => vec![a(0.5, 0.3, 0.3, 0.25, 180.0, 405.0), l(0.71, 0.48, 0.2, 0.95), l(0.2, 0.95, 0.8, 0.95)],
        b'3' => vec![a(0.5, 0.28, 0.3, 0.23, 200.0, 450.0), a(0.5, 0.73, 0.32, 0.22, 270.0, 520.0)],
        b'4' => vec![l(0.65, 0.95, 0.65, 0.05), l(0.65, 0.05, 0.15, 0.65), l(0.15, 0.65, 0.85, 0.65)],
        b'5' => vec![l(0.8, 0.05, 0.25, 0.05), l(0.25, 0.05, 0.27, 0.47), a(0.5, 0.66, 0.3, 0.29, 220.0, 520.0)],
        b'6' => vec![a(0.5, 0.68, 0.3, 0.27, 0.0, 360.0), l(0.2, 0.68, 0.6, 0.05)],
        b'7' => vec![l(0.15, 0.05, 0.85, 0.05), l(0.85, 0.05, 0.4, 0.95)],
        b'8' => vec![a(0.5, 0.27, 0.25, 0.22, 0.0, 360.0), a(0.5, 0.72, 0.3, 0.23, 0.0, 360.0)],
        b'9' => vec![a(0.5, 0.32, 0.3, 0.27, 0.0, 360.0), l(0.8, 0.32, 0.4, 0.95)],
        b'A' => vec![l(0.1, 0.95, 0.5, 0.05), l(0.5, 0.05, 0.9, 0.95), l(0.27, 0.6, 0.73, 0.6)],
        b'B' => {
            vec![l(0.2, 0.05, 0.2, 0.95), a(0.2, 0.27, 0.5, 0.22, 270.0, 450.0), a(0.2, 0.72, 0.55, 0.23, 270.0, 450.0)]
        }
        b'C' => vec![a(0.55, 0.5, 0.4, 0.45, 45.0, 315.0)],
        b'D' => vec![l(0.2, 0.05, 0.2, 0.95), a(0.2, 0.5, 0.6, 0.45, 270.0, 450.0)],
        b'E' => vec![l(0.2, 0.05, 0.2, 0.95), l(0.2, 0.05, 0.8, 0.05), l(0.2, 0.5, 0.7, 0.5), l(0.2, 0.95, 0.8, 0.95)],
        b'F' => vec![l(0.2, 0.05, 0.2, 0.95), l(0.2, 0.05, 0.8, 0.05), l(0.2, 0.5, 0.7, 0.5)],
        b'G' => vec![a(0.55, 0.5, 0.4, 0.45, 45.0, 315.0), l(0.83, 0.82, 0.83, 0.55), l(0.83, 0.55, 0.55, 0.55)],
        b'H' => vec![l(0.2, 0.05, 0.2, 0.95), l(0.8, 0.05, 0.8, 0.95), l(0.2, 0.5, 0.8, 0.5)],
        b'I' => vec![l(0.5, 0.05, 0.5, 0.95), l(0.3, 0.05, 0.7, 0.05), l(0.3, 0.95, 0.7, 0.95)],
        b'J' => vec![l(0.7, 0.05, 0.7, 0.7), a(0.45, 0.7, 0.25, 0.25, 0.0, 180.0), l(0.5, 0.05, 0.9, 0.05)],
        b'K' => vec![l(0.2, 0.05, 0.2, 0.95), l(0.8, 0.05, 0.2, 0.55), l(0.35, 0.45, 0.85, 0.95)],
        b'L' => vec![l(0.2, 0.05, 0.2, 0.95), l(0.2, 0.95, 0.8, 0.95)],
        b'M' => {
            vec![l(0.1, 0.95, 0.15, 0.05), l(0.15, 0.05, 0.5, 0.6), l(0.5, 0.6, 0.85, 0.05), l(0.85, 0.05, 0.9, 0.95)]
        }
        b'N' => vec![l(0.2, 0.95, 0.2, 0.05), l(0.2, 0.05, 0.8, 0.95), l(0.8, 0.95, 0.8, 0.05)],
        b'O' => vec![a(0.5, 0.5, 0.4, 0.45, 0.0, 360.0)],
        b'P' => vec![l(0.2, 0.05, 0.2, 0.95), a(0.2, 0.28, 0.55, 0.23, 270.0, 450.0)],
        b'Q' => vec![a(0.5, 0.5, 0.4, 0.45, 0.0, 360.0), l(0.6, 0.7, 0.92, 0.98)],
        b'R' => vec![l(0.2, 0.05, 0.2, 0.95), a(0.2, 0.28, 0.55, 0.23, 270.0, 450.0), l(0.4, 0.51, 0.85, 0.95)],
        b'S' => vec![a(0.5, 0.28, 0.3, 0.23, 90.0, 330.0), a(0.5, 0.73, 0.32, 0.22, 270.0, 510.0)],
        b'T' => vec![l(0.1, 0.05, 0.9, 0.05), l(0.5, 0.05, 0.5, 0.95)],
        b'U' => vec![l(0.2, 0.05, 0.2, 0.65), a(0.5, 0.65, 0.3, 0.3, 0.0, 180.0), l(0.8, 0.65, 0.8, 0.05)],
        b'V' => vec![l(0.1, 0.05, 0.5, 0.95), l(0.5, 0.95, 0.9, 0.05)],
        b'W' => {
            vec![l(0.05, 0.05, 0.27, 0.95), l(0.27, 0.95, 0.5, 0.4), l(0.5, 0.4, 0.73, 0.95), l(0.73, 0.95, 0.95, 0.05)]
        }
        b'X' => vec![l(0.15, 0.05, 0.85, 0.95), l(0.85, 0.05, 0.15, 0.95)],
        b'Y' => vec![l(0.1, 0.05, 0.5, 0.5), l(0.9, 0.05, 0.5, 0.5), l(0.5, 0.5, 0.5, 0.95)],
        b'Z' => vec![l(0.15, 0.05, 0.85, 0.05), l(0.85, 0.05, 0.15, 0.95), l(0.15, 0.95, 0.85, 0.95)],
        _ => unreachable!(),
    }
}

impl GlyphSpec {
    /// The built-in template for `class_id`.
    pub fn for_class(class_id: usize) -> Result<Self> {
        if class_id >= MAX_CLASSES {
            return Err(arg_err("glyph", alloc::format!("class {class_id} has no template (max {MAX_CLASSES})")));
        }
        Ok(Self { class_id, strokes: template(class_id), stroke_width: 0.08 })
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Draws dark strokes on a light, slightly tinted background. Placement,
/// scale, pen width and both colours are jittered from `rng`.
pub fn render_glyph(spec: &GlyphSpec, size: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    if size < 16 {
        return Err(arg_err("render_glyph", alloc::format!("size {size} below 16")));
    }
    if spec.strokes.is_empty() {
        return Err(arg_err("render_glyph", "empty stroke template"));
    }
    if !(spec.stroke_width > 0.0) {
        return Err(Error::Argument { op: "render_glyph", detail: "stroke width must be positive".into() });
    }
    let scale = rng.uniform_range(0.72, 0.86);
    let aspect = rng.uniform_range(0.62, 0.74);
    let shift = (rng.uniform_range(-0.05, 0.05), rng.uniform_range(-0.05, 0.05));
    let width = spec.stroke_width * rng.uniform_range(0.85, 1.15) * size as f64;
    let base = rng.uniform_range(0.75, 0.92);
    let bg: [f64; 3] = core::array::from_fn(|_| base + rng.uniform_range(-0.05, 0.05));
    let ink_base = rng.uniform_range(0.05, 0.25);
    let ink: [f64; 3] = core::array::from_fn(|_| ink_base + rng.uniform_range(-0.03, 0.03));

    let s = size as f64;
    let to_px = |(u, v): (f64, f64)| {
        ((0.5 + (u - 0.5) * scale * aspect + shift.0) * s, (0.5 + (v - 0.5) * scale + shift.1) * s)
    };
    let mut segments = Vec::new();
    for stroke in spec.strokes.iter().filter(|st| !st.is_degenerate()) {
        stroke.flatten(&mut segments);
    }
    let segments: Vec<_> = segments.into_iter().map(|(p, q)| (to_px(p), to_px(q))).collect();

    let hw = size * size;
    let mut data = vec![0f32; 3 * hw];
    let half = width / 2.0;
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segments.iter().fold(f64::INFINITY, |m, &(a, b)| m.min(segment_distance(p, a, b)));
            let cov = (half - d + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * hw + y * size + x] = (bg[c] * (1.0 - cov) + ink[c] * cov) as f32;
            }
        }
    }
    Tensor::new(&[3, size, size], data)
}
