//! Procedural cartoon faces whose geometry is driven by four AUs.
//!
//! Geometry is laid out in a 64-unit frame and scaled to the canvas. Eye
//! features (brows, lids) live strictly above the nose line and mouth
//! features strictly below it, so eye AUs never touch mouth pixels and vice
//! versa.

use rand::Rng;

use super::image::ImageTensor;
use super::AnnotatedImage;
use crate::aucode::{AuSchema, AuVector};
use crate::error::{Error, Result};
use crate::numerics::seeded;

/// Schema positions driving the four synthetic AUs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticAuMap {
    pub brow_raise: Option<usize>,
    pub lid_close: Option<usize>,
    pub smile: Option<usize>,
    pub jaw_drop: Option<usize>,
}

impl SyntheticAuMap {
    /// AU1 (brow), AU45 (lids), AU12 (smile), AU26 (jaw) located in `schema`.
    pub fn for_schema(schema: &AuSchema) -> Self {
        SyntheticAuMap {
            brow_raise: schema.position(1),
            lid_close: schema.position(45),
            smile: schema.position(12),
            jaw_drop: schema.position(26),
        }
    }

    /// First four positions, for small schemas.
    pub fn leading() -> Self {
        SyntheticAuMap {
            brow_raise: Some(0),
            lid_close: Some(1),
            smile: Some(2),
            jaw_drop: Some(3),
        }
    }

    pub fn positions(&self) -> [Option<usize>; 4] {
        [self.brow_raise, self.lid_close, self.smile, self.jaw_drop]
    }

    fn resolve(&self, n: usize) -> Result<[usize; 4]> {
        let names = ["brow-raise", "lid-close", "smile", "jaw-drop"];
        let mut out = [0; 4];
        for (i, p) in self.positions().into_iter().enumerate() {
            out[i] = match p {
                Some(p) if p < n => p,
                _ => {
                    return Err(Error::invalid(format!(
                        "synthetic AU `{}` is not mapped onto the schema (N={n})",
                        names[i]
                    )))
                }
            };
        }
        Ok(out)
    }
}

/// AU-to-geometry gains, in 64-unit frame pixels per unit intensity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuGains {
    pub brow_raise: f64,
    pub lid_close: f64,
    pub smile_lift: f64,
    pub jaw_drop: f64,
}

impl Default for AuGains {
    fn default() -> Self {
        AuGains {
            brow_raise: 4.0,
            lid_close: 5.0,
            smile_lift: 4.0,
            jaw_drop: 7.0,
        }
    }
}

/// Identity and rendering controls for one synthetic face.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaceParams {
    pub seed: u64,
    pub skin: [u8; 3],
    pub background: [u8; 3],
    pub brow_color: [u8; 3],
    pub head_axes: (f64, f64),
    pub eye_spacing: f64,
    pub gains: AuGains,
    pub map: SyntheticAuMap,
}

const EYE_Y: f64 = 27.0;
const EYE_HALF_W: f64 = 4.5;
const EYE_HALF_H: f64 = 3.2;
const BROW_Y: f64 = 20.5;
const BROW_HALF_W: f64 = 5.5;
const BROW_HALF_T: f64 = 0.9;
const NOSE_LINE: f64 = 38.5;
const MOUTH_Y: f64 = 46.5;
const MOUTH_HALF_W: f64 = 7.5;
const LIP_HALF_T: f64 = 0.8;
const SUPERSAMPLE: usize = 3;

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] + (b[c] - a[c]) * t).round().clamp(0.0, 255.0) as u8;
    }
    out
}

impl SyntheticFaceParams {
    /// Draws an identity (colors, head size, eye spacing) from `seed`.
    pub fn sample(seed: u64, map: SyntheticAuMap) -> Self {
        let mut rng = seeded(seed);
        let skin = lerp3([241.0, 194.0, 167.0], [141.0, 85.0, 36.0], rng.random::<f64>());
        let background = loop {
            let bg = [
                rng.random_range(10..=245u8),
                rng.random_range(10..=245u8),
                rng.random_range(10..=245u8),
            ];
            let dist: i32 = (0..3).map(|c| (bg[c] as i32 - skin[c] as i32).abs()).sum();
            if dist > 120 {
                break bg;
            }
        };
        let shade = rng.random_range(0.15..0.45);
        let brow_color = lerp3([20.0, 14.0, 10.0], [skin[0] as f64, skin[1] as f64, skin[2] as f64], shade);
        SyntheticFaceParams {
            seed,
            skin,
            background,
            brow_color,
            head_axes: (rng.random_range(19.0..23.0), rng.random_range(24.0..27.0)),
            eye_spacing: rng.random_range(17.0..21.0),
            gains: AuGains::default(),
            map,
        }
    }
}

/// Geometry actually used for a render, in canvas pixels (y grows down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceTrace {
    pub scale: f64,
    /// Upward brow displacement.
    pub brow_lift: f64,
    /// Downward displacement of the upper lid.
    pub lid_drop: f64,
    /// Upward displacement of the mouth corners.
    pub corner_lift: f64,
    /// Vertical mouth opening at the center.
    pub mouth_opening: f64,
    pub brow_center_y: f64,
    pub upper_lid_y: f64,
    pub mouth_corner_y: f64,
    /// Pixel rows strictly above this only depend on eye AUs.
    pub nose_line_y: f64,
    /// Eye block `(y0, y1, x0, x1)`, half-open, in pixels.
    pub eye_block: (usize, usize, usize, usize),
    /// Mouth block `(y0, y1, x0, x1)`, half-open, in pixels.
    pub mouth_block: (usize, usize, usize, usize),
}

struct Shape {
    brow: f64,
    lid: f64,
    smile: f64,
    jaw: f64,
}

impl SyntheticFaceParams {
    fn color_at(&self, s: &Shape, x: f64, y: f64) -> [f64; 3] {
        let f = |c: [u8; 3]| [c[0] as f64, c[1] as f64, c[2] as f64];
        let (ax, ay) = self.head_axes;
        let (hx, hy) = ((x - 32.0) / ax, (y - 33.0) / ay);
        if hx * hx + hy * hy > 1.0 {
            return f(self.background);
        }
        let skin = f(self.skin);
        let lid_skin = skin.map(|v| v * 0.82);

        // Eyes and brows.
        for side in [-1.0, 1.0] {
            let ex = 32.0 + side * self.eye_spacing / 2.0;
            let bx = (x - ex).abs();
            let brow_y = BROW_Y - self.gains.brow_raise * s.brow;
            if bx <= BROW_HALF_W && (y - brow_y).abs() <= BROW_HALF_T {
                return f(self.brow_color);
            }
            let (u, v) = ((x - ex) / EYE_HALF_W, (y - EYE_Y) / EYE_HALF_H);
            if u * u + v * v <= 1.0 {
                let lid_top = EYE_Y - EYE_HALF_H + self.gains.lid_close * s.lid;
                if y < lid_top {
                    return lid_skin;
                }
                let (px, py) = (x - ex, y - EYE_Y);
                if px * px + py * py <= 1.8 * 1.8 {
                    return [30.0, 28.0, 40.0];
                }
                return [240.0, 240.0, 236.0];
            }
        }

        // Nose.
        let (nx, ny) = ((x - 32.0) / 2.2, (y - 35.0) / 3.0);
        if nx * nx + ny * ny <= 1.0 {
            return skin.map(|v| v * 0.88);
        }

        // Mouth.
        let t = (x - 32.0) / MOUTH_HALF_W;
        if t.abs() <= 1.0 {
            let upper = MOUTH_Y - self.gains.smile_lift * s.smile * t * t;
            let opening = self.gains.jaw_drop * s.jaw * (1.0 - t * t);
            let lower = upper + opening;
            if (y - upper).abs() <= LIP_HALF_T || (y - lower).abs() <= LIP_HALF_T {
                return [170.0, 62.0, 72.0];
            }
            if y > upper && y < lower {
                return [50.0, 16.0, 22.0];
            }
        }
        skin
    }

    /// Renders a `size x size` face for `aus`. Pixel values are quantized to
    /// 8 bits so the image survives PNG storage exactly.
    pub fn render(&self, aus: &AuVector, size: usize) -> Result<(ImageTensor, FaceTrace)> {
        if ![32, 64, 128].contains(&size) {
            return Err(Error::invalid(format!("synthetic face size must be 32, 64 or 128, got {size}")));
        }
        let [pb, pl, ps, pj] = self.map.resolve(aus.len())?;
        let shape = Shape {
            brow: aus.get(pb),
            lid: aus.get(pl),
            smile: aus.get(ps),
            jaw: aus.get(pj),
        };
        let k = size as f64 / 64.0;
        let mut rgb = vec![0u8; 3 * size * size];
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / k;
                        let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / k;
                        let c = self.color_at(&shape, x, y);
                        for i in 0..3 {
                            acc[i] += c[i];
                        }
                    }
                }
                for i in 0..3 {
                    rgb[3 * (py * size + px) + i] = (acc[i] * inv).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        let image = ImageTensor::from_rgb8(size, size, &rgb)?;
        let px = |v: f64| (v * k).max(0.0) as usize;
        let brow_lift = self.gains.brow_raise * shape.brow * k;
        let lid_drop = self.gains.lid_close * shape.lid * k;
        let corner_lift = self.gains.smile_lift * shape.smile * k;
        let trace = FaceTrace {
            scale: k,
            brow_lift,
            lid_drop,
            corner_lift,
            mouth_opening: self.gains.jaw_drop * shape.jaw * k,
            brow_center_y: BROW_Y * k - brow_lift,
            upper_lid_y: (EYE_Y - EYE_HALF_H) * k + lid_drop,
            mouth_corner_y: MOUTH_Y * k - corner_lift,
            nose_line_y: NOSE_LINE * k,
            eye_block: (px(14.0), px(31.0), px(8.0), px(56.0)),
            mouth_block: (px(41.0), px(56.0), px(32.0 - MOUTH_HALF_W - 1.0), px(32.0 + MOUTH_HALF_W + 1.0)),
        };
        Ok((image, trace))
    }
}

/// Pixels that are background for every identity at `size`: outside the
/// largest head ellipse any identity can draw, with a margin of 1.5 canvas
/// units. Row-major, `size * size` entries.
pub fn background_mask(size: usize) -> Vec<bool> {
    let k = size as f64 / 64.0;
    let (ax, ay) = (23.0 + 1.5, 27.0 + 1.5);
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let (x, y) = ((px as f64 + 0.5) / k, (py as f64 + 0.5) / k);
            let (hx, hy) = ((x - 32.0) / ax, (y - 33.0) / ay);
            out.push(hx * hx + hy * hy > 1.0);
        }
    }
    out
}

/// Settings for a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub schema: AuSchema,
    pub map: SyntheticAuMap,
    /// Probability that each synthetic AU is active in a sample.
    pub active_prob: f64,
}

impl SyntheticSpec {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        let schema = AuSchema::default();
        let map = SyntheticAuMap::for_schema(&schema);
        SyntheticSpec {
            count,
            size,
            seed,
            schema,
            map,
            active_prob: 0.5,
        }
    }

    pub fn with_schema(mut self, schema: AuSchema, map: SyntheticAuMap) -> Self {
        self.schema = schema;
        self.map = map;
        self
    }
}

/// Draws `spec.count` identities and AU vectors and renders them. Only the
/// four mapped AUs are ever non-zero.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<AnnotatedImage>> {
    Ok(generate_traced(spec)?.into_iter().map(|(a, _)| a).collect())
}

/// [`generate`] plus the render geometry of every sample.
pub fn generate_traced(spec: &SyntheticSpec) -> Result<Vec<(AnnotatedImage, FaceTrace)>> {
    let positions = spec.map.resolve(spec.schema.len())?;
    let mut rng = seeded(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let identity: u64 = rng.random();
        let mut values = vec![0.0; spec.schema.len()];
        for &p in &positions {
            if rng.random::<f64>() < spec.active_prob {
                values[p] = (rng.random::<f64>() * 100.0).round() / 100.0;
            }
        }
        let aus = AuVector::clamped(values);
        let params = SyntheticFaceParams::sample(identity, spec.map);
        let (image, trace) = params.render(&aus, spec.size)?;
        let item = AnnotatedImage {
            image,
            aus,
            source: format!("synth_{i:05}.png"),
        };
        out.push((item, trace));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SyntheticFaceParams {
        SyntheticFaceParams::sample(11, SyntheticAuMap::for_schema(&AuSchema::default()))
    }

    fn aus(brow: f64, lid: f64, smile: f64, jaw: f64) -> AuVector {
        let schema = AuSchema::default();
        let m = SyntheticAuMap::for_schema(&schema);
        schema
            .zeros()
            .with(m.brow_raise.unwrap(), brow)
            .with(m.lid_close.unwrap(), lid)
            .with(m.smile.unwrap(), smile)
            .with(m.jaw_drop.unwrap(), jaw)
    }

    fn block_equal(a: &ImageTensor, b: &ImageTensor, block: (usize, usize, usize, usize)) -> bool {
        let (y0, y1, x0, x1) = block;
        (0..3).all(|c| (y0..y1).all(|y| (x0..x1).all(|x| a.get(c, y, x) == b.get(c, y, x))))
    }

    #[test]
    fn background_mask_is_background_for_every_identity() {
        let mask = background_mask(64);
        assert!(mask.iter().filter(|&&b| b).count() > 64 * 64 / 4);
        for seed in 0..20 {
            let p = SyntheticFaceParams::sample(seed, SyntheticAuMap::for_schema(&AuSchema::default()));
            let (img, _) = p.render(&aus(1.0, 1.0, 1.0, 1.0), 64).unwrap();
            let bg = p.background.map(|v| v as f32 / 127.5 - 1.0);
            for (i, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
                for c in 0..3 {
                    assert!((img.get(c, i / 64, i % 64) - bg[c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn neutral_render_is_deterministic() {
        let p = params();
        let (a, _) = p.render(&aus(0.0, 0.0, 0.0, 0.0), 64).unwrap();
        let (b, _) = p.render(&aus(0.0, 0.0, 0.0, 0.0), 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn smile_lifts_corners_by_gain() {
        let p = params();
        let (_, t0) = p.render(&aus(0.0, 0.0, 0.0, 0.0), 64).unwrap();
        let (_, t1) = p.render(&aus(0.0, 0.0, 1.0, 0.0), 64).unwrap();
        assert_eq!(t0.mouth_corner_y - t1.mouth_corner_y, p.gains.smile_lift);
    }

    #[test]
    fn jaw_only_changes_pixels_below_nose_line() {
        let p = params();
        let (a, t) = p.render(&aus(0.3, 0.2, 0.5, 0.0), 64).unwrap();
        let (b, _) = p.render(&aus(0.3, 0.2, 0.5, 1.0), 64).unwrap();
        assert_ne!(a, b);
        let rows = t.nose_line_y.floor() as usize;
        assert!(block_equal(&a, &b, (0, rows, 0, 64)));
    }

    #[test]
    fn eye_and_mouth_units_are_local() {
        let p = params();
        let (base, t) = p.render(&aus(0.0, 0.0, 0.0, 0.0), 64).unwrap();
        let (eyes, _) = p.render(&aus(1.0, 1.0, 0.0, 0.0), 64).unwrap();
        let (mouth, _) = p.render(&aus(0.0, 0.0, 1.0, 1.0), 64).unwrap();
        assert!(block_equal(&base, &eyes, t.mouth_block));
        assert!(!block_equal(&base, &eyes, t.eye_block));
        assert!(block_equal(&base, &mouth, t.eye_block));
        assert!(!block_equal(&base, &mouth, t.mouth_block));
    }

    #[test]
    fn landmarks_increase_strictly_with_intensity() {
        let p = params();
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        let traces: Vec<FaceTrace> = levels
            .iter()
            .map(|&v| p.render(&aus(v, v, v, v), 32).unwrap().1)
            .collect();
        for w in traces.windows(2) {
            assert!(w[1].brow_lift > w[0].brow_lift);
            assert!(w[1].lid_drop > w[0].lid_drop);
            assert!(w[1].corner_lift > w[0].corner_lift);
            assert!(w[1].mouth_opening > w[0].mouth_opening);
        }
    }

    #[test]
    fn background_pixels_keep_background_color() {
        let p = params();
        let (img, _) = p.render(&aus(1.0, 1.0, 1.0, 1.0), 64).unwrap();
        let bg = ImageTensor::from_rgb8(1, 1, &p.background).unwrap();
        for c in 0..3 {
            assert_eq!(img.get(c, 0, 0), bg.get(c, 0, 0));
            assert_eq!(img.get(c, 63, 63), bg.get(c, 0, 0));
        }
    }

    #[test]
    fn unmapped_unit_is_rejected() {
        let mut p = params();
        p.map.smile = None;
        assert!(p.render(&aus(0.0, 0.0, 0.0, 0.0), 64).is_err());
        assert!(params().render(&aus(0.0, 0.0, 0.0, 0.0), 48).is_err());
    }
}
