//! Deterministic synthetic RGB-D scenes with sensor-style invalid regions.
//!
//! A scene is a background gradient plane with axis-aligned rectangles and
//! ellipses floating in front of it; color follows the owning surface, so
//! depth structure is visible in RGB. Holes are carved in three patterns:
//! per-pixel speckle, shadow bands hugging depth discontinuities, and large
//! random-walk blobs. Everything is a pure function of the `SceneSpec`.

pub mod dataset;
pub mod netpbm;

use crate::error::{Error, Result};
use crate::model::DepthImage;
use crate::rng::{fnv1a, Rng};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Relative weights of the three hole patterns.
    pub w_speckle: f64,
    pub w_edge: f64,
    pub w_blob: f64,
    /// Target fraction of pixels carved invalid, 0..=0.9.
    pub hole_area: f64,
    /// Amplitude of per-pixel color noise; creates texture on flat surfaces.
    pub texture_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 1,
            height: 64,
            width: 64,
            objects_min: 4,
            objects_max: 9,
            depth_min: 0.5,
            depth_max: 10.0,
            w_speckle: 0.15,
            w_edge: 0.25,
            w_blob: 0.6,
            hole_area: 0.25,
            texture_noise: 0.06,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::config(format!(
                "scene dims {}x{} must be positive and divisible by 16",
                self.height, self.width
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::config("objects_min must be <= objects_max".to_string()));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max && self.depth_max <= 65.0) {
            return Err(Error::config(format!(
                "depth range [{}, {}] must satisfy 0 < min < max <= 65",
                self.depth_min, self.depth_max
            )));
        }
        if self.w_speckle < 0.0 || self.w_edge < 0.0 || self.w_blob < 0.0 {
            return Err(Error::config("hole weights must be non-negative".to_string()));
        }
        if self.w_speckle + self.w_edge + self.w_blob <= 0.0 {
            return Err(Error::config("hole weights must sum to > 0".to_string()));
        }
        if !(0.0..=0.9).contains(&self.hole_area) {
            return Err(Error::config(format!(
                "hole area fraction {} outside [0, 0.9]",
                self.hole_area
            )));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return Err(Error::config("texture noise must be in [0, 1]".to_string()));
        }
        Ok(())
    }

    /// Stable hash of the generation settings (seed excluded); stamped into
    /// image headers next to the seed.
    pub fn content_hash(&self) -> u64 {
        let text = format!(
            "h={};w={};obj={}..{};depth={:.6}..{:.6};w={:.6},{:.6},{:.6};area={:.6};tex={:.6}",
            self.height,
            self.width,
            self.objects_min,
            self.objects_max,
            self.depth_min,
            self.depth_max,
            self.w_speckle,
            self.w_edge,
            self.w_blob,
            self.hole_area,
            self.texture_noise
        );
        fnv1a(text.as_bytes())
    }

    pub fn with_seed(&self, seed: u64) -> SceneSpec {
        SceneSpec { seed, ..self.clone() }
    }
}

/// Paired RGB, dense ground-truth depth, raw depth with carved holes, and the
/// hole mask. raw = gt * (1 - hole).
#[derive(Clone, Debug)]
pub struct RgbdSample {
    /// (1,3,H,W), values in [0,1].
    pub rgb: Tensor,
    /// (1,1,H,W), meters, strictly positive.
    pub gt: Tensor,
    pub raw: DepthImage,
    pub hole_mask: Vec<bool>,
}

impl RgbdSample {
    pub fn hole_fraction(&self) -> f64 {
        self.hole_mask.iter().filter(|&&m| m).count() as f64 / self.hole_mask.len() as f64
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.raw.h, self.raw.w)
    }
}

#[derive(Clone, Copy, Debug)]
enum ObjKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug)]
struct SceneObject {
    kind: ObjKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    z: f64,
    color: [f64; 3],
}

impl SceneObject {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 - self.cy) / self.ry;
        let dx = (x as f64 - self.cx) / self.rx;
        match self.kind {
            ObjKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ObjKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

struct SceneGeometry {
    objects: Vec<SceneObject>,
    bg_top: f64,
    bg_bottom: f64,
    bg_tilt: f64,
    bg_color: [f64; 3],
}

impl SceneGeometry {
    fn background_at(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let fy = y as f64 / (h - 1).max(1) as f64;
        let fx = x as f64 / (w - 1).max(1) as f64;
        self.bg_top + (self.bg_bottom - self.bg_top) * fy + self.bg_tilt * fx
    }
}

fn sample_geometry(spec: &SceneSpec, rng: &mut Rng) -> SceneGeometry {
    let span = spec.depth_max - spec.depth_min;
    // Background plane sits in the far half of the range.
    let bg_top = spec.depth_min + span * rng.range_f64(0.55, 0.95);
    let bg_bottom = spec.depth_min + span * rng.range_f64(0.55, 0.95);
    let bg_tilt = span * rng.range_f64(-0.05, 0.05);
    let bg_color = [
        rng.range_f64(0.15, 0.9),
        rng.range_f64(0.15, 0.9),
        rng.range_f64(0.15, 0.9),
    ];
    let count = rng.range_usize(spec.objects_min, spec.objects_max);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = if rng.chance(0.5) { ObjKind::Rect } else { ObjKind::Ellipse };
        objects.push(SceneObject {
            kind,
            cy: rng.range_f64(0.0, (spec.height - 1) as f64),
            cx: rng.range_f64(0.0, (spec.width - 1) as f64),
            ry: rng.range_f64(0.06, 0.28) * spec.height as f64,
            rx: rng.range_f64(0.06, 0.28) * spec.width as f64,
            // Objects float in front of the background plane.
            z: spec.depth_min + span * rng.range_f64(0.02, 0.5),
            color: [
                rng.range_f64(0.1, 1.0),
                rng.range_f64(0.1, 1.0),
                rng.range_f64(0.1, 1.0),
            ],
        });
    }
    SceneGeometry {
        objects,
        bg_top,
        bg_bottom,
        bg_tilt,
        bg_color,
    }
}

/// Render a scene and carve its holes. Deterministic in the spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<RgbdSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng_scene = Rng::stream(spec.seed, fnv1a(b"scene"));
    let geo = sample_geometry(spec, &mut rng_scene);

    // Depth by nearest surface; color by the owning surface, shaded slightly
    // with distance so geometry shows up in RGB.
    let mut gt = vec![0.0f64; h * w];
    let mut rgb = vec![0.0f64; 3 * h * w];
    let span = spec.depth_max - spec.depth_min;
    let mut noise = Rng::stream(spec.seed, fnv1a(b"texture"));
    for y in 0..h {
        for x in 0..w {
            let mut z = geo.background_at(y, x, h, w);
            let mut color = geo.bg_color;
            for obj in &geo.objects {
                if obj.z < z && obj.covers(y, x) {
                    z = obj.z;
                    color = obj.color;
                }
            }
            gt[y * w + x] = z;
            let shade = 1.0 - 0.25 * ((z - spec.depth_min) / span).clamp(0.0, 1.0);
            for ch in 0..3 {
                let n = noise.range_f64(-spec.texture_noise, spec.texture_noise);
                rgb[(ch * h + y) * w + x] = (color[ch] * shade + n).clamp(0.0, 1.0);
            }
        }
    }

    let mut rng_holes = Rng::stream(spec.seed, fnv1a(b"holes"));
    let hole_mask = carve_mask(&gt, h, w, spec, &mut rng_holes);

    let raw_values: Vec<Real> = gt
        .iter()
        .zip(&hole_mask)
        .map(|(&z, &hole)| if hole { 0.0 } else { z as Real })
        .collect();
    let raw = DepthImage::from_values(h, w, raw_values)?;
    let gt_t = Tensor::new(
        Shape::new(1, 1, h, w),
        gt.iter().map(|&z| z as Real).collect(),
    )?;
    let rgb_t = Tensor::new(
        Shape::new(1, 3, h, w),
        rgb.iter().map(|&v| v as Real).collect(),
    )?;
    Ok(RgbdSample {
        rgb: rgb_t,
        gt: gt_t,
        raw,
        hole_mask,
    })
}

/// Depth jump treated as a discontinuity for shadow bands, meters.
pub const EDGE_JUMP: f64 = 0.1;
/// Dilation radius of the shadow band around a discontinuity pixel.
pub const EDGE_RADIUS: usize = 2;

/// Carve holes into a dense map. Speckle and edge shadows take their share of
/// the area budget first; blobs then fill up whatever is left, which keeps
/// the achieved fraction near the target whenever the blob weight is nonzero.
pub fn carve_holes(gt: &Tensor, spec: &SceneSpec) -> Result<(DepthImage, Vec<bool>)> {
    spec.validate()?;
    let s = gt.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape(format!("carve_holes expects (1,1,H,W), got {s}")));
    }
    let gt64: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let mut rng = Rng::stream(spec.seed, fnv1a(b"holes"));
    let mask = carve_mask(&gt64, s.h, s.w, spec, &mut rng);
    let raw_values: Vec<Real> = gt
        .data()
        .iter()
        .zip(&mask)
        .map(|(&z, &hole)| if hole { 0.0 } else { z })
        .collect();
    Ok((DepthImage::from_values(s.h, s.w, raw_values)?, mask))
}

fn carve_mask(gt: &[f64], h: usize, w: usize, spec: &SceneSpec, rng: &mut Rng) -> Vec<bool> {
    let total = h * w;
    let mut mask = vec![false; total];
    if spec.hole_area <= 0.0 {
        return mask;
    }
    let wsum = spec.w_speckle + spec.w_edge + spec.w_blob;
    let target_total = spec.hole_area * total as f64;

    // Speckle: per-pixel Bernoulli with its share of the budget.
    let p_speckle = spec.hole_area * spec.w_speckle / wsum;
    if p_speckle > 0.0 {
        for m in mask.iter_mut() {
            if rng.chance(p_speckle) {
                *m = true;
            }
        }
    }

    // Edge shadows: dilate depth discontinuities into a band, then thin the
    // band down to its share of the budget.
    if spec.w_edge > 0.0 {
        let band = discontinuity_band(gt, h, w, EDGE_JUMP, EDGE_RADIUS);
        let band_px: Vec<usize> = (0..total).filter(|&i| band[i]).collect();
        let edge_target = target_total * spec.w_edge / wsum;
        let keep_p = if band_px.is_empty() {
            0.0
        } else {
            (edge_target / band_px.len() as f64).min(1.0)
        };
        for &i in &band_px {
            if rng.chance(keep_p) {
                mask[i] = true;
            }
        }
    }

    // Blobs: random walks with a round brush, painting until the remaining
    // budget is spent.
    if spec.w_blob > 0.0 {
        let mut carved = mask.iter().filter(|&&m| m).count() as f64;
        let mut guard = 0usize;
        while carved < target_total && guard < 10_000 {
            guard += 1;
            let mut y = rng.range_usize(0, h - 1) as isize;
            let mut x = rng.range_usize(0, w - 1) as isize;
            let brush = rng.range_usize(1, 3) as isize;
            let steps = rng.range_usize(20, 160);
            for _ in 0..steps {
                for dy in -brush..=brush {
                    for dx in -brush..=brush {
                        if dy * dy + dx * dx > brush * brush {
                            continue;
                        }
                        let (py, px) = (y + dy, x + dx);
                        if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                            continue;
                        }
                        let i = py as usize * w + px as usize;
                        if !mask[i] {
                            mask[i] = true;
                            carved += 1.0;
                        }
                    }
                }
                if carved >= target_total {
                    break;
                }
                y = (y + rng.range_usize(0, 4) as isize - 2).clamp(0, h as isize - 1);
                x = (x + rng.range_usize(0, 4) as isize - 2).clamp(0, w as isize - 1);
            }
        }
    }

    mask
}

/// Pixels within `radius` (Euclidean) of a forward-difference depth jump
/// larger than `jump`.
pub fn discontinuity_band(gt: &[f64], h: usize, w: usize, jump: f64, radius: usize) -> Vec<bool> {
    let mut edge = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let z = gt[y * w + x];
            if y + 1 < h && (gt[(y + 1) * w + x] - z).abs() > jump {
                edge[y * w + x] = true;
                edge[(y + 1) * w + x] = true;
            }
            if x + 1 < w && (gt[y * w + x + 1] - z).abs() > jump {
                edge[y * w + x] = true;
                edge[y * w + x + 1] = true;
            }
        }
    }
    let r = radius as isize;
    let mut band = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !edge[y as usize * w + x as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (py, px) = (y + dy, x + dx);
                    if py >= 0 && px >= 0 && py < h as isize && px < w as isize {
                        band[py as usize * w + px as usize] = true;
                    }
                }
            }
        }
    }
    band
}

/// Nearest-neighbor random crop + resize back to the original dims; the
/// augmentation used during training when enabled.
pub fn crop_resize(sample: &RgbdSample, rng: &mut Rng, min_scale: f64) -> Result<RgbdSample> {
    let (h, w) = sample.dims();
    let scale = rng.range_f64(min_scale, 1.0);
    let ch = ((h as f64 * scale).round() as usize).max(8).min(h);
    let cw = ((w as f64 * scale).round() as usize).max(8).min(w);
    let oy = rng.range_usize(0, h - ch);
    let ox = rng.range_usize(0, w - cw);

    let src_of = |y: usize, x: usize| -> (usize, usize) {
        let sy = oy + (y * ch) / h;
        let sx = ox + (x * cw) / w;
        (sy.min(h - 1), sx.min(w - 1))
    };

    let mut rgb = vec![0.0 as Real; 3 * h * w];
    let mut gt = vec![0.0 as Real; h * w];
    let mut raw = vec![0.0 as Real; h * w];
    let mut holes = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src_of(y, x);
            for c in 0..3 {
                rgb[(c * h + y) * w + x] = sample.rgb.data()[(c * h + sy) * w + sx];
            }
            gt[y * w + x] = sample.gt.data()[sy * w + sx];
            raw[y * w + x] = sample.raw.values()[sy * w + sx];
            holes[y * w + x] = sample.hole_mask[sy * w + sx];
        }
    }
    Ok(RgbdSample {
        rgb: Tensor::new(Shape::new(1, 3, h, w), rgb)?,
        gt: Tensor::new(Shape::new(1, 1, h, w), gt)?,
        raw: DepthImage::from_values(h, w, raw)?,
        hole_mask: holes,
    })
}
