//! Label-aware training augmentation: geometric transforms of a labeled
//! sample and four-way mosaic composition.
//!
//! Boxes are mapped through the transform as corner hulls, clipped to the
//! output frame and dropped when less than `min_visible_fraction` of the
//! mapped area survives. Every drop is logged. Pixel buffers, when present,
//! are resampled by nearest neighbour at pixel centres.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{view_seed, MockRng};
use crate::error::{Error, Result};
use crate::geometry::{clip_to_region, transform_box, AffineTransform, BBox, GroundTruthBox, Size};
use crate::tta::TransformSpec;

pub const DEFAULT_MIN_VISIBLE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image_id: String,
    pub canvas: Size,
    pub boxes: Vec<GroundTruthBox>,
    /// Row-major 8-bit grayscale, one byte per pixel.
    pub pixels: Option<Vec<u8>>,
}

impl LabeledSample {
    pub fn new(image_id: impl Into<String>, canvas: Size, boxes: Vec<GroundTruthBox>) -> Self {
        LabeledSample {
            image_id: image_id.into(),
            canvas,
            boxes,
            pixels: None,
        }
    }

    pub fn with_pixels(mut self, pixels: Vec<u8>) -> Result<Self> {
        let (w, h) = raster_dims(self.canvas)?;
        if pixels.len() != w * h {
            return Err(Error::invalid(format!(
                "pixel buffer has {} bytes, canvas {w}x{h} needs {}",
                pixels.len(),
                w * h
            )));
        }
        self.pixels = Some(pixels);
        Ok(self)
    }
}

fn raster_dims(canvas: Size) -> Result<(usize, usize)> {
    let ok = |v: f64| v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64;
    if !(ok(canvas.width) && ok(canvas.height)) {
        return Err(Error::invalid(format!(
            "pixel buffers need a whole-pixel canvas, got {}x{}",
            canvas.width, canvas.height
        )));
    }
    Ok((canvas.width as usize, canvas.height as usize))
}

/// A training transform. Rotation and shear act about the canvas centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentSpec {
    Identity,
    HFlip,
    VFlip,
    Shift { dx: f64, dy: f64 },
    Crop { rect: BBox, rescale: bool },
    Scale { sx: f64, sy: f64 },
    Rotation { degrees: f64 },
    Shear { ax_deg: f64, ay_deg: f64 },
}

impl From<TransformSpec> for AugmentSpec {
    fn from(t: TransformSpec) -> Self {
        match t {
            TransformSpec::Identity => AugmentSpec::Identity,
            TransformSpec::HFlip => AugmentSpec::HFlip,
            TransformSpec::VFlip => AugmentSpec::VFlip,
            TransformSpec::Shift { dx, dy } => AugmentSpec::Shift { dx, dy },
            TransformSpec::Crop { rect, rescale } => AugmentSpec::Crop { rect, rescale },
            TransformSpec::Scale { sx, sy } => AugmentSpec::Scale { sx, sy },
        }
    }
}

impl AugmentSpec {
    fn as_transform_spec(&self) -> Option<TransformSpec> {
        Some(match *self {
            AugmentSpec::Identity => TransformSpec::Identity,
            AugmentSpec::HFlip => TransformSpec::HFlip,
            AugmentSpec::VFlip => TransformSpec::VFlip,
            AugmentSpec::Shift { dx, dy } => TransformSpec::Shift { dx, dy },
            AugmentSpec::Crop { rect, rescale } => TransformSpec::Crop { rect, rescale },
            AugmentSpec::Scale { sx, sy } => TransformSpec::Scale { sx, sy },
            AugmentSpec::Rotation { .. } | AugmentSpec::Shear { .. } => return None,
        })
    }

    /// Source-to-output map and output canvas.
    pub fn resolve(&self, canvas: Size) -> Result<(AffineTransform, Size)> {
        if let Some(t) = self.as_transform_spec() {
            return Ok((t.view_transform(canvas)?, t.view_canvas(canvas)));
        }
        let (cx, cy) = (canvas.width / 2.0, canvas.height / 2.0);
        let t = match *self {
            AugmentSpec::Rotation { degrees } if degrees.is_finite() => {
                AffineTransform::rotation_deg(degrees, cx, cy)?
            }
            AugmentSpec::Shear { ax_deg, ay_deg }
                if ax_deg.abs() < 90.0 && ay_deg.abs() < 90.0 =>
            {
                AffineTransform::shear_deg(ax_deg, ay_deg, cx, cy)?
            }
            _ => return Err(Error::invalid(format!("invalid augmentation {self:?}"))),
        };
        Ok((t, canvas))
    }
}

/// Why and where a label was removed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedBox {
    pub image_id: String,
    /// Index into the input sample's boxes.
    pub index: usize,
    pub class_id: u32,
    pub visible_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub sample: LabeledSample,
    pub dropped: Vec<DroppedBox>,
}

/// Maps, clips and filters `boxes` into `region`. Returns the kept boxes
/// with their input indices, and the drop log.
fn remap_boxes(
    image_id: &str,
    boxes: &[GroundTruthBox],
    t: &AffineTransform,
    region: &BBox,
    min_visible: f64,
) -> (Vec<(usize, GroundTruthBox)>, Vec<DroppedBox>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (index, g) in boxes.iter().enumerate() {
        let mapped = transform_box(t, &g.bbox);
        match clip_to_region(&mapped, region) {
            Some((bbox, frac)) if frac >= min_visible => {
                kept.push((index, GroundTruthBox::new(bbox, g.class_id)));
            }
            other => dropped.push(DroppedBox {
                image_id: image_id.to_string(),
                index,
                class_id: g.class_id,
                visible_fraction: other.map_or(0.0, |(_, f)| f),
            }),
        }
    }
    (kept, dropped)
}

fn check_min_visible(v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("min_visible_fraction must be in (0, 1], got {v}")))
    }
}

/// Nearest-neighbour lookup of output pixel `(x, y)` through the
/// output-to-source map; 0 outside the source.
fn sample_nn(src: &[u8], sw: usize, sh: usize, inv: &AffineTransform, x: usize, y: usize) -> u8 {
    let (u, v) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
    let (u, v) = (u.floor(), v.floor());
    if u < 0.0 || v < 0.0 || u >= sw as f64 || v >= sh as f64 {
        0
    } else {
        src[v as usize * sw + u as usize]
    }
}

/// Applies `spec` to a sample.
pub fn apply_labeled(sample: &LabeledSample, spec: &AugmentSpec, min_visible: f64) -> Result<Augmented> {
    check_min_visible(min_visible)?;
    let (t, out_canvas) = spec.resolve(sample.canvas)?;
    let (kept, dropped) = remap_boxes(&sample.image_id, &sample.boxes, &t, &out_canvas.bbox(), min_visible);
    let pixels = match &sample.pixels {
        None => None,
        Some(src) => {
            let (sw, sh) = raster_dims(sample.canvas)?;
            let (ow, oh) = raster_dims(out_canvas)?;
            let inv = t.inverse();
            let mut out = vec![0u8; ow * oh];
            out.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
                for (x, px) in row.iter_mut().enumerate() {
                    *px = sample_nn(src, sw, sh, &inv, x, y);
                }
            });
            Some(out)
        }
    };
    Ok(Augmented {
        sample: LabeledSample {
            image_id: sample.image_id.clone(),
            canvas: out_canvas,
            boxes: kept.into_iter().map(|(_, g)| g).collect(),
            pixels,
        },
        dropped,
    })
}

/// Ranges for randomly drawn training transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub max_rotation_deg: f64,
    pub max_shear_deg: f64,
    /// Largest shift as a fraction of each canvas side.
    pub max_shift_frac: f64,
    /// Smallest crop side as a fraction of the canvas; 1 disables cropping.
    pub min_crop_frac: f64,
    pub min_visible_fraction: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip_p: 0.5,
            vflip_p: 0.0,
            max_rotation_deg: 10.0,
            max_shear_deg: 5.0,
            max_shift_frac: 0.1,
            min_crop_frac: 0.8,
            min_visible_fraction: DEFAULT_MIN_VISIBLE,
        }
    }
}

/// Draws the sequence of transforms for one sample. Draw order: hflip,
/// vflip, rotation, shear x, shear y, shift x, shift y, crop side, crop x,
/// crop y.
pub fn random_specs(policy: &AugmentPolicy, canvas: Size, seed: u64) -> Vec<AugmentSpec> {
    let mut rng = MockRng::new(seed);
    let mut sym = |m: f64| (2.0 * rng.uniform() - 1.0) * m;
    let mut specs = Vec::new();
    let hflip = sym(0.5) + 0.5 < policy.hflip_p;
    let vflip = sym(0.5) + 0.5 < policy.vflip_p;
    let rot = sym(policy.max_rotation_deg);
    let (ax, ay) = (sym(policy.max_shear_deg), sym(policy.max_shear_deg));
    let (dx, dy) = (
        sym(policy.max_shift_frac) * canvas.width,
        sym(policy.max_shift_frac) * canvas.height,
    );
    let side = 0.5 * (sym(1.0) + 1.0) * (1.0 - policy.min_crop_frac) + policy.min_crop_frac;
    let (fx, fy) = (0.5 * (sym(1.0) + 1.0), 0.5 * (sym(1.0) + 1.0));
    if hflip {
        specs.push(AugmentSpec::HFlip);
    }
    if vflip {
        specs.push(AugmentSpec::VFlip);
    }
    if rot != 0.0 {
        specs.push(AugmentSpec::Rotation { degrees: rot });
    }
    if ax != 0.0 || ay != 0.0 {
        specs.push(AugmentSpec::Shear { ax_deg: ax, ay_deg: ay });
    }
    if dx != 0.0 || dy != 0.0 {
        specs.push(AugmentSpec::Shift { dx, dy });
    }
    if side < 1.0 {
        let (w, h) = (canvas.width * side, canvas.height * side);
        let (x0, y0) = (fx * (canvas.width - w), fy * (canvas.height - h));
        specs.push(AugmentSpec::Crop {
            rect: BBox { x_min: x0, y_min: y0, x_max: x0 + w, y_max: y0 + h },
            rescale: true,
        });
    }
    specs
}

/// Augments every sample with its own seed derived from `global_seed` and
/// the image id. Output order follows input order.
pub fn augment_batch(
    samples: &[LabeledSample],
    policy: &AugmentPolicy,
    global_seed: u64,
) -> Result<Vec<Augmented>> {
    check_min_visible(policy.min_visible_fraction)?;
    samples
        .par_iter()
        .map(|s| {
            let specs = random_specs(policy, s.canvas, view_seed(global_seed, &s.image_id, "augment"));
            let mut cur = Augmented { sample: s.clone(), dropped: Vec::new() };
            for spec in &specs {
                let next = apply_labeled(&cur.sample, spec, policy.min_visible_fraction)?;
                cur.sample = next.sample;
                cur.dropped.extend(next.dropped);
            }
            Ok(cur)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosaicParams {
    /// Side of the square output canvas.
    pub size: f64,
    /// Requested pivot in output pixels, clamped into the clamp region.
    pub pivot: (f64, f64),
    pub min_visible_fraction: f64,
    /// Pivot clamp range per axis, as fractions of `size`.
    pub clamp: (f64, f64),
}

impl MosaicParams {
    pub fn centered(size: f64) -> Self {
        MosaicParams {
            size,
            pivot: (size / 2.0, size / 2.0),
            min_visible_fraction: DEFAULT_MIN_VISIBLE,
            clamp: (0.25, 0.75),
        }
    }

    /// Pivot drawn uniformly over the clamp region.
    pub fn random(size: f64, seed: u64) -> Self {
        let mut p = Self::centered(size);
        let mut rng = MockRng::new(seed);
        let (lo, hi) = (p.clamp.0 * size, p.clamp.1 * size);
        let px = lo + rng.uniform() * (hi - lo);
        let py = lo + rng.uniform() * (hi - lo);
        p.pivot = (px, py);
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size.is_finite() && self.size > 0.0) {
            return Err(Error::invalid("mosaic size must be positive"));
        }
        check_min_visible(self.min_visible_fraction)?;
        let (lo, hi) = self.clamp;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("pivot clamp must satisfy 0 < lo <= hi < 1"));
        }
        if !(self.pivot.0.is_finite() && self.pivot.1.is_finite()) {
            return Err(Error::invalid("pivot must be finite"));
        }
        Ok(())
    }

    pub fn effective_pivot(&self) -> (f64, f64) {
        let (lo, hi) = (self.clamp.0 * self.size, self.clamp.1 * self.size);
        (self.pivot.0.clamp(lo, hi), self.pivot.1.clamp(lo, hi))
    }

    /// Top-left, top-right, bottom-left, bottom-right.
    pub fn quadrants(&self) -> [BBox; 4] {
        let (px, py) = self.effective_pivot();
        let s = self.size;
        let r = |x_min, y_min, x_max, y_max| BBox { x_min, y_min, x_max, y_max };
        [
            r(0.0, 0.0, px, py),
            r(px, 0.0, s, py),
            r(0.0, py, px, s),
            r(px, py, s, s),
        ]
    }
}

/// Where a mosaic box came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoxOrigin {
    pub sample: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    pub sample: LabeledSample,
    pub pivot: (f64, f64),
    pub quadrants: [BBox; 4],
    /// Parallel to `sample.boxes`.
    pub origins: Vec<BoxOrigin>,
    pub dropped: Vec<DroppedBox>,
}

fn quadrant_map(src: Size, quad: &BBox) -> Result<AffineTransform> {
    Ok(AffineTransform::scale(quad.width() / src.width, quad.height() / src.height)?
        .then(&AffineTransform::translation(quad.x_min, quad.y_min)))
}

/// Stretches four samples onto the quadrants around the pivot, in list
/// order. Pixels are composited only when all four samples carry them.
pub fn mosaic(samples: &[LabeledSample], params: &MosaicParams, image_id: impl Into<String>) -> Result<Mosaic> {
    params.validate()?;
    if samples.len() != 4 {
        return Err(Error::invalid(format!("mosaic needs exactly 4 samples, got {}", samples.len())));
    }
    for s in samples {
        if !(s.canvas.width > 0.0 && s.canvas.height > 0.0) {
            return Err(Error::invalid(format!("sample '{}' has an empty canvas", s.image_id)));
        }
    }
    let quadrants = params.quadrants();
    let maps = samples
        .iter()
        .zip(&quadrants)
        .map(|(s, q)| quadrant_map(s.canvas, q))
        .collect::<Result<Vec<_>>>()?;

    let mut boxes = Vec::new();
    let mut origins = Vec::new();
    let mut dropped = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (kept, d) = remap_boxes(&s.image_id, &s.boxes, &maps[i], &quadrants[i], params.min_visible_fraction);
        for (index, g) in kept {
            boxes.push(g);
            origins.push(BoxOrigin { sample: i, index });
        }
        dropped.extend(d);
    }

    let canvas = Size { width: params.size, height: params.size };
    let pixels = if samples.iter().all(|s| s.pixels.is_some()) {
        let (ow, oh) = raster_dims(canvas)?;
        let dims = samples.iter().map(|s| raster_dims(s.canvas)).collect::<Result<Vec<_>>>()?;
        let inverses: Vec<AffineTransform> = maps.iter().map(AffineTransform::inverse).collect();
        let (px, py) = params.effective_pivot();
        let mut out = vec![0u8; ow * oh];
        out.par_chunks_mut(ow).enumerate().for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                let right = x as f64 + 0.5 >= px;
                let bottom = y as f64 + 0.5 >= py;
                let q = usize::from(right) + 2 * usize::from(bottom);
                let (sw, sh) = dims[q];
                let src = samples[q].pixels.as_deref().expect("checked above");
                *v = sample_nn(src, sw, sh, &inverses[q], x, y);
            }
        });
        Some(out)
    } else {
        None
    };

    Ok(Mosaic {
        sample: LabeledSample {
            image_id: image_id.into(),
            canvas,
            boxes,
            pixels,
        },
        pivot: params.effective_pivot(),
        quadrants,
        origins,
        dropped,
    })
}
