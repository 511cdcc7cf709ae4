//! Test-time augmentation: run a detector on transformed copies of an
//! image, map each view's boxes back to the original frame and fuse them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ViewKey};
use crate::error::{Error, Result};
use crate::formats::IDENTITY_VIEW;
use crate::fusion::Merge;
use crate::geometry::{clip_to_region, transform_box, AffineTransform, BBox, Detection, Size};

/// A geometric view of an image, in absolute pixel units of the source canvas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    HFlip,
    VFlip,
    Shift { dx: f64, dy: f64 },
    /// Sub-rectangle of the source. With `rescale` the view has the source
    /// canvas size; otherwise it has the rectangle's size.
    Crop { rect: BBox, rescale: bool },
    Scale { sx: f64, sy: f64 },
}

impl TransformSpec {
    pub fn validate(&self, canvas: Size) -> Result<()> {
        match *self {
            TransformSpec::Shift { dx, dy } if !(dx.is_finite() && dy.is_finite()) => {
                Err(Error::invalid("shift offsets must be finite"))
            }
            TransformSpec::Crop { rect, .. } => {
                if !rect.is_valid() || rect.area() <= 0.0 {
                    return Err(Error::invalid("crop rectangle must have positive area"));
                }
                if rect.x_min < 0.0
                    || rect.y_min < 0.0
                    || rect.x_max > canvas.width
                    || rect.y_max > canvas.height
                {
                    return Err(Error::invalid("crop rectangle exceeds the canvas"));
                }
                Ok(())
            }
            TransformSpec::Scale { sx, sy } if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) => {
                Err(Error::invalid("scale factors must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Source-to-view coordinate map.
    pub fn view_transform(&self, canvas: Size) -> Result<AffineTransform> {
        self.validate(canvas)?;
        Ok(match *self {
            TransformSpec::Identity => AffineTransform::identity(),
            TransformSpec::HFlip => AffineTransform::hflip(canvas.width),
            TransformSpec::VFlip => AffineTransform::vflip(canvas.height),
            TransformSpec::Shift { dx, dy } => AffineTransform::translation(dx, dy),
            TransformSpec::Crop { rect, rescale } => {
                let t = AffineTransform::translation(-rect.x_min, -rect.y_min);
                if rescale {
                    t.then(&AffineTransform::scale(
                        canvas.width / rect.width(),
                        canvas.height / rect.height(),
                    )?)
                } else {
                    t
                }
            }
            TransformSpec::Scale { sx, sy } => AffineTransform::scale(sx, sy)?,
        })
    }

    pub fn view_canvas(&self, canvas: Size) -> Size {
        match *self {
            TransformSpec::Crop {
                rect,
                rescale: false,
            } => Size {
                width: rect.width(),
                height: rect.height(),
            },
            TransformSpec::Scale { sx, sy } => Size {
                width: canvas.width * sx,
                height: canvas.height * sy,
            },
            _ => canvas,
        }
    }

    /// Region of the source canvas the view can see.
    pub fn source_region(&self, canvas: Size) -> BBox {
        match *self {
            TransformSpec::Crop { rect, .. } => rect,
            _ => canvas.bbox(),
        }
    }
}

impl TryFrom<String> for ViewSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ViewSpec> for String {
    fn from(v: ViewSpec) -> String {
        v.to_string()
    }
}

impl std::str::FromStr for ViewSpec {
    type Err = Error;

    /// Parses a view id as produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed view id '{s}'"));
        let nums = |args: &str, n: usize| -> Result<Vec<f64>> {
            let v = args
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                return Err(bad());
            }
            Ok(v)
        };
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        Ok(match (kind, args) {
            (IDENTITY_VIEW, "") => ViewSpec::Identity,
            ("hflip", "") => ViewSpec::HFlip,
            ("vflip", "") => ViewSpec::VFlip,
            ("shift", a) => {
                let v = nums(a, 2)?;
                ViewSpec::Shift { dx: v[0], dy: v[1] }
            }
            ("shift-frac", a) => {
                let v = nums(a, 2)?;
                ViewSpec::ShiftFrac { fx: v[0], fy: v[1] }
            }
            ("center-crop", a) => ViewSpec::CenterCrop { fraction: nums(a, 1)?[0] },
            ("scale", a) => {
                let v = nums(a, 2)?;
                ViewSpec::Scale { sx: v[0], sy: v[1] }
            }
            ("crop", a) => {
                let (coords, mode) = a.rsplit_once(':').ok_or_else(bad)?;
                let v = nums(coords, 4)?;
                let rescale = match mode {
                    "rescale" => true,
                    "keep" => false,
                    _ => return Err(bad()),
                };
                ViewSpec::Crop { rect: BBox::new(v[0], v[1], v[2], v[3])?, rescale }
            }
            _ => return Err(bad()),
        })
    }
}

/// Source-to-view map of `spec` on `canvas`.
pub fn view_transform(spec: &TransformSpec, canvas: Size) -> Result<AffineTransform> {
    spec.view_transform(canvas)
}

/// A TTA view, possibly sized relative to each image. Serialized as its
/// view id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ViewSpec {
    Identity,
    HFlip,
    VFlip,
    Shift { dx: f64, dy: f64 },
    /// Shift by fractions of the canvas size.
    ShiftFrac { fx: f64, fy: f64 },
    Crop { rect: BBox, rescale: bool },
    /// Centered crop covering `fraction` of each side, rescaled to the canvas.
    CenterCrop { fraction: f64 },
    Scale { sx: f64, sy: f64 },
}

impl ViewSpec {
    pub fn resolve(&self, canvas: Size) -> Result<TransformSpec> {
        let spec = match *self {
            ViewSpec::Identity => TransformSpec::Identity,
            ViewSpec::HFlip => TransformSpec::HFlip,
            ViewSpec::VFlip => TransformSpec::VFlip,
            ViewSpec::Shift { dx, dy } => TransformSpec::Shift { dx, dy },
            ViewSpec::ShiftFrac { fx, fy } => TransformSpec::Shift {
                dx: fx * canvas.width,
                dy: fy * canvas.height,
            },
            ViewSpec::Crop { rect, rescale } => TransformSpec::Crop { rect, rescale },
            ViewSpec::CenterCrop { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::invalid(format!("center crop fraction {fraction} outside (0, 1]")));
                }
                let mx = canvas.width * (1.0 - fraction) / 2.0;
                let my = canvas.height * (1.0 - fraction) / 2.0;
                TransformSpec::Crop {
                    rect: BBox::new(mx, my, canvas.width - mx, canvas.height - my)?,
                    rescale: true,
                }
            }
            ViewSpec::Scale { sx, sy } => TransformSpec::Scale { sx, sy },
        };
        spec.validate(canvas)?;
        Ok(spec)
    }

    /// Stable view id used as the detector view key and in detection files.
    pub fn fingerprint(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewSpec::Identity => f.write_str(IDENTITY_VIEW),
            ViewSpec::HFlip => f.write_str("hflip"),
            ViewSpec::VFlip => f.write_str("vflip"),
            ViewSpec::Shift { dx, dy } => write!(f, "shift:{dx},{dy}"),
            ViewSpec::ShiftFrac { fx, fy } => write!(f, "shift-frac:{fx},{fy}"),
            ViewSpec::Crop { rect, rescale } => write!(
                f,
                "crop:{},{},{},{}:{}",
                rect.x_min,
                rect.y_min,
                rect.x_max,
                rect.y_max,
                if *rescale { "rescale" } else { "keep" }
            ),
            ViewSpec::CenterCrop { fraction } => write!(f, "center-crop:{fraction}"),
            ViewSpec::Scale { sx, sy } => write!(f, "scale:{sx},{sy}"),
        }
    }
}

fn default_min_visible() -> f64 {
    0.25
}

fn default_views() -> Vec<ViewSpec> {
    vec![
        ViewSpec::Identity,
        ViewSpec::HFlip,
        ViewSpec::ShiftFrac { fx: 0.05, fy: 0.0 },
        ViewSpec::CenterCrop { fraction: 0.9 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    #[serde(default = "default_views")]
    pub views: Vec<ViewSpec>,
    #[serde(default)]
    pub merge: Merge,
    /// Crop-view detections keeping less than this fraction of their area
    /// inside the crop are dropped.
    #[serde(default = "default_min_visible")]
    pub min_visible_fraction: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            views: default_views(),
            merge: Merge::default(),
            min_visible_fraction: default_min_visible(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.views.contains(&ViewSpec::Identity) {
            return Err(Error::invalid("TTA views must include the identity view"));
        }
        if !(0.0..=1.0).contains(&self.min_visible_fraction) {
            return Err(Error::invalid("min_visible_fraction outside [0, 1]"));
        }
        self.merge.validate()
    }
}

/// Maps view-frame detections back to the source frame, clipping them to
/// the region the view covers. For crops, boxes keeping less than
/// `min_visible_fraction` of their area inside the crop are dropped.
pub fn inverse_map(
    dets: &[Detection],
    spec: &TransformSpec,
    canvas: Size,
    min_visible_fraction: f64,
) -> Result<Vec<Detection>> {
    let inv = spec.view_transform(canvas)?.inverse();
    let region = spec.source_region(canvas);
    let is_crop = matches!(spec, TransformSpec::Crop { .. });
    Ok(dets
        .iter()
        .filter_map(|d| {
            let mapped = transform_box(&inv, &d.bbox);
            let (clipped, fraction) = clip_to_region(&mapped, &region)?;
            if is_crop && fraction < min_visible_fraction {
                return None;
            }
            Some(Detection {
                bbox: clipped,
                ..*d
            })
        })
        .collect())
}

/// Runs every configured view, pools the source-frame detections in
/// (view index, detection index) order and fuses them.
pub fn tta_detect(
    detector: &dyn Detector,
    image_id: &str,
    canvas: Size,
    cfg: &TtaConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut pooled = Vec::new();
    for view in &cfg.views {
        let view_id = view.fingerprint();
        if !detector.supports_view(&view_id) {
            return Err(Error::Capability {
                detector: detector.name().to_string(),
                view_id,
            });
        }
        let spec = view.resolve(canvas)?;
        let t = spec.view_transform(canvas)?;
        let dets = detector.detect(
            &ViewKey::new(image_id, view_id),
            &t,
            spec.view_canvas(canvas),
        )?;
        pooled.extend(inverse_map(&dets, &spec, canvas, cfg.min_visible_fraction)?);
    }
    Ok(cfg.merge.apply(&pooled))
}
