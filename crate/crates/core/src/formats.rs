//! Annotation files, detection files, dataset manifests and the class map.
//!
//! * Label files hold one `class_id x_center y_center width height` line per
//!   object, normalized to `[0, 1]` by the image size.
//! * Detection files are JSON lines with `image_id`, `class_id`, `score`,
//!   `bbox` (pixel corners) and an optional `view_id`.
//! * A manifest is one JSON document with `classes` and `images`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, GroundTruthBox, Size};

/// Normalized label values may exceed `[0, 1]` by this much before they are
/// rejected; smaller excursions are clamped.
pub const LABEL_SLACK: f64 = 1e-6;

pub const IDENTITY_VIEW: &str = "identity";

pub const DEFAULT_CLASSES: [&str; 7] = ["bicycle", "bike", "bus", "car", "dog", "person", "pole"];

/// Ordered class names; a class id is its position in the list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::invalid("class names must be non-empty"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate class name '{n}'")));
            }
        }
        if names.is_empty() {
            return Err(Error::invalid("class map is empty"));
        }
        Ok(ClassMap { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, class_id: u32) -> bool {
        (class_id as usize) < self.names.len()
    }

    pub fn name(&self, class_id: u32) -> Option<&str> {
        self.names.get(class_id as usize).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> {
        0..self.names.len() as u32
    }
}

impl Default for ClassMap {
    fn default() -> Self {
        ClassMap {
            names: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<String>> for ClassMap {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        ClassMap::new(v)
    }
}

impl From<ClassMap> for Vec<String> {
    fn from(c: ClassMap) -> Self {
        c.names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "labels", default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl ImageEntry {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        ImageEntry {
            id: id.into(),
            width,
            height,
            label_path: None,
            image_path: None,
            tags: Vec::new(),
        }
    }

    pub fn size(&self) -> Size {
        Size {
            width: f64::from(self.width),
            height: f64::from(self.height),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestDoc {
    #[serde(default)]
    classes: ClassMap,
    images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_map: ClassMap,
    pub images: Vec<ImageEntry>,
    /// Directory that relative label and image paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(class_map: ClassMap, images: Vec<ImageEntry>) -> Result<Self> {
        let m = DatasetManifest {
            class_map,
            images,
            base_dir: PathBuf::new(),
        };
        m.validate("<memory>")?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_json(&text, &path.display().to_string())?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let doc: ManifestDoc = serde_json::from_str(text).map_err(|e| Error::Document {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        let m = DatasetManifest {
            class_map: doc.classes,
            images: doc.images,
            base_dir: PathBuf::new(),
        };
        m.validate(origin)?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let doc = ManifestDoc {
            classes: self.class_map.clone(),
            images: self.images.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("manifest serializes") + "\n"
    }

    fn validate(&self, origin: &str) -> Result<()> {
        let mut ids = HashSet::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Document {
                    origin: origin.to_string(),
                    message: format!("image '{}' has zero size", img.id),
                });
            }
            if !ids.insert(img.id.as_str()) {
                return Err(Error::Document {
                    origin: origin.to_string(),
                    message: format!("duplicate image id '{}'", img.id),
                });
            }
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Ground-truth boxes for one image; images without a label file have none.
    pub fn load_labels(&self, img: &ImageEntry) -> Result<Vec<GroundTruthBox>> {
        let Some(rel) = &img.label_path else {
            return Ok(Vec::new());
        };
        let path = self.resolve(rel);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_label_file_at(
            &text,
            f64::from(img.width),
            f64::from(img.height),
            &self.class_map,
            &path.display().to_string(),
        )
    }
}

/// A manifest together with its loaded ground truth, keyed by image id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub ground_truth: BTreeMap<String, Vec<GroundTruthBox>>,
}

impl Dataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let loaded: Result<Vec<_>> = manifest
            .images
            .par_iter()
            .map(|img| Ok((img.id.clone(), manifest.load_labels(img)?)))
            .collect();
        Ok(Dataset {
            ground_truth: loaded?.into_iter().collect(),
            manifest,
        })
    }

    /// In-memory dataset; `images` carry their ground truth directly.
    pub fn from_parts(
        class_map: ClassMap,
        images: Vec<(ImageEntry, Vec<GroundTruthBox>)>,
    ) -> Result<Self> {
        let mut gt = BTreeMap::new();
        let mut entries = Vec::with_capacity(images.len());
        for (entry, boxes) in images {
            gt.insert(entry.id.clone(), boxes);
            entries.push(entry);
        }
        Ok(Dataset {
            manifest: DatasetManifest::new(class_map, entries)?,
            ground_truth: gt,
        })
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.manifest.class_map
    }

    pub fn ground_truth(&self, image_id: &str) -> &[GroundTruthBox] {
        self.ground_truth
            .get(image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Parses a normalized-center label file into pixel-corner boxes clipped to
/// the canvas.
pub fn parse_label_file(
    text: &str,
    image_w: f64,
    image_h: f64,
    class_map: &ClassMap,
) -> Result<Vec<GroundTruthBox>> {
    parse_label_file_at(text, image_w, image_h, class_map, "<labels>")
}

pub fn parse_label_file_at(
    text: &str,
    image_w: f64,
    image_h: f64,
    class_map: &ClassMap,
    origin: &str,
) -> Result<Vec<GroundTruthBox>> {
    Size::new(image_w, image_h)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            origin: origin.to_string(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: u32 = fields[0]
            .parse()
            .map_err(|_| err(format!("invalid class id '{}'", fields[0])))?;
        if !class_map.contains(class_id) {
            return Err(err(format!("class id out of range: {class_id}")));
        }
        let mut vals = [0.0f64; 4];
        for (slot, f) in vals.iter_mut().zip(&fields[1..]) {
            let v: f64 = f
                .parse()
                .map_err(|_| err(format!("invalid number '{f}'")))?;
            if !v.is_finite() || !(-LABEL_SLACK..=1.0 + LABEL_SLACK).contains(&v) {
                return Err(err(format!("value {v} outside [0, 1]")));
            }
            *slot = v.clamp(0.0, 1.0);
        }
        let [xc, yc, w, h] = vals;
        let bbox = BBox {
            x_min: ((xc - w / 2.0) * image_w).clamp(0.0, image_w),
            y_min: ((yc - h / 2.0) * image_h).clamp(0.0, image_h),
            x_max: ((xc + w / 2.0) * image_w).clamp(0.0, image_w),
            y_max: ((yc + h / 2.0) * image_h).clamp(0.0, image_h),
        };
        out.push(GroundTruthBox::new(bbox, class_id));
    }
    Ok(out)
}

pub fn write_label_file(boxes: &[GroundTruthBox], image_w: f64, image_h: f64) -> String {
    let mut s = String::new();
    for g in boxes {
        let b = &g.bbox;
        let xc = (b.x_min + b.x_max) / 2.0 / image_w;
        let yc = (b.y_min + b.y_max) / 2.0 / image_h;
        let w = b.width() / image_w;
        let h = b.height() / image_h;
        let _ = writeln!(s, "{} {xc:.6} {yc:.6} {w:.6} {h:.6}", g.class_id);
    }
    s
}

fn is_identity(v: &str) -> bool {
    v == IDENTITY_VIEW
}

fn identity_view() -> String {
    IDENTITY_VIEW.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: u32,
    pub score: f64,
    pub bbox: BBox,
    #[serde(default = "identity_view", skip_serializing_if = "is_identity")]
    pub view_id: String,
}

impl DetectionRecord {
    pub fn new(image_id: impl Into<String>, det: &Detection) -> Self {
        DetectionRecord {
            image_id: image_id.into(),
            class_id: det.class_id,
            score: det.score,
            bbox: det.bbox,
            view_id: identity_view(),
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: self.bbox,
            class_id: self.class_id,
            score: self.score,
        }
    }
}

/// Reads a JSON-lines detection file. When `manifest` is given, every
/// image id must appear in it and class ids must be valid for its class map.
pub fn read_detections(
    reader: impl BufRead,
    origin: &str,
    manifest: Option<&DatasetManifest>,
) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            origin: origin.to_string(),
            line: idx + 1,
            message,
        };
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(err(format!("score {} outside [0, 1]", rec.score)));
        }
        if let Some(m) = manifest {
            if !m.class_map.contains(rec.class_id) {
                return Err(err(format!("class id out of range: {}", rec.class_id)));
            }
        }
        out.push(rec);
    }
    if let Some(m) = manifest {
        let known: HashSet<&str> = m.images.iter().map(|i| i.id.as_str()).collect();
        let unknown: BTreeSet<&str> = out
            .iter()
            .map(|r| r.image_id.as_str())
            .filter(|id| !known.contains(id))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownImages(
                unknown.into_iter().map(str::to_string).collect(),
            ));
        }
    }
    Ok(out)
}

pub fn read_detections_file(
    path: impl AsRef<Path>,
    manifest: Option<&DatasetManifest>,
) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_detections(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        manifest,
    )
}

pub fn write_detections(records: &[DetectionRecord], mut w: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassDistribution {
    /// `(class name, count)` in class-id order.
    pub counts: Vec<(String, u64)>,
    pub total: u64,
}

impl ClassDistribution {
    pub fn count(&self, name: &str) -> Option<u64> {
        self.counts.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }
}

/// Counts ground-truth boxes per class over every label file of `manifest`.
pub fn class_distribution(manifest: &DatasetManifest) -> Result<ClassDistribution> {
    let per_file: Result<Vec<Vec<u64>>> = manifest
        .images
        .par_iter()
        .map(|img| {
            let mut counts = vec![0u64; manifest.class_map.len()];
            for g in manifest.load_labels(img)? {
                counts[g.class_id as usize] += 1;
            }
            Ok(counts)
        })
        .collect();
    let mut counts = vec![0u64; manifest.class_map.len()];
    for file in per_file? {
        for (c, n) in counts.iter_mut().zip(file) {
            *c += n;
        }
    }
    Ok(ClassDistribution {
        total: counts.iter().sum(),
        counts: manifest
            .class_map
            .names()
            .iter()
            .cloned()
            .zip(counts)
            .collect(),
    })
}

/// Reads a headerless 8-bit grayscale raster of `width * height` bytes.
pub fn read_raw_gray(path: impl AsRef<Path>, width: u32, height: u32) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = width as usize * height as usize;
    if bytes.len() != expected {
        return Err(Error::invalid(format!(
            "{}: expected {expected} bytes for {width}x{height}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}
