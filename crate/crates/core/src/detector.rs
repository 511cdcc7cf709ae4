//! Uniform detector interface with file-backed replay, a seeded noisy mock,
//! and a constant-cost wrapper for latency measurements.
//!
//! # Mock random stream
//!
//! The mock's output is a pure function of `(noise, gt, view transform,
//! canvas, view key)`. Per view, a seed is derived with [`view_seed`]
//! (FNV-1a 64 over the global seed's little-endian bytes, the image id, a
//! zero byte and the view id, followed by the SplitMix64 finalizer). That
//! seed initializes Xoshiro256++ through SplitMix64 expansion. Draws:
//!
//! * uniform: `(next_u64 >> 11) * 2^-53`
//! * normal: Box-Muller on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`
//! * Poisson: Knuth's product method, consuming `k + 1` uniforms
//!
//! in this order:
//!
//! 1. one uniform per ground-truth box in input order; the box is missed
//!    when the uniform is `< p_miss`
//! 2. for each kept box visible in the view, four normals (corner jitter
//!    for `x_min, y_min, x_max, y_max`) then one uniform for the score
//! 3. one Poisson draw for the false-positive count, then per false
//!    positive four uniforms (`x0, x1, y0, y1` as canvas fractions) and
//!    one uniform for the score

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_detections_file, DatasetManifest, DetectionRecord, IDENTITY_VIEW};
use crate::geometry::{clip_box, transform_box, AffineTransform, BBox, Detection, GroundTruthBox, Size};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewKey {
    pub image_id: String,
    pub view_id: String,
}

impl ViewKey {
    pub fn new(image_id: impl Into<String>, view_id: impl Into<String>) -> Self {
        ViewKey {
            image_id: image_id.into(),
            view_id: view_id.into(),
        }
    }

    pub fn identity(image_id: impl Into<String>) -> Self {
        Self::new(image_id, IDENTITY_VIEW)
    }

    pub fn is_identity(&self) -> bool {
        self.view_id == IDENTITY_VIEW
    }
}

/// A detection backend. `detect` returns boxes in the coordinate frame of
/// the requested view, whose canvas is `canvas`.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    fn supports_view(&self, view_id: &str) -> bool {
        view_id == IDENTITY_VIEW
    }

    fn detect(
        &self,
        view: &ViewKey,
        view_transform: &AffineTransform,
        canvas: Size,
    ) -> Result<Vec<Detection>>;
}

impl<D: Detector + ?Sized> Detector for Arc<D> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn supports_view(&self, view_id: &str) -> bool {
        (**self).supports_view(view_id)
    }

    fn detect(&self, view: &ViewKey, t: &AffineTransform, canvas: Size) -> Result<Vec<Detection>> {
        (**self).detect(view, t, canvas)
    }
}

impl<D: Detector + ?Sized> Detector for Box<D> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn supports_view(&self, view_id: &str) -> bool {
        (**self).supports_view(view_id)
    }

    fn detect(&self, view: &ViewKey, t: &AffineTransform, canvas: Size) -> Result<Vec<Detection>> {
        (**self).detect(view, t, canvas)
    }
}

/// Replays stored detections. Only views present in the store can be served.
#[derive(Debug, Clone)]
pub struct FileDetector {
    name: String,
    store: BTreeMap<(String, String), Vec<Detection>>,
    views: BTreeSet<String>,
    images: HashSet<String>,
}

impl FileDetector {
    /// `images` lists every image the store covers; images absent from the
    /// records simply have no detections. Defaults to the record image ids.
    pub fn from_records(
        name: impl Into<String>,
        records: Vec<DetectionRecord>,
        images: Option<&DatasetManifest>,
    ) -> Self {
        let mut store: BTreeMap<(String, String), Vec<Detection>> = BTreeMap::new();
        let mut views = BTreeSet::from([IDENTITY_VIEW.to_string()]);
        let mut known: HashSet<String> = images
            .map(|m| m.images.iter().map(|i| i.id.clone()).collect())
            .unwrap_or_default();
        for r in records {
            views.insert(r.view_id.clone());
            if images.is_none() {
                known.insert(r.image_id.clone());
            }
            let det = r.detection();
            store.entry((r.image_id, r.view_id)).or_default().push(det);
        }
        FileDetector {
            name: name.into(),
            store,
            views,
            images: known,
        }
    }

    pub fn from_file(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Self> {
        let path = path.as_ref();
        let records = read_detections_file(path, Some(manifest))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(Self::from_records(name, records, Some(manifest)))
    }

    pub fn views(&self) -> impl Iterator<Item = &str> {
        self.views.iter().map(String::as_str)
    }
}

impl Detector for FileDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_view(&self, view_id: &str) -> bool {
        self.views.contains(view_id)
    }

    fn detect(&self, view: &ViewKey, _t: &AffineTransform, _canvas: Size) -> Result<Vec<Detection>> {
        if !self.images.contains(&view.image_id) {
            return Err(Error::Lookup {
                detector: self.name.clone(),
                image_id: view.image_id.clone(),
            });
        }
        if !self.views.contains(&view.view_id) {
            return Err(Error::Capability {
                detector: self.name.clone(),
                view_id: view.view_id.clone(),
            });
        }
        Ok(self
            .store
            .get(&(view.image_id.clone(), view.view_id.clone()))
            .cloned()
            .unwrap_or_default())
    }
}

fn default_one() -> f64 {
    1.0
}

/// Noise model of the mock detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockNoise {
    #[serde(default)]
    pub p_miss: f64,
    #[serde(default)]
    pub jitter_sigma: f64,
    #[serde(default)]
    pub fp_rate: f64,
    #[serde(default = "default_one")]
    pub score_lo: f64,
    #[serde(default = "default_one")]
    pub score_hi: f64,
    #[serde(default)]
    pub fp_lo: f64,
    #[serde(default = "default_one")]
    pub fp_hi: f64,
    /// Classes assigned to false positives round-robin; empty means every
    /// class id below the mock's class count.
    #[serde(default)]
    pub fp_classes: Vec<u32>,
    #[serde(default)]
    pub global_seed: u64,
}

impl MockNoise {
    pub fn noiseless(global_seed: u64) -> Self {
        MockNoise {
            p_miss: 0.0,
            jitter_sigma: 0.0,
            fp_rate: 0.0,
            score_lo: 1.0,
            score_hi: 1.0,
            fp_lo: 0.0,
            fp_hi: 1.0,
            fp_classes: Vec::new(),
            global_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("p_miss", self.p_miss)?;
        unit("score_lo", self.score_lo)?;
        unit("score_hi", self.score_hi)?;
        unit("fp_lo", self.fp_lo)?;
        unit("fp_hi", self.fp_hi)?;
        if self.score_lo > self.score_hi || self.fp_lo > self.fp_hi {
            return Err(Error::invalid("score ranges must have lo <= hi"));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::invalid("jitter_sigma must be finite and >= 0"));
        }
        // Knuth's method underflows near exp(-745).
        if !(self.fp_rate.is_finite() && (0.0..=500.0).contains(&self.fp_rate)) {
            return Err(Error::invalid("fp_rate must be in [0, 500]"));
        }
        Ok(())
    }
}

impl Default for MockNoise {
    fn default() -> Self {
        Self::noiseless(0)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for one `(global seed, image, view)` triple.
pub fn view_seed(global_seed: u64, image_id: &str, view_id: &str) -> u64 {
    let mut h = FNV_OFFSET;
    let bytes = global_seed
        .to_le_bytes()
        .into_iter()
        .chain(image_id.bytes())
        .chain(std::iter::once(0u8))
        .chain(view_id.bytes());
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64_finalize(h)
}

/// The mock's random stream; see the module docs for the exact contract.
pub struct MockRng(Xoshiro256PlusPlus);

impl MockRng {
    pub fn new(seed: u64) -> Self {
        MockRng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn poisson(&mut self, rate: f64) -> u64 {
        let limit = (-rate).exp();
        let mut k = 0;
        let mut p = self.uniform();
        while p > limit {
            k += 1;
            p *= self.uniform();
        }
        k
    }
}

/// Simulated detections of `gt` as seen through one view.
pub fn mock_detect(
    gt: &[GroundTruthBox],
    view_transform: &AffineTransform,
    canvas: Size,
    noise: &MockNoise,
    num_classes: u32,
    view: &ViewKey,
) -> Vec<Detection> {
    let mut rng = MockRng::new(view_seed(noise.global_seed, &view.image_id, &view.view_id));
    let kept: Vec<bool> = gt.iter().map(|_| rng.uniform() >= noise.p_miss).collect();

    let mut out = Vec::new();
    for (g, keep) in gt.iter().zip(kept) {
        if !keep {
            continue;
        }
        let mapped = transform_box(view_transform, &g.bbox);
        let Some((visible, _)) = clip_box(&mapped, canvas.width, canvas.height) else {
            continue;
        };
        let mut c = visible.to_array();
        for v in &mut c {
            *v += noise.jitter_sigma * rng.normal();
        }
        let score = noise.score_lo + rng.uniform() * (noise.score_hi - noise.score_lo);
        let jittered = BBox::from_corners(c[0], c[1], c[2], c[3]);
        if let Some((b, _)) = clip_box(&jittered, canvas.width, canvas.height) {
            out.push(Detection {
                bbox: b,
                class_id: g.class_id,
                score: score.clamp(0.0, 1.0),
            });
        }
    }

    let n_fp = rng.poisson(noise.fp_rate);
    for k in 0..n_fp {
        let x0 = rng.uniform() * canvas.width;
        let x1 = rng.uniform() * canvas.width;
        let y0 = rng.uniform() * canvas.height;
        let y1 = rng.uniform() * canvas.height;
        let score = noise.fp_lo + rng.uniform() * (noise.fp_hi - noise.fp_lo);
        let class_id = if noise.fp_classes.is_empty() {
            (k % u64::from(num_classes.max(1))) as u32
        } else {
            noise.fp_classes[(k % noise.fp_classes.len() as u64) as usize]
        };
        out.push(Detection {
            bbox: BBox::from_corners(x0, y0, x1, y1),
            class_id,
            score: score.clamp(0.0, 1.0),
        });
    }
    out
}

/// Seeded mock over a fixed ground-truth store. Serves every view.
#[derive(Debug, Clone)]
pub struct MockDetector {
    name: String,
    ground_truth: Arc<BTreeMap<String, Vec<GroundTruthBox>>>,
    num_classes: u32,
    noise: MockNoise,
}

impl MockDetector {
    pub fn new(
        name: impl Into<String>,
        ground_truth: Arc<BTreeMap<String, Vec<GroundTruthBox>>>,
        num_classes: u32,
        noise: MockNoise,
    ) -> Result<Self> {
        noise.validate()?;
        Ok(MockDetector {
            name: name.into(),
            ground_truth,
            num_classes,
            noise,
        })
    }

    pub fn for_dataset(
        name: impl Into<String>,
        dataset: &crate::formats::Dataset,
        noise: MockNoise,
    ) -> Result<Self> {
        Self::new(
            name,
            Arc::new(dataset.ground_truth.clone()),
            dataset.class_map().len() as u32,
            noise,
        )
    }

    pub fn noise(&self) -> &MockNoise {
        &self.noise
    }
}

impl Detector for MockDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_view(&self, _view_id: &str) -> bool {
        true
    }

    fn detect(&self, view: &ViewKey, t: &AffineTransform, canvas: Size) -> Result<Vec<Detection>> {
        let gt = self
            .ground_truth
            .get(&view.image_id)
            .ok_or_else(|| Error::Lookup {
                detector: self.name.clone(),
                image_id: view.image_id.clone(),
            })?;
        Ok(mock_detect(gt, t, canvas, &self.noise, self.num_classes, view))
    }
}

/// Wraps a detector so every call costs at least `cost` of wall time.
#[derive(Debug, Clone)]
pub struct DelayDetector<D> {
    inner: D,
    cost: Duration,
}

impl<D: Detector> DelayDetector<D> {
    pub fn new(inner: D, cost: Duration) -> Self {
        DelayDetector { inner, cost }
    }
}

impl<D: Detector> Detector for DelayDetector<D> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn supports_view(&self, view_id: &str) -> bool {
        self.inner.supports_view(view_id)
    }

    fn detect(&self, view: &ViewKey, t: &AffineTransform, canvas: Size) -> Result<Vec<Detection>> {
        std::thread::sleep(self.cost);
        self.inner.detect(view, t, canvas)
    }
}

/// Returns nothing for every view.
#[derive(Debug, Clone, Default)]
pub struct EmptyDetector;

impl Detector for EmptyDetector {
    fn name(&self) -> &str {
        "empty"
    }

    fn supports_view(&self, _view_id: &str) -> bool {
        true
    }

    fn detect(&self, _: &ViewKey, _: &AffineTransform, _: Size) -> Result<Vec<Detection>> {
        Ok(Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{ClassMap, Dataset, ImageEntry};

    fn gt_boxes() -> Vec<GroundTruthBox> {
        vec![
            GroundTruthBox::new(BBox::new(10., 10., 50., 60.).unwrap(), 3),
            GroundTruthBox::new(BBox::new(100., 40., 180., 120.).unwrap(), 5),
            GroundTruthBox::new(BBox::new(300., 200., 320., 260.).unwrap(), 6),
            GroundTruthBox::new(BBox::new(400., 100., 500., 150.).unwrap(), 2),
        ]
    }

    const CANVAS: Size = Size {
        width: 640.0,
        height: 480.0,
    };

    #[test]
    fn seed_is_stable_and_view_sensitive() {
        let a = view_seed(7, "img1", "identity");
        assert_eq!(a, view_seed(7, "img1", "identity"));
        assert_ne!(a, view_seed(7, "img1", "hflip"));
        assert_ne!(a, view_seed(8, "img1", "identity"));
        // separator keeps ("ab","c") and ("a","bc") apart
        assert_ne!(view_seed(0, "ab", "c"), view_seed(0, "a", "bc"));
    }

    #[test]
    fn noiseless_mock_reproduces_ground_truth() {
        let gt = gt_boxes();
        let dets = mock_detect(&gt[..3], &AffineTransform::identity(), CANVAS, &MockNoise::noiseless(1), 7, &ViewKey::identity("a"));
        assert_eq!(dets.len(), 3);
        for (d, g) in dets.iter().zip(&gt) {
            assert_eq!(d.bbox, g.bbox);
            assert_eq!(d.class_id, g.class_id);
            assert_eq!(d.score, 1.0);
        }
    }

    #[test]
    fn noiseless_mock_through_view_inverts_exactly() {
        let gt = gt_boxes();
        let t = AffineTransform::hflip(640.0).then(&AffineTransform::translation(-3.0, 0.0));
        let dets = mock_detect(&gt, &t, Size { width: 637.0, height: 480.0 }, &MockNoise::noiseless(1), 7, &ViewKey::new("a", "v"));
        for (d, g) in dets.iter().zip(&gt) {
            assert_eq!(transform_box(&t.inverse(), &d.bbox), g.bbox);
        }
    }

    #[test]
    fn full_miss_rate_yields_nothing() {
        let noise = MockNoise { p_miss: 1.0, ..MockNoise::noiseless(3) };
        assert!(mock_detect(&gt_boxes(), &AffineTransform::identity(), CANVAS, &noise, 7, &ViewKey::identity("a")).is_empty());
    }

    #[test]
    fn half_miss_matches_draw_order_oracle() {
        // Reference: the first four uniforms of the view stream decide the misses.
        let noise = MockNoise { p_miss: 0.5, ..MockNoise::noiseless(42) };
        let view = ViewKey::identity("img7");
        let mut rng = MockRng::new(view_seed(42, "img7", "identity"));
        let expected: Vec<u32> = gt_boxes()
            .iter()
            .filter(|_| rng.uniform() >= 0.5)
            .map(|g| g.class_id)
            .collect();
        let got: Vec<u32> = mock_detect(&gt_boxes(), &AffineTransform::identity(), CANVAS, &noise, 7, &view)
            .iter()
            .map(|d| d.class_id)
            .collect();
        assert_eq!(got, expected);
        // frozen for this seed
        assert_eq!(got, vec![5]);
    }

    #[test]
    fn mock_is_deterministic() {
        let noise = MockNoise { p_miss: 0.3, jitter_sigma: 2.0, fp_rate: 1.5, score_lo: 0.4, score_hi: 0.9, ..MockNoise::noiseless(5) };
        let v = ViewKey::new("x", "hflip");
        let t = AffineTransform::hflip(640.0);
        assert_eq!(
            mock_detect(&gt_boxes(), &t, CANVAS, &noise, 7, &v),
            mock_detect(&gt_boxes(), &t, CANVAS, &noise, 7, &v)
        );
    }

    #[test]
    fn false_positive_count_has_poisson_mean() {
        let noise = MockNoise { fp_rate: 2.0, ..MockNoise::noiseless(11) };
        let n = 10_000;
        let total: usize = (0..n)
            .map(|i| mock_detect(&[], &AffineTransform::identity(), CANVAS, &noise, 7, &ViewKey::identity(format!("img{i}"))).len())
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 2.0).abs() <= 0.05, "mean {mean}");
    }

    #[test]
    fn miss_patterns_independent_across_views() {
        let noise = MockNoise { p_miss: 0.5, ..MockNoise::noiseless(9) };
        let g = &gt_boxes()[..1];
        let n = 10_000;
        let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let id = format!("img{i}");
            let a = mock_detect(g, &AffineTransform::identity(), CANVAS, &noise, 7, &ViewKey::new(id.clone(), "identity")).is_empty() as u8 as f64;
            let b = mock_detect(g, &AffineTransform::identity(), CANVAS, &noise, 7, &ViewKey::new(id, "hflip")).is_empty() as u8 as f64;
            sa += a;
            sb += b;
            sab += a * b;
        }
        let n = n as f64;
        let cov = sab / n - (sa / n) * (sb / n);
        let var_a = sa / n * (1.0 - sa / n);
        let var_b = sb / n * (1.0 - sb / n);
        let corr = cov / (var_a * var_b).sqrt();
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn jittered_boxes_stay_valid_and_in_canvas() {
        let noise = MockNoise { jitter_sigma: 40.0, fp_rate: 3.0, ..MockNoise::noiseless(2) };
        for i in 0..200 {
            for d in mock_detect(&gt_boxes(), &AffineTransform::identity(), CANVAS, &noise, 7, &ViewKey::identity(format!("{i}"))) {
                assert!(d.bbox.is_valid());
                assert!(d.bbox.x_min >= 0.0 && d.bbox.x_max <= 640.0 && d.bbox.y_min >= 0.0 && d.bbox.y_max <= 480.0);
                assert!((0.0..=1.0).contains(&d.score));
            }
        }
    }

    #[test]
    fn noise_validation() {
        assert!(MockNoise { p_miss: 1.5, ..MockNoise::default() }.validate().is_err());
        assert!(MockNoise { jitter_sigma: -1.0, ..MockNoise::default() }.validate().is_err());
        assert!(MockNoise { fp_rate: f64::NAN, ..MockNoise::default() }.validate().is_err());
        assert!(MockNoise { score_lo: 0.9, score_hi: 0.1, ..MockNoise::default() }.validate().is_err());
    }

    #[test]
    fn file_detector_replay_and_errors() {
        let manifest = DatasetManifest::new(
            ClassMap::default(),
            vec![ImageEntry::new("img1", 10, 10), ImageEntry::new("img2", 10, 10)],
        )
        .unwrap();
        let d = Detection::new(BBox::new(0., 0., 5., 5.).unwrap(), 3, 0.7).unwrap();
        let mut flipped = DetectionRecord::new("img1", &d);
        flipped.view_id = "hflip".into();
        let fd = FileDetector::from_records("f", vec![DetectionRecord::new("img1", &d), flipped], Some(&manifest));
        let t = AffineTransform::identity();
        let c = Size { width: 10.0, height: 10.0 };
        assert_eq!(fd.detect(&ViewKey::identity("img1"), &t, c).unwrap(), vec![d]);
        assert_eq!(fd.detect(&ViewKey::new("img1", "hflip"), &t, c).unwrap(), vec![d]);
        assert!(fd.detect(&ViewKey::identity("img2"), &t, c).unwrap().is_empty());
        assert!(matches!(fd.detect(&ViewKey::identity("nope"), &t, c), Err(Error::Lookup { .. })));
        assert!(matches!(fd.detect(&ViewKey::new("img1", "vflip"), &t, c), Err(Error::Capability { .. })));
        assert!(fd.supports_view("hflip") && !fd.supports_view("vflip"));
    }

    #[test]
    fn mock_lookup_error_for_unknown_image() {
        let ds = Dataset::from_parts(ClassMap::default(), vec![(ImageEntry::new("a", 10, 10), vec![])]).unwrap();
        let m = MockDetector::for_dataset("m", &ds, MockNoise::noiseless(0)).unwrap();
        let c = Size { width: 10.0, height: 10.0 };
        assert!(m.detect(&ViewKey::identity("a"), &AffineTransform::identity(), c).unwrap().is_empty());
        assert!(matches!(m.detect(&ViewKey::identity("b"), &AffineTransform::identity(), c), Err(Error::Lookup { .. })));
    }
}
