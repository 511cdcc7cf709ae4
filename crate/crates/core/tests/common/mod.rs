//! Independent reference implementations shared by the integration tests.
//! Only `glue` touches the crate, and only to build inputs.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

/// Exact rational with an `i128` numerator and positive denominator.
#[derive(Debug, Clone, Copy)]
pub struct Q {
    n: i128,
    d: i128,
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

impl Q {
    pub fn new(n: i128, d: i128) -> Q {
        assert!(d != 0);
        let s = if d < 0 { -1 } else { 1 };
        let g = gcd(n, d);
        Q { n: s * n / g, d: s * d / g }
    }

    pub fn int(n: i128) -> Q {
        Q { n, d: 1 }
    }

    pub fn zero() -> Q {
        Q::int(0)
    }

    /// Exact value of a float on the 1/1024 grid.
    pub fn from_grid(v: f64) -> Q {
        let scaled = v * 1024.0;
        assert_eq!(scaled.fract(), 0.0, "{v} is not on the 1/1024 grid");
        Q::new(scaled as i128, 1024)
    }

    pub fn add(self, o: Q) -> Q {
        Q::new(self.n * o.d + o.n * self.d, self.d * o.d)
    }

    pub fn sub(self, o: Q) -> Q {
        Q::new(self.n * o.d - o.n * self.d, self.d * o.d)
    }

    pub fn mul(self, o: Q) -> Q {
        Q::new(self.n * o.n, self.d * o.d)
    }

    pub fn div(self, o: Q) -> Q {
        Q::new(self.n * o.d, self.d * o.n)
    }

    pub fn max(self, o: Q) -> Q {
        if self.cmp(&o) == Ordering::Less { o } else { self }
    }

    pub fn min(self, o: Q) -> Q {
        if self.cmp(&o) == Ordering::Greater { o } else { self }
    }

    pub fn is_zero(&self) -> bool {
        self.n == 0
    }

    pub fn to_f64(self) -> f64 {
        self.n as f64 / self.d as f64
    }
}

impl PartialEq for Q {
    fn eq(&self, o: &Q) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for Q {}

impl PartialOrd for Q {
    fn partial_cmp(&self, o: &Q) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Q {
    fn cmp(&self, o: &Q) -> Ordering {
        (self.n * o.d).cmp(&(o.n * self.d))
    }
}

pub type QBox = [Q; 4];

pub fn qbox(b: [f64; 4]) -> QBox {
    b.map(Q::from_grid)
}

/// Exact IoU; 0 when the union is empty.
pub fn iou_exact(a: &QBox, b: &QBox) -> Q {
    let area = |x: &QBox| x[2].sub(x[0]).max(Q::zero()).mul(x[3].sub(x[1]).max(Q::zero()));
    let iw = a[2].min(b[2]).sub(a[0].max(b[0])).max(Q::zero());
    let ih = a[3].min(b[3]).sub(a[1].max(b[1])).max(Q::zero());
    let inter = iw.mul(ih);
    let union = area(a).add(area(b)).sub(inter);
    if union.is_zero() { Q::zero() } else { inter.div(union) }
}

/// SplitMix64, used only to drive test-data generation and sampling.
pub struct Sm(pub u64);

impl Sm {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    pub fn range(&mut self, lo: i64, hi: i64) -> i64 {
        lo + self.below((hi - lo + 1) as u64) as i64
    }
}

/// Monte-Carlo IoU from `n` uniform points over the joint hull.
pub fn iou_monte_carlo(a: [f64; 4], b: [f64; 4], n: usize, rng: &mut Sm) -> f64 {
    let (x0, y0) = (a[0].min(b[0]), a[1].min(b[1]));
    let (x1, y1) = (a[2].max(b[2]), a[3].max(b[3]));
    let inside = |r: [f64; 4], x: f64, y: f64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..n {
        let x = x0 + rng.unit() * (x1 - x0);
        let y = y0 + rng.unit() * (y1 - y0);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        both += usize::from(ia && ib);
        either += usize::from(ia || ib);
    }
    if either == 0 { 0.0 } else { both as f64 / either as f64 }
}

#[derive(Debug, Clone)]
pub struct OracleDet {
    pub class_id: u32,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct OracleGt {
    pub class_id: u32,
    pub bbox: [f64; 4],
}

/// Per image: detections and ground truth.
pub type OracleImage = (Vec<OracleDet>, Vec<OracleGt>);

/// True-positive count of one image at one cutoff, matched from scratch:
/// detections by descending score (ties by position), each taking the
/// first unmatched same-class box of maximal IoU if it reaches `thr`.
fn tp_from_scratch(dets: &[&OracleDet], gts: &[&OracleGt], thr: Q) -> usize {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for i in idx {
        let db = qbox(dets[i].bbox);
        let mut best: Option<(usize, Q)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou_exact(&db, &qbox(g.bbox));
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= thr {
                taken[j] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// Exact all-point AP of one class, or `None` without ground truth.
pub fn brute_force_ap(images: &[OracleImage], class_id: u32, thr: Q) -> Option<Q> {
    let gt_total: usize = images
        .iter()
        .map(|(_, g)| g.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    if gt_total == 0 {
        return None;
    }
    let mut cutoffs: Vec<f64> = images
        .iter()
        .flat_map(|(d, _)| d.iter().filter(|d| d.class_id == class_id).map(|d| d.score))
        .collect();
    cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cutoffs.dedup();
    // (recall, precision) per cutoff, descending cutoff
    let mut points = Vec::new();
    for &t in &cutoffs {
        let (mut tp, mut n) = (0usize, 0usize);
        for (dets, gts) in images {
            let d: Vec<&OracleDet> = dets.iter().filter(|d| d.class_id == class_id && d.score >= t).collect();
            let g: Vec<&OracleGt> = gts.iter().filter(|g| g.class_id == class_id).collect();
            n += d.len();
            tp += tp_from_scratch(&d, &g, thr);
        }
        points.push((Q::new(tp as i128, gt_total as i128), Q::new(tp as i128, n as i128)));
    }
    let mut area = Q::zero();
    let mut prev = Q::zero();
    for k in 0..points.len() {
        let (r, _) = points[k];
        if r > prev {
            let env = points[k..].iter().map(|p| p.1).fold(Q::zero(), Q::max);
            area = area.add(r.sub(prev).mul(env));
            prev = r;
        }
    }
    Some(area)
}

/// Exact mAP over the classes `0..num_classes` that have ground truth.
pub fn brute_force_map(images: &[OracleImage], num_classes: u32, thr: Q) -> (BTreeMap<u32, Option<Q>>, Option<Q>) {
    let per: BTreeMap<u32, Option<Q>> = (0..num_classes).map(|c| (c, brute_force_ap(images, c, thr))).collect();
    let present: Vec<Q> = per.values().flatten().copied().collect();
    let map = (!present.is_empty()).then(|| {
        present.iter().fold(Q::zero(), |a, &b| a.add(b)).div(Q::int(present.len() as i128))
    });
    (per, map)
}

/// Random micro dataset: up to `max_images` images of up to `max_boxes`
/// ground-truth boxes and as many detections, over `classes` classes.
/// Coordinates are integers in [0, 64]; detections mostly jitter a ground
/// truth box, and scores come from a coarse grid so that ties occur.
pub fn micro_dataset(rng: &mut Sm, max_images: u64, max_boxes: u64, classes: u32) -> Vec<OracleImage> {
    let n_images = 1 + rng.below(max_images);
    (0..n_images)
        .map(|_| {
            let rand_box = |rng: &mut Sm| {
                let x0 = rng.range(0, 56) as f64;
                let y0 = rng.range(0, 56) as f64;
                let w = rng.range(1, 64 - x0 as i64) as f64;
                let h = rng.range(1, 64 - y0 as i64) as f64;
                [x0, y0, x0 + w, y0 + h]
            };
            let gts: Vec<OracleGt> = (0..rng.below(max_boxes + 1))
                .map(|_| OracleGt { class_id: rng.below(u64::from(classes)) as u32, bbox: rand_box(rng) })
                .collect();
            let dets = (0..rng.below(max_boxes + 1))
                .map(|_| {
                    let score = if rng.below(2) == 0 {
                        rng.range(1, 10) as f64 / 10.0
                    } else {
                        rng.range(1, 1000) as f64 / 1000.0
                    };
                    if !gts.is_empty() && rng.below(3) != 0 {
                        let g = &gts[rng.below(gts.len() as u64) as usize];
                        let j = |rng: &mut Sm| rng.range(-3, 3) as f64;
                        let mut b = [g.bbox[0] + j(rng), g.bbox[1] + j(rng), g.bbox[2] + j(rng), g.bbox[3] + j(rng)];
                        if b[2] < b[0] {
                            b.swap(0, 2);
                        }
                        if b[3] < b[1] {
                            b.swap(1, 3);
                        }
                        let class_id = if rng.below(5) == 0 { rng.below(u64::from(classes)) as u32 } else { g.class_id };
                        OracleDet { class_id, score, bbox: b }
                    } else {
                        OracleDet { class_id: rng.below(u64::from(classes)) as u32, score, bbox: rand_box(rng) }
                    }
                })
                .collect();
            (dets, gts)
        })
        .collect()
}

pub mod glue {
    use super::*;
    use thermeval::detector::FileDetector;
    use thermeval::formats::{ClassMap, Dataset, DetectionRecord, ImageEntry};
    use thermeval::geometry::{BBox, Detection, GroundTruthBox};

    pub fn bbox(b: [f64; 4]) -> BBox {
        BBox::new(b[0], b[1], b[2], b[3]).unwrap()
    }

    /// Dataset and replaying detector for an oracle dataset.
    pub fn to_library(images: &[OracleImage], classes: u32) -> (Dataset, FileDetector) {
        let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let mut parts = Vec::new();
        let mut records = Vec::new();
        for (i, (dets, gts)) in images.iter().enumerate() {
            let id = format!("img{i}");
            parts.push((
                ImageEntry::new(id.clone(), 64, 64),
                gts.iter().map(|g| GroundTruthBox::new(bbox(g.bbox), g.class_id)).collect(),
            ));
            for d in dets {
                let det = Detection::new(bbox(d.bbox), d.class_id, d.score).unwrap();
                records.push(DetectionRecord::new(id.clone(), &det));
            }
        }
        let ds = Dataset::from_parts(ClassMap::new(names).unwrap(), parts).unwrap();
        let fd = FileDetector::from_records("oracle", records, Some(&ds.manifest));
        (ds, fd)
    }

    pub const W: f64 = 640.0;
    pub const H: f64 = 512.0;

    /// 640x512 frames of 3 to 8 boxes over the 7 default classes, kept
    /// inside the part of the frame every default TTA view sees and
    /// pairwise IoU at most 0.2.
    pub fn visible_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = Sm(seed);
        let parts = (0..n)
            .map(|i| {
                let k = rng.range(3, 8);
                let mut boxes: Vec<GroundTruthBox> = Vec::new();
                while boxes.len() < k as usize {
                    let w = rng.range(20, 120) as f64;
                    let h = rng.range(20, 120) as f64;
                    let x0 = rng.range(40, 600 - w as i64) as f64;
                    let y0 = rng.range(30, 482 - h as i64) as f64;
                    let b = [x0, y0, x0 + w, y0 + h];
                    let clash = boxes
                        .iter()
                        .any(|g| iou_exact(&qbox(b), &qbox(g.bbox.to_array())) > Q::new(1, 5));
                    if !clash {
                        boxes.push(GroundTruthBox::new(bbox(b), rng.below(7) as u32));
                    }
                }
                (ImageEntry::new(format!("frame{i:03}"), W as u32, H as u32), boxes)
            })
            .collect();
        Dataset::from_parts(ClassMap::default(), parts).unwrap()
    }
}
