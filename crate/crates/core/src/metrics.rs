//! Matching, precision/recall, PR curves, average precision and full
//! dataset evaluation.
//!
//! Everything here works in fractions; [`MetricsReport::render_json`] and
//! [`MetricsReport::render_table`] scale to percent when the config asks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::LatencyStats;
use crate::detector::{Detector, ViewKey};
use crate::ensemble::{ensemble_detect, Ensemble};
use crate::error::{Error, Result};
use crate::formats::Dataset;
use crate::geometry::{iou, score_order, AffineTransform, Detection, GroundTruthBox};
use crate::tta::{tta_detect, TtaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Trapezoidal area under the raw curve.
    RawTrapezoid,
}

fn default_half() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_half")]
    pub iou_threshold: f64,
    /// Cutoff for the point precision/recall figures; AP uses every score.
    #[serde(default = "default_half")]
    pub confidence_threshold: f64,
    #[serde(default)]
    pub ap_mode: ApMode,
    #[serde(default = "default_true")]
    pub report_percent: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            confidence_threshold: 0.5,
            ap_mode: ApMode::AllPoint,
            report_percent: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("confidence_threshold", self.confidence_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// True positive, matched to the ground-truth box at this index.
    Tp(usize),
    Fp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// One verdict per input detection, in input order.
    pub verdicts: Vec<Verdict>,
    pub unmatched_gt: Vec<usize>,
}

/// Greedy matching of one image: detections in descending score order
/// (ties by lower index) each claim their best-IoU unmatched ground truth of
/// the same class when that IoU reaches `iou_threshold`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut matched = vec![false; gts.len()];
    let mut verdicts = vec![Verdict::Fp; dets.len()];
    for i in score_order(dets, |d| d.score) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || g.class_id != d.class_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= iou_threshold {
                matched[j] = true;
                verdicts[i] = Verdict::Tp(j);
            }
        }
    }
    MatchResult {
        verdicts,
        unmatched_gt: (0..gts.len()).filter(|&j| !matched[j]).collect(),
    }
}

/// Precision and recall in percent; 0 when a denominator is 0.
pub fn precision_recall(c: &ConfusionCounts) -> (f64, f64) {
    let (p, r) = precision_recall_fraction(c);
    (p * 100.0, r * 100.0)
}

pub fn precision_recall_fraction(c: &ConfusionCounts) -> (f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score_cutoff: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Scored verdicts of one class pooled over a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassTally {
    /// `(score, is_tp)` per detection.
    pub scored: Vec<(f64, bool)>,
    pub gt_count: u64,
}

impl ClassTally {
    /// Adds one image's detections and ground truth, all of this class.
    pub fn add_image(&mut self, dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64) {
        let m = match_detections(dets, gts, iou_threshold);
        self.gt_count += gts.len() as u64;
        self.scored.extend(
            dets.iter()
                .zip(&m.verdicts)
                .map(|(d, v)| (d.score, matches!(v, Verdict::Tp(_)))),
        );
    }

    /// Counts at a confidence cutoff. Greedy matching handles detections in
    /// score order, so the verdicts of the full run restricted to the
    /// detections at or above the cutoff equal a fresh run on just those.
    pub fn counts_at(&self, cutoff: f64) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for &(s, tp) in &self.scored {
            if s >= cutoff {
                if tp {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
            }
        }
        c.fn_ = self.gt_count - c.tp;
        c
    }

    /// One point per distinct score, descending.
    pub fn curve(&self) -> Vec<PrPoint> {
        let mut sorted = self.scored.clone();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut out = Vec::new();
        let (mut tp, mut n) = (0u64, 0u64);
        let mut i = 0;
        while i < sorted.len() {
            let cutoff = sorted[i].0;
            while i < sorted.len() && sorted[i].0 == cutoff {
                n += 1;
                tp += u64::from(sorted[i].1);
                i += 1;
            }
            out.push(PrPoint {
                score_cutoff: cutoff,
                recall: if self.gt_count == 0 { 0.0 } else { tp as f64 / self.gt_count as f64 },
                precision: tp as f64 / n as f64,
            });
        }
        out
    }
}

/// PR curve of `class_id` over per-image `(detections, ground truth)` pairs.
pub fn pr_curve(
    images: &[(&[Detection], &[GroundTruthBox])],
    class_id: u32,
    iou_threshold: f64,
) -> Vec<PrPoint> {
    let mut tally = ClassTally::default();
    for (dets, gts) in images {
        let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == class_id).copied().collect();
        let g: Vec<GroundTruthBox> = gts.iter().filter(|g| g.class_id == class_id).copied().collect();
        tally.add_image(&d, &g, iou_threshold);
    }
    tally.curve()
}

/// Average precision of a curve ordered by descending cutoff.
pub fn average_precision(curve: &[PrPoint], mode: ApMode) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let ap = match mode {
        ApMode::AllPoint => {
            let mut envelope = vec![0.0f64; curve.len()];
            let mut running = 0.0f64;
            for (i, p) in curve.iter().enumerate().rev() {
                running = running.max(p.precision);
                envelope[i] = running;
            }
            let mut prev = 0.0;
            let mut area = 0.0;
            for (p, env) in curve.iter().zip(envelope) {
                if p.recall > prev {
                    area += (p.recall - prev) * env;
                    prev = p.recall;
                }
            }
            area
        }
        ApMode::RawTrapezoid => {
            let mut prev = (0.0, curve[0].precision);
            let mut area = 0.0;
            for p in curve {
                area += (p.recall - prev.0) * (p.precision + prev.1) / 2.0;
                prev = (p.recall, p.precision);
            }
            area
        }
    };
    ap.clamp(0.0, 1.0)
}

/// Mean of the APs of classes that have ground truth (`Some`). Classes
/// without ground truth (`None`) are excluded.
pub fn mean_average_precision(per_class_ap: &BTreeMap<u32, Option<f64>>) -> Result<f64> {
    let aps: Vec<f64> = per_class_ap.values().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::invalid("mAP undefined: no class has ground-truth boxes"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Test-time protocol used by [`evaluate`].
#[derive(Clone, Copy)]
pub enum Protocol<'a> {
    /// Single identity view.
    Ttna(&'a dyn Detector),
    Tta(&'a dyn Detector, &'a TtaConfig),
    Ttme(&'a Ensemble),
}

impl Protocol<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::Ttna(_) => "ttna",
            Protocol::Tta(..) => "tta",
            Protocol::Ttme(_) => "ttme",
        }
    }

    pub fn detector_name(&self) -> String {
        match self {
            Protocol::Ttna(d) | Protocol::Tta(d, _) => d.name().to_string(),
            Protocol::Ttme(e) => e.name(),
        }
    }

    /// Detections for one image in its original frame.
    pub fn run(&self, image_id: &str, canvas: crate::geometry::Size) -> Result<Vec<Detection>> {
        match self {
            Protocol::Ttna(d) => d.detect(&ViewKey::identity(image_id), &AffineTransform::identity(), canvas),
            Protocol::Tta(d, cfg) => tta_detect(*d, image_id, canvas, cfg),
            Protocol::Ttme(e) => ensemble_detect(e, image_id, canvas),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub name: String,
    pub gt_count: u64,
    /// Counts at the confidence threshold.
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    /// `None` for classes without ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub detector: String,
    pub images: usize,
    pub config: EvalConfig,
    pub classes: Vec<ClassReport>,
    /// Pooled over all classes at the confidence threshold.
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
    /// Wall time of the protocol per image (detector calls plus fusion).
    pub latency: Option<LatencyStats>,
    #[serde(skip)]
    pub curves: BTreeMap<u32, Vec<PrPoint>>,
}

/// Image-level evaluation output before aggregation.
struct ImageResult {
    detections: Vec<Detection>,
    elapsed_ms: f64,
}

pub fn evaluate(dataset: &Dataset, protocol: &Protocol<'_>, cfg: &EvalConfig) -> Result<MetricsReport> {
    evaluate_with_threads(dataset, protocol, cfg, None)
}

/// Like [`evaluate`], running images on a pool of `threads` workers (the
/// global pool when `None`). The result does not depend on the thread count.
pub fn evaluate_with_threads(
    dataset: &Dataset,
    protocol: &Protocol<'_>,
    cfg: &EvalConfig,
    threads: Option<usize>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut images: Vec<_> = dataset.manifest.images.iter().collect();
    images.sort_by(|a, b| a.id.cmp(&b.id));

    let run_all = || -> Result<Vec<ImageResult>> {
        images
            .par_iter()
            .map(|img| {
                let start = Instant::now();
                let detections = protocol.run(&img.id, img.size()).map_err(|e| Error::Image {
                    image_id: img.id.clone(),
                    source: Box::new(e),
                })?;
                Ok(ImageResult {
                    detections,
                    elapsed_ms: start.elapsed().as_secs_f64() * 1000.0,
                })
            })
            .collect()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(run_all)?,
        None => run_all()?,
    };

    let class_map = dataset.class_map();
    let mut tallies: Vec<ClassTally> = vec![ClassTally::default(); class_map.len()];
    for (img, res) in images.iter().zip(&results) {
        if let Some(bad) = res.detections.iter().find(|d| !class_map.contains(d.class_id)) {
            return Err(Error::Image {
                image_id: img.id.clone(),
                source: Box::new(Error::invalid(format!("class id out of range: {}", bad.class_id))),
            });
        }
        let gts = dataset.ground_truth(&img.id);
        for (c, tally) in tallies.iter_mut().enumerate() {
            let c = c as u32;
            let d: Vec<Detection> = res.detections.iter().filter(|d| d.class_id == c).copied().collect();
            let g: Vec<GroundTruthBox> = gts.iter().filter(|g| g.class_id == c).copied().collect();
            tally.add_image(&d, &g, cfg.iou_threshold);
        }
    }

    let mut classes = Vec::with_capacity(tallies.len());
    let mut curves = BTreeMap::new();
    let mut aps = BTreeMap::new();
    let mut total = ConfusionCounts::default();
    for (c, tally) in tallies.iter().enumerate() {
        let c = c as u32;
        let counts = tally.counts_at(cfg.confidence_threshold);
        total += counts;
        let (precision, recall) = precision_recall_fraction(&counts);
        let curve = tally.curve();
        let ap = (tally.gt_count > 0).then(|| average_precision(&curve, cfg.ap_mode));
        aps.insert(c, ap);
        curves.insert(c, curve);
        classes.push(ClassReport {
            class_id: c,
            name: class_map.name(c).unwrap_or_default().to_string(),
            gt_count: tally.gt_count,
            counts,
            precision,
            recall,
            ap,
        });
    }
    let (precision, recall) = precision_recall_fraction(&total);
    let latencies: Vec<f64> = results.iter().map(|r| r.elapsed_ms).collect();

    Ok(MetricsReport {
        protocol: protocol.label().to_string(),
        detector: protocol.detector_name(),
        images: images.len(),
        config: cfg.clone(),
        classes,
        counts: total,
        precision,
        recall,
        map: mean_average_precision(&aps)?,
        latency: LatencyStats::from_samples(&latencies),
        curves,
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn round_trip_value(v: f64, scale: f64) -> serde_json::Value {
    serde_json::json!(v * scale)
}

impl MetricsReport {
    fn scale(&self) -> f64 {
        if self.config.report_percent {
            100.0
        } else {
            1.0
        }
    }

    /// Machine-readable report. Timing is left out unless asked for, so
    /// that reports of identical runs are byte-identical.
    pub fn render_json(&self, include_timing: bool) -> String {
        let s = self.scale();
        let classes: Vec<serde_json::Value> = self
            .classes
            .iter()
            .map(|c| {
                serde_json::json!({
                    "class_id": c.class_id,
                    "name": c.name,
                    "gt_count": c.gt_count,
                    "tp": c.counts.tp,
                    "fp": c.counts.fp,
                    "fn": c.counts.fn_,
                    "precision": round_trip_value(c.precision, s),
                    "recall": round_trip_value(c.recall, s),
                    "ap": c.ap.map(|a| round_trip_value(a, s)),
                })
            })
            .collect();
        let mut doc = serde_json::json!({
            "protocol": self.protocol,
            "detector": self.detector,
            "images": self.images,
            "units": if self.config.report_percent { "percent" } else { "fraction" },
            "iou_threshold": self.config.iou_threshold,
            "confidence_threshold": self.config.confidence_threshold,
            "ap_mode": self.config.ap_mode,
            "precision": round_trip_value(self.precision, s),
            "recall": round_trip_value(self.recall, s),
            "map": round_trip_value(self.map, s),
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn_,
            "classes": classes,
        });
        if include_timing {
            doc["latency_ms"] = serde_json::to_value(&self.latency).expect("latency serializes");
        }
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }

    pub fn render_table(&self, include_timing: bool) -> String {
        let s = self.scale();
        let unit = if self.config.report_percent { " %" } else { "" };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "protocol {}  detector {}  images {}  iou {}  conf {}",
            self.protocol, self.detector, self.images, self.config.iou_threshold, self.config.confidence_threshold
        );
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>6} {:>6} {:>6} {:>11} {:>11} {:>9}",
            "class", "gt", "tp", "fp", "fn",
            format!("precision{unit}"), format!("recall{unit}"), format!("AP{unit}")
        );
        for c in &self.classes {
            let ap = c.ap.map_or_else(|| "-".to_string(), |a| format!("{:.2}", a * s));
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>6} {:>6} {:>6} {:>11.2} {:>11.2} {:>9}",
                c.name, c.gt_count, c.counts.tp, c.counts.fp, c.counts.fn_, c.precision * s, c.recall * s, ap
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>6} {:>6} {:>6} {:>11.2} {:>11.2} {:>9.2}",
            "all",
            self.classes.iter().map(|c| c.gt_count).sum::<u64>(),
            self.counts.tp, self.counts.fp, self.counts.fn_,
            self.precision * s, self.recall * s, self.map * s
        );
        if include_timing {
            if let Some(l) = &self.latency {
                let _ = writeln!(
                    out,
                    "latency/image ms: mean {:.3}  median {:.3}  p95 {:.3}  fps {:.1}",
                    l.mean_ms, l.median_ms, l.p95_ms, l.fps
                );
            }
        }
        out
    }

    /// One row per class plus an `all` row; AP of the `all` row is the mAP.
    pub fn render_csv(&self) -> String {
        let s = self.scale();
        let mut out = String::from("class_id,class,gt,tp,fp,fn,precision,recall,ap\n");
        for c in &self.classes {
            let ap = c.ap.map_or_else(String::new, |a| (a * s).to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.class_id, c.name, c.gt_count, c.counts.tp, c.counts.fp, c.counts.fn_,
                c.precision * s, c.recall * s, ap
            );
        }
        let _ = writeln!(
            out,
            ",all,{},{},{},{},{},{},{}",
            self.classes.iter().map(|c| c.gt_count).sum::<u64>(),
            self.counts.tp, self.counts.fp, self.counts.fn_,
            self.precision * s, self.recall * s, self.map * s
        );
        out
    }

    /// Standalone SVG plot of the per-class precision-recall curves.
    pub fn render_curves_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 480.0;
        const M: f64 = 50.0;
        const COLORS: [&str; 8] = [
            "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        ];
        let px = |r: f64| M + r * (W - 2.0 * M);
        let py = |p: f64| H - M - p * (H - 2.0 * M);
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<path d="M{:.1} {:.1} V{:.1} H{:.1}" fill="none" stroke="black"/>"#,
            px(0.0), py(1.0), py(0.0), px(1.0)
        );
        for t in 0..=4 {
            let v = f64::from(t) / 4.0;
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{v}</text>"#, px(v), py(0.0) + 16.0);
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v}</text>"#, px(0.0) - 6.0, py(v) + 4.0);
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">recall</text>"#, W / 2.0, H - 12.0);
        let _ = writeln!(out, r#"<text x="14" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.1})">precision</text>"#, H / 2.0, H / 2.0);
        let mut legend = 0;
        for c in &self.classes {
            let Some(curve) = self.curves.get(&c.class_id).filter(|v| !v.is_empty()) else {
                continue;
            };
            let color = COLORS[c.class_id as usize % COLORS.len()];
            let points: Vec<String> = std::iter::once((0.0, curve[0].precision))
                .chain(curve.iter().map(|p| (p.recall, p.precision)))
                .map(|(r, p)| format!("{:.2},{:.2}", px(r), py(p)))
                .collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, points.join(" "));
            let ap = c.ap.map_or_else(|| "-".to_string(), |a| format!("{:.3}", a));
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{} AP {ap}</text>"#,
                W - M - 110.0, M + 14.0 * f64::from(legend), xml_escape(&c.name)
            );
            legend += 1;
        }
        out.push_str("</svg>\n");
        out
    }

    /// `class,score_cutoff,recall,precision` rows of every class curve.
    pub fn render_curves_csv(&self) -> String {
        let mut out = String::from("class,score_cutoff,recall,precision\n");
        for c in &self.classes {
            for p in self.curves.get(&c.class_id).into_iter().flatten() {
                let _ = writeln!(out, "{},{},{},{}", c.name, p.score_cutoff, p.recall, p.precision);
            }
        }
        out
    }
}
