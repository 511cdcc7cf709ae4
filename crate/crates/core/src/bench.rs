//! Latency and FPS measurement, and side-by-side comparison of test-time
//! protocols.
//!
//! FPS is `1000 / mean_ms` of the timed `detect` calls only. End-to-end
//! throughput (timed loop wall time, including loop overhead) is reported
//! separately.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::formats::Dataset;
use crate::geometry::Size;
use crate::metrics::{evaluate_with_threads, EvalConfig, Protocol};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    /// Summary of per-call latencies in milliseconds; `None` when empty.
    /// The 95th percentile uses the nearest-rank definition.
    pub fn from_samples(samples_ms: &[f64]) -> Option<Self> {
        if samples_ms.is_empty() {
            return None;
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean_ms = sorted.iter().sum::<f64>() / n as f64;
        let median_ms = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(LatencyStats {
            n,
            mean_ms,
            median_ms,
            p95_ms: sorted[rank - 1],
            fps: 1000.0 / mean_ms,
        })
    }
}

/// Monotonic time source, as an offset from an arbitrary fixed origin.
pub trait Clock {
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub protocol: String,
    pub detector: String,
    pub warmup: usize,
    pub latency: LatencyStats,
    /// Timed calls per second of wall time over the whole measured loop.
    pub throughput_per_s: f64,
}

impl BenchResult {
    pub fn render_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench result serializes") + "\n"
    }

    pub fn render_csv(&self) -> String {
        let l = &self.latency;
        format!(
            "protocol,detector,runs,warmup,mean_ms,median_ms,p95_ms,fps,throughput_per_s\n{},{},{},{},{},{},{},{},{}\n",
            self.protocol, self.detector, l.n, self.warmup, l.mean_ms, l.median_ms, l.p95_ms, l.fps, self.throughput_per_s
        )
    }

    pub fn render_table(&self) -> String {
        let l = &self.latency;
        format!(
            "protocol {}  detector {}  runs {}  warmup {}\nmean {:.3} ms  median {:.3} ms  p95 {:.3} ms  fps {:.1}  throughput {:.1} img/s\n",
            self.protocol, self.detector, l.n, self.warmup, l.mean_ms, l.median_ms, l.p95_ms, l.fps, self.throughput_per_s
        )
    }
}

/// An image to feed the benchmark loop.
#[derive(Debug, Clone)]
pub struct BenchImage {
    pub id: String,
    pub canvas: Size,
}

/// Times `iters` identity-view `detect` calls after `warmup` untimed ones,
/// cycling through `images`.
pub fn bench_detector(
    detector: &dyn Detector,
    images: &[BenchImage],
    warmup: usize,
    iters: usize,
    clock: &dyn Clock,
) -> Result<BenchResult> {
    bench_protocol(&Protocol::Ttna(detector), images, warmup, iters, clock)
}

/// Same as [`bench_detector`] for a whole test-time protocol: one timed
/// call produces the final detections of one image.
pub fn bench_protocol(
    protocol: &Protocol<'_>,
    images: &[BenchImage],
    warmup: usize,
    iters: usize,
    clock: &dyn Clock,
) -> Result<BenchResult> {
    if iters == 0 {
        return Err(Error::invalid("measured iterations must be >= 1"));
    }
    if images.is_empty() {
        return Err(Error::invalid("benchmark needs at least one image"));
    }
    let call = |i: usize| {
        let img = &images[i % images.len()];
        protocol.run(&img.id, img.canvas)
    };
    for i in 0..warmup {
        call(i).map_err(|e| Error::BenchAborted {
            completed: 0,
            partial_mean_ms: None,
            source: Box::new(e),
        })?;
    }
    let mut samples = Vec::with_capacity(iters);
    let loop_start = clock.now();
    for i in 0..iters {
        let start = clock.now();
        let outcome = call(warmup + i);
        let elapsed = clock.now().saturating_sub(start);
        if let Err(e) = outcome {
            return Err(Error::BenchAborted {
                completed: samples.len(),
                partial_mean_ms: LatencyStats::from_samples(&samples).map(|s| s.mean_ms),
                source: Box::new(e),
            });
        }
        samples.push(elapsed.as_secs_f64() * 1000.0);
    }
    let wall = clock.now().saturating_sub(loop_start).as_secs_f64();
    Ok(BenchResult {
        protocol: protocol.label().to_string(),
        detector: protocol.detector_name(),
        warmup,
        latency: LatencyStats::from_samples(&samples).expect("iters >= 1"),
        throughput_per_s: if wall > 0.0 { iters as f64 / wall } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeRow {
    pub mode: String,
    pub detector: String,
    pub precision: f64,
    pub recall: f64,
    pub map: f64,
    pub mean_latency_ms: f64,
    /// Metrics on which this row is best (ties flag every tied row).
    pub best: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeComparison {
    pub units: &'static str,
    pub rows: Vec<ModeRow>,
}

/// Evaluates every protocol on the same dataset and config, flagging the
/// best value per column (highest accuracy, lowest latency). Images run on
/// a single worker so latencies are not skewed by contention.
pub fn compare_modes(
    dataset: &Dataset,
    runs: &[Protocol<'_>],
    cfg: &EvalConfig,
) -> Result<ModeComparison> {
    let scale = if cfg.report_percent { 100.0 } else { 1.0 };
    let mut rows = Vec::with_capacity(runs.len());
    for p in runs {
        let r = evaluate_with_threads(dataset, p, cfg, Some(1))?;
        rows.push(ModeRow {
            mode: r.protocol.clone(),
            detector: r.detector.clone(),
            precision: r.precision * scale,
            recall: r.recall * scale,
            map: r.map * scale,
            mean_latency_ms: r.latency.as_ref().map_or(0.0, |l| l.mean_ms),
            best: Vec::new(),
        });
    }
    // (name, value, higher is better)
    type Column = (&'static str, fn(&ModeRow) -> f64, bool);
    let columns: [Column; 4] = [
        ("precision", |r| r.precision, true),
        ("recall", |r| r.recall, true),
        ("map", |r| r.map, true),
        ("latency", |r| r.mean_latency_ms, false),
    ];
    for (name, get, higher) in columns {
        let best = rows
            .iter()
            .map(get)
            .fold(None, |acc: Option<f64>, v| {
                Some(match acc {
                    None => v,
                    Some(a) if higher => a.max(v),
                    Some(a) => a.min(v),
                })
            });
        if let Some(best) = best {
            for r in rows.iter_mut() {
                if get(r) == best {
                    r.best.push(name);
                }
            }
        }
    }
    Ok(ModeComparison {
        units: if cfg.report_percent { "percent" } else { "fraction" },
        rows,
    })
}

impl ModeComparison {
    pub fn render_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }

    pub fn render_table(&self) -> String {
        let mark = |r: &ModeRow, col: &str| if r.best.contains(&col) { "*" } else { " " };
        let mut out = format!(
            "{:<6} {:<16} {:>10} {:>10} {:>10} {:>12}\n",
            "mode", "detector", "precision", "recall", "mAP", "latency ms"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<6} {:<16} {:>9.2}{} {:>9.2}{} {:>9.2}{} {:>11.3}{}",
                r.mode, r.detector,
                r.precision, mark(r, "precision"),
                r.recall, mark(r, "recall"),
                r.map, mark(r, "map"),
                r.mean_latency_ms, mark(r, "latency"),
            );
        }
        out.push_str("* best value per column\n");
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("mode,detector,precision,recall,map,mean_latency_ms,best\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.mode, r.detector, r.precision, r.recall, r.map, r.mean_latency_ms, r.best.join("|")
            );
        }
        out
    }
}
