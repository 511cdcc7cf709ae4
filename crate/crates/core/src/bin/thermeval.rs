use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use thermeval::augment::{mosaic, LabeledSample, MosaicParams, DEFAULT_MIN_VISIBLE};
use thermeval::bench::{bench_protocol, compare_modes, BenchImage, MonotonicClock};
use thermeval::config::{build_detectors, DetectorSpec, ProtocolKind, RunConfig};
use thermeval::detector::{view_seed, DelayDetector, Detector, EmptyDetector, MockNoise};
use thermeval::ensemble::{select_best_subset, Ensemble, EnsembleConfig};
use thermeval::formats::{
    class_distribution, read_detections_file, read_raw_gray, write_detections, write_label_file, Dataset,
    DatasetManifest, DetectionRecord, ImageEntry,
};
use thermeval::fusion::Merge;
use thermeval::geometry::Size;
use thermeval::metrics::{evaluate_with_threads, ApMode, EvalConfig, MetricsReport, Protocol};
use thermeval::tta::{TtaConfig, ViewSpec};
use thermeval::{Error, Result};

#[derive(Parser)]
#[command(name = "thermeval", version, about = "Thermal object detection evaluation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert between label files and detection files.
    Convert(ConvertArgs),
    /// Per-class annotation counts of a manifest.
    Stats(StatsArgs),
    /// Precision, recall and mAP of a detector under a test-time protocol.
    Evaluate(EvalArgs),
    /// `evaluate --protocol tta`.
    TtaEval(EvalArgs),
    /// `evaluate --protocol ttme` over every given detector.
    EnsembleEval(EvalArgs),
    /// Rank every subset of the given detectors by ensemble mAP.
    SelectEnsemble(SelectArgs),
    /// Compose four-image mosaics with remapped labels.
    Mosaic(MosaicArgs),
    /// Per-image latency and FPS, or a side-by-side protocol comparison.
    Bench(BenchArgs),
    /// Per-class precision-recall curves as CSV and SVG.
    PrPlot(PrPlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeKind {
    Nms,
    Wbf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApModeArg {
    AllPoint,
    RawTrapezoid,
}

#[derive(Args)]
struct Source {
    /// Run configuration document (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; overrides the configuration's.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Detection file to replay (repeatable).
    #[arg(long = "detections", value_name = "FILE")]
    detections: Vec<PathBuf>,
    /// Seeded mock detector: `NAME` or `NAME:key=value,...` with MockNoise
    /// keys and `cost_ms` (repeatable).
    #[arg(long = "mock", value_name = "SPEC")]
    mocks: Vec<String>,
    /// Seed for every mock (mock i gets seed + i).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Thresholds {
    /// Matching IoU threshold [default: 0.5].
    #[arg(long = "iou-thresh")]
    iou: Option<f64>,
    /// Confidence cutoff for precision and recall [default: 0.5].
    #[arg(long = "conf-thresh")]
    conf: Option<f64>,
    #[arg(long = "ap-mode", value_enum)]
    ap_mode: Option<ApModeArg>,
    /// Report fractions instead of percentages.
    #[arg(long)]
    fraction: bool,
}

#[derive(Args)]
struct Fusion {
    /// TTA views as view ids, comma separated (must include identity).
    #[arg(long)]
    views: Vec<String>,
    /// Fusion rule for TTA views and ensemble members.
    #[arg(long, value_enum)]
    merge: Option<MergeKind>,
    /// IoU threshold of the fusion rule [default: 0.5].
    #[arg(long = "merge-iou")]
    merge_iou: Option<f64>,
    /// Ensemble member weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
}

#[derive(Args)]
struct Output {
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    to: ConvertTarget,
    /// Detection file to turn into label files (with `--to labels`).
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Only keep detections scoring at least this (with `--to labels`).
    #[arg(long = "conf-thresh", default_value_t = 0.5)]
    conf: f64,
    /// Output file (detections) or directory (labels).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvertTarget {
    /// Ground truth as a detection file with score 1.
    Detections,
    /// Identity-view detections as normalized label files.
    Labels,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    thresholds: Thresholds,
    #[command(flatten)]
    fusion: Fusion,
    /// ttna, tta or ttme; defaults to the configuration's, else ttna.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<ProtocolKind>,
    /// Worker threads (default: all cores). Reports do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Include wall-clock latency in the report.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    thresholds: Thresholds,
    #[command(flatten)]
    fusion: Fusion,
    /// Largest subset to consider [default: number of candidates].
    #[arg(long = "max-size")]
    max_size: Option<usize>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct MosaicArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Side of the square output canvas in pixels.
    #[arg(long, default_value_t = 640)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Put every pivot at the canvas centre instead of drawing it.
    #[arg(long)]
    center: bool,
    #[arg(long = "min-visible", default_value_t = DEFAULT_MIN_VISIBLE)]
    min_visible: f64,
    /// Also compose raw grayscale images (needs `image` paths).
    #[arg(long)]
    pixels: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    thresholds: Thresholds,
    #[command(flatten)]
    fusion: Fusion,
    /// ttna, tta or ttme; defaults to the configuration's, else ttna.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<ProtocolKind>,
    /// Compare these protocols on accuracy and latency instead.
    #[arg(long, value_delimiter = ',', value_parser = parse_protocol)]
    modes: Vec<ProtocolKind>,
    /// Benchmark a stub that sleeps this long and detects nothing.
    #[arg(long = "stub-ms")]
    stub_ms: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct PrPlotArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    thresholds: Thresholds,
    #[command(flatten)]
    fusion: Fusion,
    /// ttna, tta or ttme; defaults to the configuration's, else ttna.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<ProtocolKind>,
    /// Receives `pr_curves.csv` and `pr_curves.svg`.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

fn parse_protocol(s: &str) -> std::result::Result<ProtocolKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Everything needed to evaluate: data, detectors and settings.
struct Run {
    dataset: Dataset,
    detectors: Vec<Arc<dyn Detector>>,
    protocol: ProtocolKind,
    eval: EvalConfig,
    tta: TtaConfig,
    ensemble: EnsembleConfig,
    warmup: usize,
    iters: usize,
}

fn parse_mock(spec: &str) -> Result<DetectorSpec> {
    let (name, params) = spec.split_once(':').unwrap_or((spec, ""));
    if name.is_empty() {
        return Err(Error::Invalid(format!("mock spec '{spec}' has no name")));
    }
    let mut map = serde_json::Map::new();
    let mut cost_ms = 0.0;
    for kv in params.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("mock parameter '{kv}' is not key=value")))?;
        let bad = || Error::Invalid(format!("mock parameter '{kv}' has a bad value"));
        match k {
            "cost_ms" => cost_ms = v.parse().map_err(|_| bad())?,
            "fp_classes" => {
                let ids = v
                    .split('|')
                    .map(|x| x.parse::<u32>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                map.insert(k.into(), ids.into());
            }
            "global_seed" => {
                map.insert(k.into(), v.parse::<u64>().map_err(|_| bad())?.into());
            }
            _ => {
                let x: f64 = v.parse().map_err(|_| bad())?;
                map.insert(k.into(), x.into());
            }
        }
    }
    let noise: MockNoise = serde_json::from_value(map.into())
        .map_err(|e| Error::Invalid(format!("mock '{name}': {e}")))?;
    Ok(DetectorSpec::Mock {
        name: name.to_string(),
        noise,
        cost_ms,
    })
}

/// Splits a comma separated view list. View ids carry commas between
/// their numbers, so a piece only starts a new view when it begins with a
/// letter.
fn split_views(list: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for piece in list.split(',') {
        match out.last_mut() {
            Some(prev) if !piece.trim_start().starts_with(|c: char| c.is_ascii_alphabetic()) => {
                prev.push(',');
                prev.push_str(piece);
            }
            _ => out.push(piece.trim().to_string()),
        }
    }
    out
}

fn load_run(src: &Source, th: &Thresholds, fu: &Fusion, protocol: Option<ProtocolKind>) -> Result<Run> {
    let mut cfg = match &src.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let manifest = src
                .manifest
                .clone()
                .ok_or_else(|| Error::Invalid("either --config or --manifest is required".into()))?;
            RunConfig::from_json(&serde_json::json!({ "manifest": manifest }).to_string(), "flags")?
        }
    };
    if let Some(m) = &src.manifest {
        cfg.manifest = m.clone();
    }
    for path in &src.detections {
        cfg.detectors.push(DetectorSpec::File {
            path: path.clone(),
            name: None,
        });
    }
    for m in &src.mocks {
        cfg.detectors.push(parse_mock(m)?);
    }
    if src.seed.is_some() {
        cfg.seed = src.seed;
    }
    if let Some(p) = protocol {
        cfg.protocol = p;
    }
    if let Some(v) = th.iou {
        cfg.eval.iou_threshold = v;
    }
    if let Some(v) = th.conf {
        cfg.eval.confidence_threshold = v;
    }
    if let Some(m) = th.ap_mode {
        cfg.eval.ap_mode = match m {
            ApModeArg::AllPoint => ApMode::AllPoint,
            ApModeArg::RawTrapezoid => ApMode::RawTrapezoid,
        };
    }
    if th.fraction {
        cfg.eval.report_percent = false;
    }
    if !fu.views.is_empty() {
        cfg.tta.views = fu
            .views
            .iter()
            .flat_map(|list| split_views(list))
            .map(|v| v.parse::<ViewSpec>())
            .collect::<Result<_>>()?;
    }
    if fu.merge.is_some() || fu.merge_iou.is_some() {
        let iou = fu.merge_iou.unwrap_or(cfg.tta.merge.iou());
        let kind = fu.merge.unwrap_or(match cfg.tta.merge {
            Merge::Nms { .. } => MergeKind::Nms,
            Merge::WeightedFusion { .. } => MergeKind::Wbf,
        });
        let merge = match kind {
            MergeKind::Nms => Merge::Nms { iou },
            MergeKind::Wbf => Merge::WeightedFusion { iou },
        };
        cfg.tta.merge = merge;
        cfg.ensemble.merge = merge;
    }
    if !fu.weights.is_empty() {
        cfg.ensemble.weights = fu.weights.clone();
    }
    cfg.validate()?;
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let dataset = Dataset::load(manifest)?;
    let detectors = build_detectors(&cfg.detectors, &dataset, cfg.seed)?;
    Ok(Run {
        dataset,
        detectors,
        protocol: cfg.protocol,
        eval: cfg.eval,
        tta: cfg.tta,
        ensemble: cfg.ensemble,
        warmup: cfg.warmup,
        iters: cfg.iters,
    })
}

impl Run {
    fn single(&self, kind: ProtocolKind) -> Result<&dyn Detector> {
        match self.detectors.as_slice() {
            [d] => Ok(d.as_ref()),
            [] => Err(Error::Invalid("no detector given (use --detections, --mock or a config)".into())),
            _ => Err(Error::Invalid(format!(
                "protocol {} takes one detector, got {}; use ttme to ensemble them",
                protocol_name(kind),
                self.detectors.len()
            ))),
        }
    }

    fn ensemble(&self) -> Result<Ensemble> {
        Ensemble::new(self.detectors.clone(), &self.ensemble)
    }

    fn evaluate(&self, threads: Option<usize>) -> Result<MetricsReport> {
        match self.protocol {
            ProtocolKind::Ttna => evaluate_with_threads(&self.dataset, &Protocol::Ttna(self.single(ProtocolKind::Ttna)?), &self.eval, threads),
            ProtocolKind::Tta => {
                evaluate_with_threads(&self.dataset, &Protocol::Tta(self.single(ProtocolKind::Tta)?, &self.tta), &self.eval, threads)
            }
            ProtocolKind::Ttme => evaluate_with_threads(&self.dataset, &Protocol::Ttme(&self.ensemble()?), &self.eval, threads),
        }
    }
}

fn protocol_name(p: ProtocolKind) -> &'static str {
    match p {
        ProtocolKind::Ttna => "ttna",
        ProtocolKind::Tta => "tta",
        ProtocolKind::Ttme => "ttme",
    }
}

fn emit(out: &Output, text: &str) -> Result<()> {
    match &out.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::Io { path: "<stdout>".into(), source: e })
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    match a.to {
        ConvertTarget::Detections => {
            let dataset = Dataset::load(manifest)?;
            let mut records = Vec::new();
            for img in &dataset.manifest.images {
                for g in dataset.ground_truth(&img.id) {
                    let det = thermeval::geometry::Detection::new(g.bbox, g.class_id, 1.0)?;
                    records.push(DetectionRecord::new(img.id.clone(), &det));
                }
            }
            let mut buf = Vec::new();
            write_detections(&records, &mut buf).expect("writing to memory");
            write_file(&a.out, &buf)
        }
        ConvertTarget::Labels => {
            let path = a
                .detections
                .as_ref()
                .ok_or_else(|| Error::Invalid("--to labels needs --detections".into()))?;
            let records = read_detections_file(path, Some(&manifest))?;
            fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
            for img in &manifest.images {
                let boxes: Vec<_> = records
                    .iter()
                    .filter(|r| r.image_id == img.id && r.view_id == thermeval::formats::IDENTITY_VIEW && r.score >= a.conf)
                    .map(|r| thermeval::geometry::GroundTruthBox::new(r.bbox, r.class_id))
                    .collect();
                let text = write_label_file(&boxes, f64::from(img.width), f64::from(img.height));
                write_file(&a.out.join(format!("{}.txt", img.id)), text.as_bytes())?;
            }
            Ok(())
        }
    }
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let dist = class_distribution(&manifest)?;
    let text = match a.output.format {
        Format::Json => serde_json::to_string_pretty(&dist).expect("distribution serializes") + "\n",
        Format::Csv => {
            let mut s = String::from("class,count\n");
            for (name, n) in &dist.counts {
                s += &format!("{name},{n}\n");
            }
            s + &format!("total,{}\n", dist.total)
        }
        Format::Table => {
            let mut s = format!("{:<12} {:>8}\n", "class", "count");
            for (name, n) in &dist.counts {
                s += &format!("{name:<12} {n:>8}\n");
            }
            s + &format!("{:<12} {:>8}\n", "total", dist.total)
        }
    };
    emit(&a.output, &text)
}

fn cmd_evaluate(a: &EvalArgs, forced: Option<ProtocolKind>) -> Result<()> {
    let run = load_run(&a.source, &a.thresholds, &a.fusion, forced.or(a.protocol))?;
    if a.threads == Some(0) {
        return Err(Error::Invalid("--threads must be >= 1".into()));
    }
    let report = run.evaluate(a.threads)?;
    let text = match a.output.format {
        Format::Json => report.render_json(a.timing),
        Format::Table => report.render_table(a.timing),
        Format::Csv => report.render_csv(),
    };
    emit(&a.output, &text)
}

fn cmd_select(a: &SelectArgs) -> Result<()> {
    let run = load_run(&a.source, &a.thresholds, &a.fusion, Some(ProtocolKind::Ttme))?;
    let max = a.max_size.unwrap_or(run.detectors.len());
    let sel = select_best_subset(&run.detectors, &run.dataset, &run.eval, max, &run.ensemble)?;
    let text = match a.output.format {
        Format::Json => sel.render_json(),
        Format::Table => sel.render_table(run.eval.report_percent),
        Format::Csv => {
            let s = if run.eval.report_percent { 100.0 } else { 1.0 };
            let mut t = String::from("rank,map,members\n");
            for (i, r) in sel.ranked.iter().enumerate() {
                t += &format!("{},{},{}\n", i + 1, r.map * s, r.names.join("+"));
            }
            t
        }
    };
    emit(&a.output, &text)
}

fn cmd_mosaic(a: &MosaicArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let dataset = Dataset::load(manifest)?;
    let images = &dataset.manifest.images;
    let samples = images
        .iter()
        .map(|img| {
            let s = LabeledSample::new(img.id.clone(), img.size(), dataset.ground_truth(&img.id).to_vec());
            if !a.pixels {
                return Ok(s);
            }
            let path = img
                .image_path
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("image '{}' has no image path", img.id)))?;
            s.with_pixels(read_raw_gray(dataset.manifest.resolve(path), img.width, img.height)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let size = f64::from(a.size);
    let mut entries = Vec::new();
    let mut drop_log = Vec::new();
    let mut kept = 0usize;
    for (k, group) in samples.chunks_exact(4).enumerate() {
        let id = format!("mosaic_{k:05}");
        let mut params = if a.center {
            MosaicParams::centered(size)
        } else {
            MosaicParams::random(size, view_seed(a.seed, &id, "mosaic"))
        };
        params.min_visible_fraction = a.min_visible;
        let m = mosaic(group, &params, id.clone())?;
        kept += m.sample.boxes.len();
        let label_rel = PathBuf::from("labels").join(format!("{id}.txt"));
        write_file(&a.out_dir.join(&label_rel), write_label_file(&m.sample.boxes, size, size).as_bytes())?;
        let mut entry = ImageEntry::new(id.clone(), a.size, a.size);
        entry.label_path = Some(label_rel);
        if let Some(px) = &m.sample.pixels {
            let rel = PathBuf::from("images").join(format!("{id}.raw"));
            write_file(&a.out_dir.join(&rel), px)?;
            entry.image_path = Some(rel);
        }
        entries.push(entry);
        for d in &m.dropped {
            let line = serde_json::json!({
                "mosaic": id,
                "image_id": d.image_id,
                "index": d.index,
                "class_id": d.class_id,
                "visible_fraction": d.visible_fraction,
            });
            drop_log.push(line.to_string());
        }
    }
    let out_manifest = DatasetManifest::new(dataset.manifest.class_map.clone(), entries)?;
    write_file(&a.out_dir.join("manifest.json"), out_manifest.to_json().as_bytes())?;
    let mut log = drop_log.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    write_file(&a.out_dir.join("drop_log.jsonl"), log.as_bytes())?;
    println!(
        "mosaics {}  boxes kept {}  dropped {}  unused images {}",
        out_manifest.images.len(),
        kept,
        drop_log.len(),
        samples.len() % 4
    );
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if let Some(ms) = a.stub_ms {
        if !(ms.is_finite() && ms >= 0.0) {
            return Err(Error::Invalid("--stub-ms must be >= 0".into()));
        }
        let stub = DelayDetector::new(EmptyDetector, Duration::from_secs_f64(ms / 1000.0));
        let images = match &a.source.manifest {
            Some(m) => bench_images(&DatasetManifest::load(m)?.images),
            None => vec![BenchImage { id: "stub".into(), canvas: Size { width: 640.0, height: 512.0 } }],
        };
        let r = bench_protocol(&Protocol::Ttna(&stub), &images, a.warmup.unwrap_or(10), a.iters.unwrap_or(100), &MonotonicClock::new())?;
        return emit(&a.output, &render_bench(&r, a.output.format));
    }
    let mut run = load_run(&a.source, &a.thresholds, &a.fusion, a.protocol)?;
    if let Some(w) = a.warmup {
        run.warmup = w;
    }
    if let Some(n) = a.iters {
        run.iters = n;
    }
    if !a.modes.is_empty() {
        let ensemble = match a.modes.contains(&ProtocolKind::Ttme) {
            true => Some(run.ensemble()?),
            false => None,
        };
        let mut protocols = Vec::new();
        for m in &a.modes {
            protocols.push(match m {
                ProtocolKind::Ttna => Protocol::Ttna(run.single(*m)?),
                ProtocolKind::Tta => Protocol::Tta(run.single(*m)?, &run.tta),
                ProtocolKind::Ttme => Protocol::Ttme(ensemble.as_ref().expect("built above")),
            });
        }
        let cmp = compare_modes(&run.dataset, &protocols, &run.eval)?;
        let text = match a.output.format {
            Format::Json => cmp.render_json(),
            Format::Table => cmp.render_table(),
            Format::Csv => cmp.render_csv(),
        };
        return emit(&a.output, &text);
    }
    let images = bench_images(&run.dataset.manifest.images);
    let ensemble;
    let protocol = match run.protocol {
        ProtocolKind::Ttna => Protocol::Ttna(run.single(run.protocol)?),
        ProtocolKind::Tta => Protocol::Tta(run.single(run.protocol)?, &run.tta),
        ProtocolKind::Ttme => {
            ensemble = run.ensemble()?;
            Protocol::Ttme(&ensemble)
        }
    };
    let r = bench_protocol(&protocol, &images, run.warmup, run.iters, &MonotonicClock::new())?;
    emit(&a.output, &render_bench(&r, a.output.format))
}

fn bench_images(images: &[ImageEntry]) -> Vec<BenchImage> {
    images
        .iter()
        .map(|i| BenchImage { id: i.id.clone(), canvas: i.size() })
        .collect()
}

fn render_bench(r: &thermeval::bench::BenchResult, f: Format) -> String {
    match f {
        Format::Json => r.render_json(),
        Format::Table => r.render_table(),
        Format::Csv => r.render_csv(),
    }
}

fn cmd_pr_plot(a: &PrPlotArgs) -> Result<()> {
    let run = load_run(&a.source, &a.thresholds, &a.fusion, a.protocol)?;
    let report = run.evaluate(None)?;
    write_file(&a.out_dir.join("pr_curves.csv"), report.render_curves_csv().as_bytes())?;
    write_file(&a.out_dir.join("pr_curves.svg"), report.render_curves_svg().as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Convert(a) => cmd_convert(a),
        Cmd::Stats(a) => cmd_stats(a),
        Cmd::Evaluate(a) => cmd_evaluate(a, None),
        Cmd::TtaEval(a) => cmd_evaluate(a, Some(ProtocolKind::Tta)),
        Cmd::EnsembleEval(a) => cmd_evaluate(a, Some(ProtocolKind::Ttme)),
        Cmd::SelectEnsemble(a) => cmd_select(a),
        Cmd::Mosaic(a) => cmd_mosaic(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::PrPlot(a) => cmd_pr_plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut cur: Option<&dyn std::error::Error> = std::error::Error::source(&e);
            while let Some(s) = cur {
                let cause = s.to_string();
                if !msg.contains(&cause) {
                    msg += &format!("\n  caused by: {cause}");
                }
                cur = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
