use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn thermeval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermeval")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn micro_manifest() -> String {
    fixture("micro/manifest.json").display().to_string()
}

#[test]
fn stats_table_lists_counts() {
    let o = thermeval(&["stats", "--manifest", &micro_manifest()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["car", "4"]), "{text}");
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["total", "10"]), "{text}");
}

#[test]
fn stats_csv() {
    let o = thermeval(&["stats", "--manifest", &micro_manifest(), "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("class,count\nbicycle,1\n"), "{text}");
    assert!(text.ends_with("total,10\n"));
}

#[test]
fn missing_detection_file_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let o = thermeval(&["evaluate", "--manifest", &micro_manifest(), "--detections", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.jsonl"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_1() {
    let o = thermeval(&["evaluate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_detection_line_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, "{\"image_id\":\"m0\",\"class_id\":3,\"score\":0.5,\"bbox\":[0,0,1,1]}\nnot json\n").unwrap();
    let o = thermeval(&["evaluate", "--manifest", &micro_manifest(), "--detections", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bad.jsonl") && err.contains('2'), "{err}");
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"manifest": "m.json", "protocl": "tta"}"#).unwrap();
    let o = thermeval(&["evaluate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("protocl"), "{}", stderr(&o));

    let o = thermeval(&["evaluate", "--manifest", &micro_manifest(), "--mock", "m:p_miss=2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_file_detections_json() {
    let dets = fixture("micro/detections.jsonl");
    let o = thermeval(&[
        "evaluate",
        "--manifest",
        &micro_manifest(),
        "--detections",
        dets.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["map"].as_f64(), Some(90.0));
    assert_eq!(v["recall"].as_f64(), Some(70.0));
    assert!(v.get("latency").is_none());
}

#[test]
fn seeded_tta_evaluation_is_reproducible() {
    let args = [
        "evaluate",
        "--manifest",
        &micro_manifest(),
        "--protocol",
        "tta",
        "--seed",
        "7",
        "--mock",
        "m:p_miss=0.3,jitter_sigma=2,fp_rate=1",
        "--format",
        "json",
    ];
    let a = thermeval(&args);
    let b = thermeval(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["protocol"], "tta");

    let mut other = args;
    other[6] = "8";
    assert_ne!(thermeval(&other).stdout, a.stdout);
}

#[test]
fn tta_eval_subcommand_takes_views() {
    let o = thermeval(&[
        "tta-eval",
        "--manifest",
        &micro_manifest(),
        "--mock",
        "m",
        "--views",
        "identity,hflip,shift-frac:0.05,0",
        "--merge",
        "wbf",
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("all"));

    let o = thermeval(&["tta-eval", "--manifest", &micro_manifest(), "--mock", "m", "--views", "spin:3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn file_detector_without_views_cannot_run_tta() {
    let dets = fixture("micro/detections.jsonl");
    let o = thermeval(&["tta-eval", "--manifest", &micro_manifest(), "--detections", dets.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hflip"), "{}", stderr(&o));
}

#[test]
fn ensemble_eval_and_selection() {
    let o = thermeval(&[
        "ensemble-eval",
        "--manifest",
        &micro_manifest(),
        "--mock",
        "a:p_miss=0.5",
        "--mock",
        "b:p_miss=0.5",
        "--seed",
        "1",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["protocol"], "ttme");

    let o = thermeval(&[
        "select-ensemble",
        "--manifest",
        &micro_manifest(),
        "--mock",
        "a:p_miss=0.5",
        "--mock",
        "b:p_miss=0.5",
        "--mock",
        "c:p_miss=0.5",
        "--seed",
        "1",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let ranked = v["ranked"].as_array().unwrap();
    assert_eq!(ranked.len(), 7);
    let maps: Vec<f64> = ranked.iter().map(|r| r["map"].as_f64().unwrap()).collect();
    assert!(maps.windows(2).all(|w| w[0] >= w[1]), "{maps:?}");
}

#[test]
fn two_detectors_need_ttme() {
    let o = thermeval(&["evaluate", "--manifest", &micro_manifest(), "--mock", "a", "--mock", "b"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ttme"));
}

#[test]
fn convert_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("gt.jsonl");
    let o = thermeval(&["convert", "--manifest", &micro_manifest(), "--to", "detections", "--out", dets.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&dets).unwrap().lines().count(), 10);

    let o = thermeval(&[
        "evaluate",
        "--manifest",
        &micro_manifest(),
        "--detections",
        dets.to_str().unwrap(),
        "--format",
        "json",
    ]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["precision"].as_f64(), v["recall"].as_f64(), v["map"].as_f64()), (Some(100.0), Some(100.0), Some(100.0)));

    let labels = dir.path().join("labels");
    let o = thermeval(&[
        "convert",
        "--manifest",
        &micro_manifest(),
        "--to",
        "labels",
        "--detections",
        dets.to_str().unwrap(),
        "--out",
        labels.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..6 {
        let ours = fs::read_to_string(labels.join(format!("m{i}.txt"))).unwrap();
        let orig = fs::read_to_string(fixture(&format!("micro/labels/m{i}.txt"))).unwrap();
        assert_eq!(ours, orig, "m{i}");
    }
}

#[test]
fn mosaic_writes_manifest_labels_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mosaics");
    let o = thermeval(&["mosaic", "--manifest", &micro_manifest(), "--out-dir", out.to_str().unwrap(), "--center", "--size", "320"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("unused images 2"), "{}", stdout(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(v["images"].as_array().unwrap().len(), 1);
    assert!(out.join("labels/mosaic_00000.txt").exists());
    assert!(out.join("drop_log.jsonl").exists());

    let s = thermeval(&["stats", "--manifest", out.join("manifest.json").to_str().unwrap(), "--format", "json"]);
    assert!(s.status.success(), "{}", stderr(&s));
    let stats: Value = serde_json::from_slice(&s.stdout).unwrap();
    let dropped = fs::read_to_string(out.join("drop_log.jsonl")).unwrap().lines().count() as u64;
    // m0..m3 carry 7 boxes
    assert_eq!(stats["total"].as_u64().unwrap() + dropped, 7);
}

#[test]
fn mosaic_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = thermeval(&["mosaic", "--manifest", &micro_manifest(), "--out-dir", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out.join("labels/mosaic_00000.txt")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
}

#[test]
fn pr_plot_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let dets = fixture("micro/detections.jsonl");
    let o = thermeval(&[
        "pr-plot",
        "--manifest",
        &micro_manifest(),
        "--detections",
        dets.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("pr_curves.csv")).unwrap();
    assert!(csv.lines().count() > 1);
    let svg = fs::read_to_string(dir.path().join("pr_curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"), "{}", &svg[..40.min(svg.len())]);
    assert!(svg.contains("car"));
}

#[test]
fn bench_stub() {
    let o = thermeval(&["bench", "--stub-ms", "2", "--warmup", "1", "--iters", "10", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["latency"]["n"].as_u64(), Some(10));
    let mean = v["latency"]["mean_ms"].as_f64().unwrap();
    assert!(mean >= 2.0, "{mean}");
    assert!((v["latency"]["fps"].as_f64().unwrap() - 1000.0 / mean).abs() < 1e-9);

    let o = thermeval(&["bench", "--stub-ms", "-1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_compares_modes() {
    let o = thermeval(&[
        "bench",
        "--manifest",
        &micro_manifest(),
        "--mock",
        "m:cost_ms=1",
        "--modes",
        "ttna,tta",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["mode"], "ttna");
    assert!(rows[0]["best"].as_array().unwrap().iter().any(|b| b == "latency"));
}

#[test]
fn config_document_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let doc = serde_json::json!({
        "manifest": fixture("micro/manifest.json"),
        "detectors": [{"kind": "file", "path": fixture("micro/detections.jsonl"), "name": "stored"}],
        "eval": {"iou_threshold": 0.5, "confidence_threshold": 0.0, "report_percent": false},
    });
    fs::write(&path, doc.to_string()).unwrap();
    let o = thermeval(&["evaluate", "--config", path.to_str().unwrap(), "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["detector"], "stored");
    // conf 0 admits the 0.3 pole and the 0.4 duplicate person
    assert!((v["recall"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!((v["precision"].as_f64().unwrap() - 8.0 / 11.0).abs() < 1e-12);
}

#[test]
fn timing_is_opt_in() {
    let base = ["evaluate", "--manifest", &micro_manifest(), "--mock", "m", "--format", "json"];
    let o = thermeval(&base);
    assert!(!stdout(&o).contains("latency"));
    let mut with = base.to_vec();
    with.push("--timing");
    let o = thermeval(&with);
    assert!(stdout(&o).contains("latency"));
}
