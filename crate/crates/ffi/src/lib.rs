//! C interface to the evaluation toolkit.
//!
//! Fallible calls return a [`ThermevalStatus`]. After a failure,
//! [`thermeval_last_error`] describes it until the next failing call on the
//! same thread. Datasets and detectors are opaque handles released with
//! their `_free` function; strings handed out by the library are released
//! with [`thermeval_string_free`].
//!
//! Reports are the same JSON documents the command line prints.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use serde::Deserialize;

use thermeval::bench::{bench_protocol, BenchImage, MonotonicClock};
use thermeval::detector::{Detector, FileDetector, MockDetector, MockNoise, ViewKey};
use thermeval::ensemble::{Ensemble, EnsembleConfig};
use thermeval::formats::{class_distribution, Dataset, DatasetManifest};
use thermeval::geometry::{iou, AffineTransform, BBox, Detection, Size};
use thermeval::metrics::{evaluate_with_threads, EvalConfig, Protocol};
use thermeval::tta::TtaConfig;
use thermeval::Error;

pub const THERMEVAL_PROTOCOL_TTNA: u32 = 0;
pub const THERMEVAL_PROTOCOL_TTA: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThermevalStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Capability = 5,
    Detector = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermevalBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermevalDetection {
    pub bbox: ThermevalBox,
    pub class_id: u32,
    pub score: f64,
}

/// What a callback detector is asked to look at. `transform` holds the
/// view map `a, b, tx, c, d, ty` from original to view pixels; returned
/// boxes are in view pixels. Pointers are valid for the call only.
#[repr(C)]
pub struct ThermevalViewRequest {
    pub image_id: *const c_char,
    pub view_id: *const c_char,
    pub transform: [f64; 6],
    pub canvas_width: f64,
    pub canvas_height: f64,
}

/// Loaded manifest and ground truth.
pub struct ThermevalDataset(Dataset);

pub struct ThermevalDetector(Arc<dyn Detector>);

/// Collects a callback's detections.
pub struct ThermevalSink(Vec<Detection>);

/// Returns 0 on success; any other value fails the call that asked.
pub type ThermevalDetectFn = Option<
    unsafe extern "C" fn(user_data: *mut c_void, request: *const ThermevalViewRequest, sink: *mut ThermevalSink) -> i32,
>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ThermevalStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn status_of(e: &Error) -> ThermevalStatus {
    match e {
        Error::Io { .. } => ThermevalStatus::Io,
        Error::Parse { .. } | Error::Document { .. } | Error::UnknownImages(_) => ThermevalStatus::Parse,
        Error::Invalid(_) => ThermevalStatus::InvalidArgument,
        Error::Lookup { .. } | Error::Capability { .. } => ThermevalStatus::Capability,
        Error::Plugin { .. } => ThermevalStatus::Detector,
        Error::Image { source, .. } | Error::Member { source, .. } | Error::BenchAborted { source, .. } => {
            status_of(source)
        }
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ThermevalStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(ThermevalStatus::Panic, format!("internal panic: {msg}")))
    });
    match outcome {
        Ok(()) => ThermevalStatus::Ok,
        Err(Failure(status, msg)) => {
            set_last_error(msg);
            status
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ThermevalStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ThermevalStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s).expect("reports contain no nul bytes").into_raw()
}

fn to_bbox(b: &ThermevalBox) -> Result<BBox, Failure> {
    Ok(BBox::new(b.x_min, b.y_min, b.x_max, b.y_max)?)
}

/// Settings shared by the evaluation entry points. Every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Options {
    #[serde(default)]
    eval: EvalConfig,
    #[serde(default)]
    tta: TtaConfig,
    #[serde(default)]
    ensemble: EnsembleConfig,
}

unsafe fn options(json: *const c_char) -> Result<Options, Failure> {
    if json.is_null() {
        return Ok(Options::default());
    }
    let s = text(json, "options")?;
    serde_json::from_str(s).map_err(|e| {
        Failure(ThermevalStatus::Parse, Error::Document { origin: "options".into(), message: e.to_string() }.to_string())
    })
}

fn protocol<'a>(kind: u32, det: &'a dyn Detector, tta: &'a TtaConfig) -> Result<Protocol<'a>, Failure> {
    match kind {
        THERMEVAL_PROTOCOL_TTNA => Ok(Protocol::Ttna(det)),
        THERMEVAL_PROTOCOL_TTA => Ok(Protocol::Tta(det, tta)),
        other => Err(Failure(ThermevalStatus::InvalidArgument, format!("unknown protocol {other}"))),
    }
}

fn pool_size(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn thermeval_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on this thread.
#[no_mangle]
pub extern "C" fn thermeval_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn thermeval_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `a`, `b` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn thermeval_iou(a: *const ThermevalBox, b: *const ThermevalBox, out: *mut f64) -> ThermevalStatus {
    guard(|| {
        let a = to_bbox(handle(a, "a")?)?;
        let b = to_bbox(handle(b, "b")?)?;
        *out_ptr(out, "out")? = iou(&a, &b);
        Ok(())
    })
}

/// Loads a manifest and its label files.
///
/// # Safety
/// `manifest_path` is a nul-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn thermeval_dataset_load(
    manifest_path: *const c_char,
    out: *mut *mut ThermevalDataset,
) -> ThermevalStatus {
    guard(|| {
        let path = text(manifest_path, "manifest_path")?;
        let out = out_ptr(out, "out")?;
        let ds = Dataset::load(DatasetManifest::load(path)?)?;
        *out = Box::into_raw(Box::new(ThermevalDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` is null or a handle from [`thermeval_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn thermeval_dataset_free(ds: *mut ThermevalDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of images, 0 for a null handle.
///
/// # Safety
/// `ds` is null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn thermeval_dataset_image_count(ds: *const ThermevalDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.manifest.images.len())
}

/// Per-class annotation counts as JSON.
///
/// # Safety
/// `ds` is a live dataset handle; `out_json` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn thermeval_dataset_stats(ds: *const ThermevalDataset, out_json: *mut *mut c_char) -> ThermevalStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let out = out_ptr(out_json, "out_json")?;
        let dist = class_distribution(&ds.0.manifest)?;
        *out = to_c_string(serde_json::to_string_pretty(&dist).expect("distribution serializes"));
        Ok(())
    })
}

/// Replays a detection file, validated against the dataset.
///
/// # Safety
/// `path` is a nul-terminated string; `ds` a live dataset; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn thermeval_detector_from_file(
    path: *const c_char,
    ds: *const ThermevalDataset,
    out: *mut *mut ThermevalDetector,
) -> ThermevalStatus {
    guard(|| {
        let path = text(path, "path")?;
        let ds = handle(ds, "dataset")?;
        let out = out_ptr(out, "out")?;
        let det = FileDetector::from_file(path, &ds.0.manifest)?;
        *out = Box::into_raw(Box::new(ThermevalDetector(Arc::new(det))));
        Ok(())
    })
}

/// Seeded simulated detector over the dataset's ground truth. `noise_json`
/// may be null for a noiseless detector with seed 0.
///
/// # Safety
/// `name` is a nul-terminated string; `noise_json` null or one; `ds` a live
/// dataset; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn thermeval_detector_mock(
    name: *const c_char,
    ds: *const ThermevalDataset,
    noise_json: *const c_char,
    out: *mut *mut ThermevalDetector,
) -> ThermevalStatus {
    guard(|| {
        let name = text(name, "name")?;
        let ds = handle(ds, "dataset")?;
        let out = out_ptr(out, "out")?;
        let noise = if noise_json.is_null() {
            MockNoise::noiseless(0)
        } else {
            serde_json::from_str(text(noise_json, "noise_json")?).map_err(|e| {
                Failure(ThermevalStatus::Parse, format!("noise_json: {e}"))
            })?
        };
        let det = MockDetector::for_dataset(name, &ds.0, noise)?;
        *out = Box::into_raw(Box::new(ThermevalDetector(Arc::new(det))));
        Ok(())
    })
}

struct CallbackDetector {
    name: String,
    detect: unsafe extern "C" fn(*mut c_void, *const ThermevalViewRequest, *mut ThermevalSink) -> i32,
    user_data: *mut c_void,
}

// The caller promises the callback and its user data tolerate concurrent
// calls when evaluation runs on more than one thread.
unsafe impl Send for CallbackDetector {}
unsafe impl Sync for CallbackDetector {}

impl Detector for CallbackDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_view(&self, _view_id: &str) -> bool {
        true
    }

    fn detect(&self, view: &ViewKey, t: &AffineTransform, canvas: Size) -> thermeval::Result<Vec<Detection>> {
        let bad = |what: &str| Error::Plugin { detector: self.name.clone(), message: format!("{what} contains a nul byte") };
        let image_id = CString::new(view.image_id.as_str()).map_err(|_| bad("image id"))?;
        let view_id = CString::new(view.view_id.as_str()).map_err(|_| bad("view id"))?;
        let request = ThermevalViewRequest {
            image_id: image_id.as_ptr(),
            view_id: view_id.as_ptr(),
            transform: t.coefficients(),
            canvas_width: canvas.width,
            canvas_height: canvas.height,
        };
        let mut sink = ThermevalSink(Vec::new());
        let rc = unsafe { (self.detect)(self.user_data, &request, &mut sink) };
        if rc != 0 {
            return Err(Error::Plugin {
                detector: self.name.clone(),
                message: format!("callback returned {rc} for image '{}' view '{}'", view.image_id, view.view_id),
            });
        }
        Ok(sink.0)
    }
}

/// Wraps a host-language detector. The callback serves every view and is
/// called from worker threads unless evaluation runs with one thread.
///
/// # Safety
/// `name` is a nul-terminated string; `detect` stays callable and
/// `user_data` valid until the handle is freed.
#[no_mangle]
pub unsafe extern "C" fn thermeval_detector_callback(
    name: *const c_char,
    detect: ThermevalDetectFn,
    user_data: *mut c_void,
    out: *mut *mut ThermevalDetector,
) -> ThermevalStatus {
    guard(|| {
        let name = text(name, "name")?.to_string();
        let detect = detect.ok_or_else(|| null("detect"))?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(ThermevalDetector(Arc::new(CallbackDetector { name, detect, user_data }))));
        Ok(())
    })
}

/// # Safety
/// `det` is null or a detector handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn thermeval_detector_free(det: *mut ThermevalDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Adds one detection, in view pixels, from inside a callback.
///
/// # Safety
/// `sink` is the pointer the callback received; `det` is valid.
#[no_mangle]
pub unsafe extern "C" fn thermeval_sink_push(sink: *mut ThermevalSink, det: *const ThermevalDetection) -> ThermevalStatus {
    guard(|| {
        let sink = out_ptr(sink, "sink")?;
        let d = handle(det, "det")?;
        sink.0.push(Detection::new(to_bbox(&d.bbox)?, d.class_id, d.score)?);
        Ok(())
    })
}

/// Evaluates one detector and writes the JSON report to `out_json`.
/// `options_json` may be null; `threads` 0 uses the default pool.
///
/// # Safety
/// Handles are live; `options_json` null or nul-terminated; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn thermeval_evaluate(
    ds: *const ThermevalDataset,
    det: *const ThermevalDetector,
    protocol_kind: u32,
    options_json: *const c_char,
    threads: usize,
    out_json: *mut *mut c_char,
) -> ThermevalStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let det = handle(det, "detector")?;
        let out = out_ptr(out_json, "out_json")?;
        let opts = options(options_json)?;
        let p = protocol(protocol_kind, det.0.as_ref(), &opts.tta)?;
        let report = evaluate_with_threads(&ds.0, &p, &opts.eval, pool_size(threads))?;
        *out = to_c_string(report.render_json(false));
        Ok(())
    })
}

/// Evaluates the ensemble of `count` detectors.
///
/// # Safety
/// `dets` points to `count` live detector handles; otherwise as
/// [`thermeval_evaluate`].
#[no_mangle]
pub unsafe extern "C" fn thermeval_evaluate_ensemble(
    ds: *const ThermevalDataset,
    dets: *const *const ThermevalDetector,
    count: usize,
    options_json: *const c_char,
    threads: usize,
    out_json: *mut *mut c_char,
) -> ThermevalStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let out = out_ptr(out_json, "out_json")?;
        if dets.is_null() {
            return Err(null("dets"));
        }
        let members = std::slice::from_raw_parts(dets, count)
            .iter()
            .map(|&d| handle(d, "member").map(|h| h.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let opts = options(options_json)?;
        let ens = Ensemble::new(members, &opts.ensemble)?;
        let report = evaluate_with_threads(&ds.0, &Protocol::Ttme(&ens), &opts.eval, pool_size(threads))?;
        *out = to_c_string(report.render_json(false));
        Ok(())
    })
}

/// Times `iters` calls of the protocol over the dataset's images after
/// `warmup` untimed ones and writes the JSON result.
///
/// # Safety
/// As [`thermeval_evaluate`].
#[no_mangle]
pub unsafe extern "C" fn thermeval_bench(
    ds: *const ThermevalDataset,
    det: *const ThermevalDetector,
    protocol_kind: u32,
    options_json: *const c_char,
    warmup: usize,
    iters: usize,
    out_json: *mut *mut c_char,
) -> ThermevalStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let det = handle(det, "detector")?;
        let out = out_ptr(out_json, "out_json")?;
        let opts = options(options_json)?;
        let p = protocol(protocol_kind, det.0.as_ref(), &opts.tta)?;
        let images: Vec<BenchImage> = ds
            .0
            .manifest
            .images
            .iter()
            .map(|i| BenchImage { id: i.id.clone(), canvas: i.size() })
            .collect();
        let r = bench_protocol(&p, &images, warmup, iters, &MonotonicClock::new())?;
        *out = to_c_string(r.render_json());
        Ok(())
    })
}
