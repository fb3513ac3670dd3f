//! C ABI over the annotation engine.
//!
//! Handles are opaque; every call returns an [`RaStatus`] and on failure
//! stores a message readable with [`ra_last_error`] from the same thread.
//! Runs created here use the simulated oracle and the centroid-pull hook.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use reid_annotate::config::RunConfig;
use reid_annotate::dataset::{generate_synthetic, load_manifest, DatasetError, DatasetManifest, SyntheticParams};
use reid_annotate::eval::estimate_t_pa;
use reid_annotate::metric::set_to_set_distance;
use reid_annotate::model_hook::CentroidPull;
use reid_annotate::oracle::SimulatedOracle;
use reid_annotate::run::{Engine, MetricsRecord, OracleMode, RunError, StopReason};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Run = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RaStop {
    Running = 0,
    MaxIterations = 1,
    PoolsExhausted = 2,
    NoGain = 3,
}

/// Latest metrics row. Missing values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RaMetrics {
    pub iteration: u32,
    pub tp_manual: u64,
    pub auto_count: u64,
    pub ar: f64,
    pub gained_tp_ratio: f64,
    pub rank1: f64,
    pub map: f64,
}

pub struct RaManifest {
    inner: DatasetManifest,
}

pub struct RaEngine {
    inner: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RaStatus, String);

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let status = match &e {
            RunError::Io(_) => RaStatus::Io,
            RunError::Config(_) => RaStatus::Config,
            _ => RaStatus::Run,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RaStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(RaStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn stop_code(s: Option<StopReason>) -> RaStop {
    match s {
        None => RaStop::Running,
        Some(StopReason::MaxIterations) => RaStop::MaxIterations,
        Some(StopReason::PoolsExhausted) => RaStop::PoolsExhausted,
        Some(StopReason::NoGain) => RaStop::NoGain,
    }
}

fn metrics(r: Option<&MetricsRecord>) -> RaMetrics {
    let nan = |x: Option<f64>| x.unwrap_or(f64::NAN);
    match r {
        Some(r) => RaMetrics {
            iteration: r.iteration,
            tp_manual: r.tp_manual,
            auto_count: r.auto_count,
            ar: nan(r.ar),
            gained_tp_ratio: nan(r.gained_tp_ratio),
            rank1: nan(r.rank1),
            map: nan(r.map),
        },
        None => RaMetrics {
            iteration: 0,
            tp_manual: 0,
            auto_count: 0,
            ar: f64::NAN,
            gained_tp_ratio: f64::NAN,
            rank1: f64::NAN,
            map: f64::NAN,
        },
    }
}

/// Copies the calling thread's last error message into `buf` and returns
/// the buffer size needed including the terminating NUL, or 0 if the last
/// call succeeded. Pass a null `buf` to query the size.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ra_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ra_manifest_load(path: *const c_char, out: *mut *mut RaManifest) -> RaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = text(path, "path")?;
        let m = load_manifest(Path::new(path)).map_err(|e| {
            let status = if matches!(e, DatasetError::Io { .. }) { RaStatus::Io } else { RaStatus::Parse };
            Failure(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(RaManifest { inner: m }));
        Ok(())
    })
}

/// Generates the 200-identity, 2-camera benchmark dataset.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ra_manifest_benchmark(seed: u64, out: *mut *mut RaManifest) -> RaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = generate_synthetic(&SyntheticParams::benchmark(seed))
            .map_err(|e| Failure(RaStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(RaManifest { inner: m }));
        Ok(())
    })
}

/// # Safety
/// `manifest` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ra_manifest_tracklet_count(manifest: *const RaManifest, out: *mut usize) -> RaStatus {
    guard(|| {
        let m = manifest.as_ref().ok_or_else(|| null("manifest"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.tracklet_count();
        Ok(())
    })
}

/// # Safety
/// `manifest` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ra_manifest_free(manifest: *mut RaManifest) {
    if !manifest.is_null() {
        drop(Box::from_raw(manifest));
    }
}

/// Starts a simulated run. `config` holds `key = value` lines and may be
/// null for defaults; `out_dir` may be null to keep the run in memory.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_new(
    manifest: *const RaManifest,
    config: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut RaEngine,
) -> RaStatus {
    guard(|| {
        let m = manifest.as_ref().ok_or_else(|| null("manifest"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_kv_str(text(config, "config")?).map_err(|e| Failure(RaStatus::Config, e.to_string()))?
        };
        let dir = if out_dir.is_null() { None } else { Some(Path::new(text(out_dir, "out_dir")?)) };
        let truth = m
            .inner
            .ground_truth()
            .ok_or_else(|| Failure(RaStatus::InvalidArgument, "manifest has no ground-truth identities".into()))?;
        let hook = Box::new(CentroidPull { alpha: config.refresh_alpha });
        let engine = Engine::new(&m.inner, config, OracleMode::Simulated(SimulatedOracle::new(truth)), hook, dir)?;
        *out = Box::into_raw(Box::new(RaEngine { inner: engine }));
        Ok(())
    })
}

/// Runs one iteration. `stop` (optional) reports whether the run has ended.
///
/// # Safety
/// `engine` must be a live handle; `metrics_out` and `stop` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_step(engine: *mut RaEngine, metrics_out: *mut RaMetrics, stop: *mut RaStop) -> RaStatus {
    guard(|| {
        let e = engine.as_mut().ok_or_else(|| null("engine"))?;
        let report = e.inner.step()?;
        if let Some(m) = metrics_out.as_mut() {
            *m = metrics(Some(&report.record));
        }
        if let Some(s) = stop.as_mut() {
            *s = stop_code(report.stop);
        }
        Ok(())
    })
}

/// Iterates until a stopping rule fires.
///
/// # Safety
/// `engine` must be a live handle; `stop` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_run(engine: *mut RaEngine, stop: *mut RaStop) -> RaStatus {
    guard(|| {
        let e = engine.as_mut().ok_or_else(|| null("engine"))?;
        let reason = e.inner.run_to_end()?;
        if let Some(s) = stop.as_mut() {
            *s = stop_code(Some(reason));
        }
        Ok(())
    })
}

/// Metrics of the last finished iteration; all zero/NaN before the first.
///
/// # Safety
/// `engine` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_latest(engine: *const RaEngine, out: *mut RaMetrics) -> RaStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = metrics(e.inner.history().last());
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ra_engine_free(engine: *mut RaEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Mean of the `k` smallest image-pair distances between two tracklets
/// given as row-major `rows x dim` feature blocks.
///
/// # Safety
/// `p` and `q` must point to `p_rows * dim` and `q_rows * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn ra_set_to_set_distance(
    p: *const f64,
    p_rows: usize,
    q: *const f64,
    q_rows: usize,
    dim: usize,
    k: usize,
    out: *mut f64,
) -> RaStatus {
    guard(|| {
        if p.is_null() || q.is_null() {
            return Err(null("features"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if dim == 0 {
            return Err(Failure(RaStatus::InvalidArgument, "dim must be positive".into()));
        }
        let p: Vec<&[f64]> = std::slice::from_raw_parts(p, p_rows * dim).chunks(dim).collect();
        let q: Vec<&[f64]> = std::slice::from_raw_parts(q, q_rows * dim).chunks(dim).collect();
        *out = set_to_set_distance(&p, &q, k).map_err(|e| Failure(RaStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Monte Carlo estimate of the pairwise annotations a full manual pass
/// would need, from per-tracklet identities.
///
/// # Safety
/// `identities` must point to `len` values; `mean` and `std` writable.
#[no_mangle]
pub unsafe extern "C" fn ra_estimate_t_pa(
    identities: *const u32,
    len: usize,
    runs: usize,
    seed: u64,
    mean: *mut f64,
    std: *mut f64,
) -> RaStatus {
    guard(|| {
        if identities.is_null() && len > 0 {
            return Err(null("identities"));
        }
        if runs == 0 {
            return Err(Failure(RaStatus::InvalidArgument, "runs must be positive".into()));
        }
        let mean = mean.as_mut().ok_or_else(|| null("mean"))?;
        let std = std.as_mut().ok_or_else(|| null("std"))?;
        let ids = if len == 0 { &[][..] } else { std::slice::from_raw_parts(identities, len) };
        let est = estimate_t_pa(ids, runs, seed);
        *mean = est.mean;
        *std = est.std;
        Ok(())
    })
}
