//! C ABI over the strlora crate.
//!
//! Every fallible function returns an [`SlStatus`]; on failure the message is
//! available from [`sl_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Panics never unwind into C; they surface as
//! [`SlStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use thiserror::Error;

use strlora::autograd::masked_softmax;
use strlora::config::RunConfig;
use strlora::metrics::{cka, forgetting, MetricLedger};
use strlora::routing::top_k;
use strlora::trainer::{run_stream, RunOutput};
use strlora::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Degenerate = 5,
    NonFinite = 6,
    Internal = 7,
}

#[derive(Debug, Error)]
enum FfiError {
    #[error("null pointer passed for `{0}`")]
    Null(&'static str),
    #[error("`{0}` is not valid UTF-8")]
    Utf8(&'static str),
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Core(#[from] strlora::Error),
    #[error("internal panic: {0}")]
    Panic(String),
}

impl FfiError {
    fn status(&self) -> SlStatus {
        use strlora::Error as E;
        match self {
            FfiError::Null(_) => SlStatus::NullPointer,
            FfiError::Utf8(_) | FfiError::Argument(_) => SlStatus::InvalidArgument,
            FfiError::Panic(_) => SlStatus::Internal,
            FfiError::Core(e) => match e {
                E::Io(_) | E::Format { .. } => SlStatus::Io,
                E::Config { .. } | E::Json(_) => SlStatus::Parse,
                E::DegenerateFeatures => SlStatus::Degenerate,
                E::NonFinite(_) => SlStatus::NonFinite,
                _ => SlStatus::InvalidArgument,
            },
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> SlStatus {
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown".into());
        Err(FfiError::Panic(msg))
    });
    match result {
        Ok(()) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SlStatus::Ok
        }
        Err(e) => {
            let status = e.status();
            set_last_error(e.to_string());
            status
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &'static str) -> Result<&'a [T], FfiError> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(FfiError::Null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to a writable `T`.
unsafe fn write<T>(ptr: *mut T, value: T, name: &'static str) -> Result<(), FfiError> {
    if ptr.is_null() {
        return Err(FfiError::Null(name));
    }
    ptr.write(value);
    Ok(())
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn string<'a>(ptr: *const c_char, name: &'static str) -> Result<&'a str, FfiError> {
    if ptr.is_null() {
        return Err(FfiError::Null(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| FfiError::Utf8(name))
}

/// # Safety
/// `ptr` must be null or a handle returned by this library and not yet freed.
unsafe fn handle<'a, T>(ptr: *const T, name: &'static str) -> Result<&'a T, FfiError> {
    ptr.as_ref().ok_or(FfiError::Null(name))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Relative drop of `current` below the best of `history[0..n]`, clamped at 0.
///
/// # Safety
/// `history` must be valid for `n` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_forgetting(
    history: *const f64,
    n: usize,
    current: f64,
    out: *mut f64,
) -> SlStatus {
    guard(|| {
        write(
            out,
            forgetting(slice(history, n, "history")?, current),
            "out",
        )
    })
}

/// Linear CKA between row-major `x` (`n×p`) and `y` (`n×q`).
///
/// # Safety
/// `x` and `y` must be valid for `n·p` and `n·q` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_cka(
    x: *const f64,
    y: *const f64,
    n: usize,
    p: usize,
    q: usize,
    out: *mut f64,
) -> SlStatus {
    guard(|| {
        let xt = Tensor::new(n, p, slice(x, n * p, "x")?.to_vec())?;
        let yt = Tensor::new(n, q, slice(y, n * q, "y")?.to_vec())?;
        write(out, cka(&xt, &yt)?, "out")
    })
}

/// Softmax over the entries with non-zero `mask`, exactly zero elsewhere.
///
/// # Safety
/// `logits`, `mask` and `out` must be valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn sl_masked_softmax(
    logits: *const f64,
    mask: *const u8,
    n: usize,
    out: *mut f64,
) -> SlStatus {
    guard(|| {
        let m: Vec<bool> = slice(mask, n, "mask")?.iter().map(|&b| b != 0).collect();
        let s = masked_softmax(slice(logits, n, "logits")?, &m)?;
        if n > 0 && out.is_null() {
            return Err(FfiError::Null("out"));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), out, n);
        Ok(())
    })
}

/// Indices of the `k` largest of `p[0..n]`, largest first, ties to the lower index.
///
/// # Safety
/// `p` must be valid for `n` reads and `out` for `k` writes.
#[no_mangle]
pub unsafe extern "C" fn sl_top_k(p: *const f64, n: usize, k: usize, out: *mut usize) -> SlStatus {
    guard(|| {
        let idx = top_k(slice(p, n, "p")?, k)?;
        if out.is_null() {
            return Err(FfiError::Null("out"));
        }
        ptr::copy_nonoverlapping(idx.as_ptr(), out, idx.len());
        Ok(())
    })
}

/// Per-chunk accuracy matrix with forgetting metrics.
pub struct SlLedger(MetricLedger);

/// Metrics of one dataset at one chunk. `seen` is false before the dataset
/// first appears, and the other fields are then zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlTaskMetrics {
    pub seen: bool,
    pub a: f64,
    pub f: f64,
    pub ap: f64,
    pub af: f64,
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_ledger_new(n_tasks: usize, out: *mut *mut SlLedger) -> SlStatus {
    guard(|| {
        if n_tasks == 0 {
            return Err(FfiError::Argument("ledger needs at least one task".into()));
        }
        write(
            out,
            Box::into_raw(Box::new(SlLedger(MetricLedger::new(n_tasks)))),
            "out",
        )
    })
}

/// # Safety
/// `ledger` must be NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn sl_ledger_free(ledger: *mut SlLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

/// Appends one chunk's accuracies. `seen[m] == 0` marks a dataset not yet
/// evaluated; a NULL `seen` marks every dataset as evaluated.
///
/// # Safety
/// `acc` (and `seen` unless NULL) must be valid for `n` reads.
#[no_mangle]
pub unsafe extern "C" fn sl_ledger_push(
    ledger: *mut SlLedger,
    acc: *const f64,
    seen: *const u8,
    n: usize,
) -> SlStatus {
    guard(|| {
        let l = ledger.as_mut().ok_or(FfiError::Null("ledger"))?;
        if n != l.0.n_tasks() {
            return Err(FfiError::Argument(format!(
                "expected {} accuracies, got {n}",
                l.0.n_tasks()
            )));
        }
        let acc = slice(acc, n, "acc")?;
        let row: Vec<Option<f64>> = if seen.is_null() {
            acc.iter().map(|&a| Some(a)).collect()
        } else {
            acc.iter()
                .zip(slice(seen, n, "seen")?)
                .map(|(&a, &s)| (s != 0).then_some(a))
                .collect()
        };
        l.0.push(&row)?;
        Ok(())
    })
}

/// Number of chunks recorded.
///
/// # Safety
/// `ledger` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_ledger_len(ledger: *const SlLedger, out: *mut usize) -> SlStatus {
    guard(|| write(out, handle(ledger, "ledger")?.0.rows().len(), "out"))
}

/// `(MAP, MAF)` after chunk `t` (1-based).
///
/// # Safety
/// `ledger` must be a live handle; `map` and `maf` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_ledger_summary(
    ledger: *const SlLedger,
    t: usize,
    map: *mut f64,
    maf: *mut f64,
) -> SlStatus {
    guard(|| {
        let row = ledger_row(handle(ledger, "ledger")?, t)?;
        write(map, row.map, "map")?;
        write(maf, row.maf, "maf")
    })
}

/// Metrics of dataset `m` (0-based) after chunk `t` (1-based).
///
/// # Safety
/// `ledger` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_ledger_task(
    ledger: *const SlLedger,
    t: usize,
    m: usize,
    out: *mut SlTaskMetrics,
) -> SlStatus {
    guard(|| {
        let row = ledger_row(handle(ledger, "ledger")?, t)?;
        let cell = row
            .tasks
            .get(m)
            .ok_or_else(|| FfiError::Argument(format!("dataset {m} out of range")))?;
        let v = cell.map_or(SlTaskMetrics::default(), |c| SlTaskMetrics {
            seen: true,
            a: c.a,
            f: c.f,
            ap: c.ap,
            af: c.af,
        });
        write(out, v, "out")
    })
}

fn ledger_row(l: &SlLedger, t: usize) -> Result<&strlora::metrics::LedgerRow, FfiError> {
    t.checked_sub(1)
        .and_then(|i| l.0.rows().get(i))
        .ok_or_else(|| FfiError::Argument(format!("chunk {t} not recorded")))
}

/// Writes the per-dataset CSV to `task_csv` and, unless NULL, the
/// per-chunk summary to `summary_csv`.
///
/// # Safety
/// `ledger` must be a live handle; paths must be NUL-terminated or NULL where allowed.
#[no_mangle]
pub unsafe extern "C" fn sl_ledger_write_csv(
    ledger: *const SlLedger,
    task_csv: *const c_char,
    summary_csv: *const c_char,
) -> SlStatus {
    guard(|| {
        let l = handle(ledger, "ledger")?;
        let f = std::fs::File::create(Path::new(string(task_csv, "task_csv")?))
            .map_err(strlora::Error::from)?;
        l.0.write_task_csv(std::io::BufWriter::new(f))?;
        if !summary_csv.is_null() {
            let f = std::fs::File::create(Path::new(string(summary_csv, "summary_csv")?))
                .map_err(strlora::Error::from)?;
            l.0.write_summary_csv(std::io::BufWriter::new(f))?;
        }
        Ok(())
    })
}

/// Run configuration.
pub struct SlConfig(RunConfig);

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_config_default(out: *mut *mut SlConfig) -> SlStatus {
    guard(|| {
        write(
            out,
            Box::into_raw(Box::new(SlConfig(RunConfig::default()))),
            "out",
        )
    })
}

/// Parses `key = value` lines; missing keys keep their defaults.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_config_parse(text: *const c_char, out: *mut *mut SlConfig) -> SlStatus {
    guard(|| {
        let cfg = RunConfig::parse(string(text, "text")?)?;
        write(out, Box::into_raw(Box::new(SlConfig(cfg))), "out")
    })
}

/// Sets one key, e.g. `("variant", "uniform_moe")` or `("seed", "3")`.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sl_config_set(
    cfg: *mut SlConfig,
    key: *const c_char,
    value: *const c_char,
) -> SlStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or(FfiError::Null("cfg"))?;
        c.0.set(string(key, "key")?, string(value, "value")?)?;
        Ok(())
    })
}

/// Serializes the configuration into `buf` (NUL-terminated). `needed`
/// receives the buffer size required, including the terminator; a `cap`
/// that is too small writes nothing and returns `SL_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must be valid for `cap` writes or NULL
/// when `cap` is 0; `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_config_to_text(
    cfg: *const SlConfig,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> SlStatus {
    guard(|| {
        let text = handle(cfg, "cfg")?.0.to_text();
        let n = text.len() + 1;
        write(needed, n, "needed")?;
        if cap < n {
            return Err(FfiError::Argument(format!(
                "buffer holds {cap} bytes, {n} needed"
            )));
        }
        if buf.is_null() {
            return Err(FfiError::Null("buf"));
        }
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        buf.add(text.len()).write(0);
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn sl_config_free(cfg: *mut SlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Result of one training run over the stream.
pub struct SlRun(RunOutput);

/// Trains over the configured stream, evaluating after every chunk. Output
/// files are written when the configuration sets `out`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_train(cfg: *const SlConfig, out: *mut *mut SlRun) -> SlStatus {
    guard(|| {
        let run = run_stream(&handle(cfg, "cfg")?.0)?;
        write(out, Box::into_raw(Box::new(SlRun(run))), "out")
    })
}

/// Final `(MAP, MAF)`.
///
/// # Safety
/// `run` must be a live handle; `map` and `maf` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_map_maf(
    run: *const SlRun,
    map: *mut f64,
    maf: *mut f64,
) -> SlStatus {
    guard(|| {
        let (a, f) = handle(run, "run")?.0.final_map_maf();
        write(map, a, "map")?;
        write(maf, f, "maf")
    })
}

/// Mean off-diagonal routing CKA across tasks at the end of the run.
/// Returns `SL_STATUS_DEGENERATE` when routing is constant and CKA undefined.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_mean_cka(run: *const SlRun, out: *mut f64) -> SlStatus {
    guard(|| {
        let report = handle(run, "run")?.0.homogeneity()?;
        let c = report
            .mean_off_diagonal()
            .ok_or(strlora::Error::DegenerateFeatures)?;
        write(out, c, "out")
    })
}

/// Copy of the run's metric ledger as a new handle.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sl_run_ledger(run: *const SlRun, out: *mut *mut SlLedger) -> SlStatus {
    guard(|| {
        let l = handle(run, "run")?.0.ledger.clone();
        write(out, Box::into_raw(Box::new(SlLedger(l))), "out")
    })
}

/// # Safety
/// `run` must be NULL or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn sl_run_free(run: *mut SlRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
