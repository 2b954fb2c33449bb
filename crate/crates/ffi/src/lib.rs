//! C ABI for loading trained checkpoints, forecasting, and the metric and
//! permutation-entropy helpers.
//!
//! Every function returns a [`ScinetStatus`]. On failure a description is
//! kept per thread and can be copied out with [`scinet_last_error_message`].
//! Models are opaque [`ScinetModel`] handles owned by the caller and released
//! with [`scinet_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use scinet_core::data::NormStats;
use scinet_core::eval::{compute_metrics, permutation_entropy, PeConfig};
use scinet_core::train::load_checkpoint;
use scinet_core::{Error, Scinet, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScinetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    Numeric = 7,
    Data = 8,
    Panic = 9,
}

impl From<&Error> for ScinetStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => ScinetStatus::Dimension,
            Error::Config(_) => ScinetStatus::Config,
            Error::Usage(_) => ScinetStatus::InvalidArgument,
            Error::Numeric { .. } | Error::Diverged(_) => ScinetStatus::Numeric,
            Error::Io { .. } => ScinetStatus::Io,
            Error::Parse { .. } | Error::Data(_) | Error::ConstantVariate(_) => ScinetStatus::Data,
            Error::VersionMismatch { .. } | Error::CorruptTensor { .. } | Error::Checkpoint(_) => {
                ScinetStatus::Checkpoint
            }
        }
    }
}

/// Forecast error summary filled by [`scinet_metrics`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScinetMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// A loaded model together with the normalization it was trained with.
pub struct ScinetModel {
    model: Scinet,
    norm: Option<NormStats>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: ScinetStatus, msg: impl Into<String>) -> ScinetStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (ScinetStatus, String)>) -> ScinetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ScinetStatus::Ok
        }
        Ok(Err((status, msg))) => fail(status, msg),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(ScinetStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn core_err(e: Error) -> (ScinetStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(name: &str) -> (ScinetStatus, String) {
    (ScinetStatus::NullPointer, format!("{name} is null"))
}

/// # Safety
/// `ptr` must point to `len` readable values when non-null.
unsafe fn slice<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], (ScinetStatus, String)> {
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `buf_len - 1` bytes. Returns the
/// buffer size needed for the full message, including the terminator.
///
/// # Safety
/// `buf` must be null or point to `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn scinet_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && buf_len > 0 {
            let n = bytes.len().min(buf_len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Static, NUL-terminated name of a status code.
#[no_mangle]
pub extern "C" fn scinet_status_name(status: ScinetStatus) -> *const c_char {
    let s: &'static CStr = match status {
        ScinetStatus::Ok => c"ok",
        ScinetStatus::NullPointer => c"null pointer",
        ScinetStatus::InvalidArgument => c"invalid argument",
        ScinetStatus::Dimension => c"dimension mismatch",
        ScinetStatus::Config => c"invalid configuration",
        ScinetStatus::Io => c"i/o error",
        ScinetStatus::Checkpoint => c"checkpoint error",
        ScinetStatus::Numeric => c"numeric error",
        ScinetStatus::Data => c"data error",
        ScinetStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Loads the checkpoint directory at `path` and stores a new handle in
/// `*out`. On failure `*out` is set to null.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scinet_model_load(path: *const c_char, out: *mut *mut ScinetModel) -> ScinetStatus {
    if out.is_null() {
        return fail(ScinetStatus::NullPointer, "out is null");
    }
    *out = ptr::null_mut();
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (ScinetStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let (model, manifest) = load_checkpoint(Path::new(path)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(ScinetModel {
            model,
            norm: manifest.norm,
        }));
        Ok(())
    })
}

/// Releases a handle from [`scinet_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scinet_model_free(model: *mut ScinetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Look-back length `T`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scinet_model_lookback(model: *const ScinetModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().lookback)
}

/// Forecast horizon, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scinet_model_horizon(model: *const ScinetModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().horizon)
}

/// Number of variates, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scinet_model_variates(model: *const ScinetModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().variates)
}

/// Forecasts `batch` windows.
///
/// `input` holds `batch × variates × lookback` values and `output` receives
/// `batch × variates × horizon`, both row-major with time as the fastest
/// axis. With `original_scale` nonzero, inputs are in data units and are
/// normalized with the checkpoint's statistics, and outputs are mapped back;
/// otherwise both sides are on the normalized scale.
///
/// # Safety
/// `input` and `output` must point to `input_len` and `output_len` values.
#[no_mangle]
pub unsafe extern "C" fn scinet_model_predict(
    model: *const ScinetModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    original_scale: c_int,
    output: *mut f64,
    output_len: usize,
) -> ScinetStatus {
    guard(|| {
        let handle = model.as_ref().ok_or_else(|| null("model"))?;
        let input = slice(input, input_len, "input")?;
        if output.is_null() {
            return Err(null("output"));
        }
        let cfg = handle.model.config();
        let (d, t, h) = (cfg.variates, cfg.lookback, cfg.horizon);
        let dims = |what: &str, got: usize, want: usize| {
            (
                ScinetStatus::Dimension,
                format!("{what} has {got} values, {batch} windows of [{d}, {t}→{h}] need {want}"),
            )
        };
        if batch == 0 || input_len != batch * d * t {
            return Err(dims("input", input_len, batch * d * t));
        }
        if output_len != batch * d * h {
            return Err(dims("output", output_len, batch * d * h));
        }
        let mut x = Tensor::new(vec![batch, d, t], input.to_vec()).map_err(core_err)?;
        let norm = if original_scale != 0 {
            Some(handle.norm.as_ref().ok_or_else(|| {
                (
                    ScinetStatus::Checkpoint,
                    "checkpoint has no normalization statistics".to_string(),
                )
            })?)
        } else {
            None
        };
        if let Some(stats) = norm {
            for (k, v) in x.data_mut().iter_mut().enumerate() {
                let j = (k / t) % d;
                *v = (*v - stats.mean[j]) / stats.std[j];
            }
        }
        let mut y = handle.model.predict(&x).map_err(core_err)?;
        if let Some(stats) = norm {
            stats.invert_tensor(&mut y).map_err(core_err)?;
        }
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Normalized permutation entropy of `series` with embedding dimension `m`
/// and time lag `lag`.
///
/// # Safety
/// `series` must point to `len` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scinet_permutation_entropy(
    series: *const f64,
    len: usize,
    m: usize,
    lag: usize,
    out: *mut f64,
) -> ScinetStatus {
    guard(|| {
        let series = slice(series, len, "series")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = permutation_entropy(series, &PeConfig { m, lag }).map_err(core_err)?;
        Ok(())
    })
}

/// MAE, MSE, RMSE and MAPE over `len` paired values.
///
/// # Safety
/// `pred` and `truth` must point to `len` values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn scinet_metrics(
    pred: *const f64,
    truth: *const f64,
    len: usize,
    out: *mut ScinetMetrics,
) -> ScinetStatus {
    guard(|| {
        let pred = slice(pred, len, "pred")?;
        let truth = slice(truth, len, "truth")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = Tensor::vector(pred).map_err(core_err)?;
        let t = Tensor::vector(truth).map_err(core_err)?;
        let r = compute_metrics(&p, &t).map_err(core_err)?;
        *out = ScinetMetrics {
            mae: r.mae,
            mse: r.mse,
            rmse: r.rmse,
            mape: r.mape,
        };
        Ok(())
    })
}
