//! C ABI over `bayescp`.
//!
//! Every function returns a [`BcpStatus`]; on failure a message is kept in
//! thread-local storage and can be read with [`bcp_last_error_message`].
//! Handles are opaque, created by `bcp_calibrate`, `bcp_calibration_from_json`
//! or `bcp_posterior_load` and released with the matching `*_free`. Probability inputs are row-major
//! `n x k` arrays of `double`; label sets are returned as `k`-byte masks.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bayescp::conformal::{self, ConformalCalibration, ProbVector, ScoreKind};
use bayescp::inference::{posterior_predictive_batch, read_checkpoint, Checkpoint};
use bayescp::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Numerical = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// Nonconformity score used for calibration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcpScore {
    Thr = 0,
    Aps = 1,
}

/// A fitted conformal threshold.
pub struct BcpCalibration {
    inner: ConformalCalibration,
}

/// A trained posterior loaded from a checkpoint file.
pub struct BcpPosterior {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BcpStatus {
    match e.root() {
        Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::LengthMismatch { .. }
        | Error::Config(_) => BcpStatus::InvalidArgument,
        Error::NonFinite(_) | Error::Divergence(_) | Error::Singular(_) => BcpStatus::Numerical,
        Error::Parse { .. } | Error::Json(_) => BcpStatus::Parse,
        Error::Checkpoint(_) => BcpStatus::Checkpoint,
        Error::Io { .. } => BcpStatus::Io,
        Error::Context { .. } => BcpStatus::InvalidArgument,
    }
}

struct Failure(BcpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BcpStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BcpStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording the error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BcpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BcpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BcpStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn prob_rows(probs: *const f64, n: usize, k: usize) -> Result<Vec<ProbVector>, Failure> {
    if k == 0 {
        return Err(invalid("num_labels must be >= 1"));
    }
    let len = n.checked_mul(k).ok_or_else(|| invalid("n * k overflows"))?;
    let flat = slice(probs, len, "probs")?;
    Ok(flat
        .chunks_exact(k)
        .map(|row| ProbVector::new(row.to_vec()))
        .collect::<bayescp::Result<_>>()?)
}

fn write_mask(set: &conformal::PredictionSet, mask: &mut [u8]) -> usize {
    mask.iter_mut().for_each(|m| *m = 0);
    for &y in set.members() {
        mask[y] = 1;
    }
    set.len()
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bcp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Fits a conformal threshold from `n` calibration rows of `k` probabilities.
/// `aps` draws its per-example tie-breaking uniforms from `seed`.
///
/// # Safety
/// `probs` must point to `n * k` doubles, `labels` to `n` values, and `out`
/// to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn bcp_calibrate(
    probs: *const f64,
    labels: *const usize,
    n: usize,
    k: usize,
    alpha: f64,
    score: BcpScore,
    seed: u64,
    out: *mut *mut BcpCalibration,
) -> BcpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let rows = prob_rows(probs, n, k)?;
        let labels = slice(labels, n, "labels")?;
        let kind = match score {
            BcpScore::Thr => ScoreKind::Thr,
            BcpScore::Aps => ScoreKind::Aps,
        };
        let inner = conformal::calibrate(&rows, labels, alpha, kind, seed)?;
        *out = Box::into_raw(Box::new(BcpCalibration { inner }));
        Ok(())
    })
}

/// Restores a calibration from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bcp_calibration_from_json(json: *const c_char, out: *mut *mut BcpCalibration) -> BcpStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return Err(null("json or out"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| invalid(e.to_string()))?;
        let inner = ConformalCalibration::from_json(text)?;
        *out = Box::into_raw(Box::new(BcpCalibration { inner }));
        Ok(())
    })
}

/// Writes the threshold (`+inf` when the rank exceeds the calibration size).
///
/// # Safety
/// `cal` must be a live handle and `tau` writable.
#[no_mangle]
pub unsafe extern "C" fn bcp_calibration_tau(cal: *const BcpCalibration, tau: *mut f64) -> BcpStatus {
    guard(|| {
        let cal = cal.as_ref().ok_or_else(|| null("cal"))?;
        *tau.as_mut().ok_or_else(|| null("tau"))? = cal.inner.tau;
        Ok(())
    })
}

/// # Safety
/// `cal` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcp_calibration_free(cal: *mut BcpCalibration) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// Conformal set of one output. `u` is the `aps` tie-breaking uniform in
/// `[0, 1]` and is ignored by `thr`. `mask[y]` is set to 1 for members.
///
/// # Safety
/// `probs` and `mask` must hold `k` elements; `size` may be null.
#[no_mangle]
pub unsafe extern "C" fn bcp_predict_set(
    cal: *const BcpCalibration,
    probs: *const f64,
    k: usize,
    u: f64,
    mask: *mut u8,
    size: *mut usize,
) -> BcpStatus {
    guard(|| {
        let cal = cal.as_ref().ok_or_else(|| null("cal"))?;
        if !(0.0..=1.0).contains(&u) {
            return Err(invalid(format!("u must lie in [0, 1], got {u}")));
        }
        let p = prob_rows(probs, 1, k)?.pop().expect("one row");
        let set = conformal::predict_set_with_u(&p, &cal.inner, u);
        let n = write_mask(&set, slice_mut(mask, k, "mask")?);
        if let Some(s) = size.as_mut() {
            *s = n;
        }
        Ok(())
    })
}

/// Smallest set whose probability strictly exceeds `1 - alpha`.
///
/// # Safety
/// `probs` and `mask` must hold `k` elements; `size` may be null.
#[no_mangle]
pub unsafe extern "C" fn bcp_credible_set(
    probs: *const f64,
    k: usize,
    alpha: f64,
    mask: *mut u8,
    size: *mut usize,
) -> BcpStatus {
    guard(|| {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let p = prob_rows(probs, 1, k)?.pop().expect("one row");
        let set = conformal::credible_set(&p, alpha);
        let n = write_mask(&set, slice_mut(mask, k, "mask")?);
        if let Some(s) = size.as_mut() {
            *s = n;
        }
        Ok(())
    })
}

/// Loads a checkpoint written by the `bayescp` tool.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 path and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bcp_posterior_load(path: *const c_char, out: *mut *mut BcpPosterior) -> BcpStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(null("path or out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|e| invalid(e.to_string()))?;
        let inner = read_checkpoint(Path::new(p))?;
        *out = Box::into_raw(Box::new(BcpPosterior { inner }));
        Ok(())
    })
}

/// Writes the input dimension and the number of classes.
///
/// # Safety
/// `post` must be a live handle; either output may be null.
#[no_mangle]
pub unsafe extern "C" fn bcp_posterior_shape(
    post: *const BcpPosterior,
    input_dim: *mut usize,
    num_classes: *mut usize,
) -> BcpStatus {
    guard(|| {
        let post = post.as_ref().ok_or_else(|| null("post"))?;
        if let Some(d) = input_dim.as_mut() {
            *d = post.inner.spec.input_dim();
        }
        if let Some(k) = num_classes.as_mut() {
            *k = post.inner.spec.num_classes();
        }
        Ok(())
    })
}

/// Posterior predictive for `n` rows of `dim` inputs, written row-major into
/// `out` (`n * num_classes` doubles). Sampling posteriors draw `n_samples`
/// weight samples from `seed`; `temperature` divides the logits.
///
/// # Safety
/// `x` must hold `n * dim` doubles and `out` `n * num_classes`.
#[no_mangle]
pub unsafe extern "C" fn bcp_posterior_predict(
    post: *const BcpPosterior,
    x: *const f64,
    n: usize,
    dim: usize,
    n_samples: usize,
    seed: u64,
    temperature: f64,
    out: *mut f64,
) -> BcpStatus {
    guard(|| {
        let post = post.as_ref().ok_or_else(|| null("post"))?;
        let spec = &post.inner.spec;
        if dim != spec.input_dim() {
            return Err(invalid(format!(
                "expected inputs of dimension {}, got {dim}",
                spec.input_dim()
            )));
        }
        let len = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let xs = slice(x, len, "x")?;
        let k = spec.num_classes();
        let out = slice_mut(out, n * k, "out")?;
        let probs = posterior_predictive_batch(&post.inner.posterior, spec, xs, n_samples, seed, temperature)?;
        for (dst, p) in out.chunks_exact_mut(k).zip(&probs) {
            dst.copy_from_slice(p.as_slice());
        }
        Ok(())
    })
}

/// # Safety
/// `post` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcp_posterior_free(post: *mut BcpPosterior) {
    if !post.is_null() {
        drop(Box::from_raw(post));
    }
}
