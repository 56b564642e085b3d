//! C ABI over `samcal`.
//!
//! Every fallible function returns a [`SamcalStatus`] and writes results
//! through out-pointers. On failure the calling thread's last error message
//! is available from [`samcal_last_error`]. Models and prediction sets are
//! opaque handles released with their matching `_free` function.
//!
//! Arrays are row-major `double` buffers; labels are `size_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;
use std::ptr;

use samcal::losses::{self, LossKind};
use samcal::metrics::{self, PredictionSet};
use samcal::mlp::ModelParams;
use samcal::posthoc;
use samcal::tensor::Tensor;
use samcal::theory::{self, ProbePair};
use samcal::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Parse = 4,
    Io = 5,
    Domain = 6,
    Numeric = 7,
    Panic = 8,
}

/// Trained MLP parameters.
pub struct SamcalModel(ModelParams);

/// Probabilities (and optionally logits) with labels.
pub struct SamcalPredictions(PredictionSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure {
    status: SamcalStatus,
    message: String,
}

impl Failure {
    fn new(status: SamcalStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => SamcalStatus::Shape,
            Error::Config(_) => SamcalStatus::InvalidArgument,
            Error::Domain(_) => SamcalStatus::Domain,
            Error::NonFinite(_) => SamcalStatus::Numeric,
            Error::Parse { .. } => SamcalStatus::Parse,
            Error::Io { .. } => SamcalStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

type FfiResult<T = ()> = Result<T, Failure>;

fn guard<F: FnOnce() -> FfiResult + UnwindSafe>(f: F) -> SamcalStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(f) {
        Ok(Ok(())) => SamcalStatus::Ok,
        Ok(Err(fail)) => {
            set_error(fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SamcalStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Failure::new(SamcalStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Failure::new(SamcalStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if p.is_null() {
        return Err(Failure::new(SamcalStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> FfiResult<Tensor> {
    Ok(Tensor::new(vec![rows, cols], data.to_vec())?)
}

fn checked_len(rows: usize, cols: usize) -> FfiResult<usize> {
    rows.checked_mul(cols)
        .ok_or_else(|| Failure::new(SamcalStatus::InvalidArgument, "rows * cols overflows"))
}

/// Message of the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next `samcal_` call on the same thread.
#[no_mangle]
pub extern "C" fn samcal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_model_load(path: *const c_char, out_model: *mut *mut SamcalModel) -> SamcalStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = ptr::null_mut();
        if path.is_null() {
            return Err(Failure::new(SamcalStatus::NullPointer, "path is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::new(SamcalStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let model = ModelParams::load(Path::new(path))?;
        *slot = Box::into_raw(Box::new(SamcalModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `samcal_model_load` and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn samcal_model_free(model: *mut SamcalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width and class count.
///
/// # Safety
/// `model` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_model_dims(
    model: *const SamcalModel,
    out_input_dim: *mut usize,
    out_classes: *mut usize,
) -> SamcalStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *out(out_input_dim, "out_input_dim")? = m.0.spec().input_dim();
        *out(out_classes, "out_classes")? = m.0.spec().num_classes();
        Ok(())
    })
}

/// Softmax outputs for `rows` feature vectors; `out_probs` holds `rows * classes` doubles.
///
/// # Safety
/// `features` must hold `rows * cols` doubles and `out_probs` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn samcal_model_predict_proba(
    model: *const SamcalModel,
    features: *const f64,
    rows: usize,
    cols: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> SamcalStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let x = matrix(slice(features, checked_len(rows, cols)?, "features")?, rows, cols)?;
        let probs = m.0.forward(&x)?.softmax()?;
        if out_len != probs.len() {
            return Err(Failure::new(
                SamcalStatus::Shape,
                format!("out_len is {out_len}, need {}", probs.len()),
            ));
        }
        if out_probs.is_null() {
            return Err(Failure::new(SamcalStatus::NullPointer, "out_probs is null"));
        }
        std::slice::from_raw_parts_mut(out_probs, out_len).copy_from_slice(probs.data());
        Ok(())
    })
}

unsafe fn build_predictions(
    values: *const f64,
    labels: *const usize,
    n: usize,
    k: usize,
    out_preds: *mut *mut SamcalPredictions,
    logits: bool,
) -> SamcalStatus {
    guard(|| {
        let slot = out(out_preds, "out_predictions")?;
        *slot = ptr::null_mut();
        let t = matrix(slice(values, checked_len(n, k)?, "values")?, n, k)?;
        let y = slice(labels, n, "labels")?.to_vec();
        let set = if logits {
            PredictionSet::from_logits(t, y)?
        } else {
            PredictionSet::from_probs(t, y)?
        };
        *slot = Box::into_raw(Box::new(SamcalPredictions(set)));
        Ok(())
    })
}

/// Prediction set from an `n x k` probability matrix.
///
/// # Safety
/// `probs` must hold `n * k` doubles, `labels` `n` entries; `out_predictions` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_predictions_from_probs(
    probs: *const f64,
    labels: *const usize,
    n: usize,
    k: usize,
    out_predictions: *mut *mut SamcalPredictions,
) -> SamcalStatus {
    build_predictions(probs, labels, n, k, out_predictions, false)
}

/// Prediction set from an `n x k` logit matrix (keeps the logits for temperature fitting).
///
/// # Safety
/// Same contract as `samcal_predictions_from_probs`.
#[no_mangle]
pub unsafe extern "C" fn samcal_predictions_from_logits(
    logits: *const f64,
    labels: *const usize,
    n: usize,
    k: usize,
    out_predictions: *mut *mut SamcalPredictions,
) -> SamcalStatus {
    build_predictions(logits, labels, n, k, out_predictions, true)
}

/// # Safety
/// `predictions` must come from a `samcal_predictions_*` constructor. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn samcal_predictions_free(predictions: *mut SamcalPredictions) {
    if !predictions.is_null() {
        drop(Box::from_raw(predictions));
    }
}

unsafe fn metric(
    predictions: *const SamcalPredictions,
    out_value: *mut f64,
    f: impl FnOnce(&PredictionSet) -> samcal::Result<f64> + UnwindSafe,
) -> SamcalStatus {
    guard(|| {
        let p = deref(predictions, "predictions")?;
        *out(out_value, "out_value")? = f(&p.0)?;
        Ok(())
    })
}

/// Equal-width binned ECE with `bins` bins.
///
/// # Safety
/// `predictions` must be a live handle; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_ece(predictions: *const SamcalPredictions, bins: usize, out_value: *mut f64) -> SamcalStatus {
    metric(predictions, out_value, |p| metrics::ece(p, bins).map(|r| r.0))
}

/// Equal-mass binned ECE.
///
/// # Safety
/// See `samcal_ece`.
#[no_mangle]
pub unsafe extern "C" fn samcal_ada_ece(
    predictions: *const SamcalPredictions,
    bins: usize,
    out_value: *mut f64,
) -> SamcalStatus {
    metric(predictions, out_value, |p| metrics::ada_ece(p, bins).map(|r| r.0))
}

/// Classwise ECE.
///
/// # Safety
/// See `samcal_ece`.
#[no_mangle]
pub unsafe extern "C" fn samcal_classwise_ece(
    predictions: *const SamcalPredictions,
    bins: usize,
    out_value: *mut f64,
) -> SamcalStatus {
    metric(predictions, out_value, |p| metrics::classwise_ece(p, bins))
}

/// Mean negative log-likelihood.
///
/// # Safety
/// See `samcal_ece`.
#[no_mangle]
pub unsafe extern "C" fn samcal_nll(predictions: *const SamcalPredictions, out_value: *mut f64) -> SamcalStatus {
    metric(predictions, out_value, metrics::nll)
}

/// Top-1 accuracy.
///
/// # Safety
/// See `samcal_ece`.
#[no_mangle]
pub unsafe extern "C" fn samcal_accuracy(predictions: *const SamcalPredictions, out_value: *mut f64) -> SamcalStatus {
    metric(predictions, out_value, |p| Ok(metrics::accuracy(p)))
}

/// AUROC of the confidence at separating correct from wrong predictions.
///
/// # Safety
/// See `samcal_ece`.
#[no_mangle]
pub unsafe extern "C" fn samcal_auroc_misclassification(
    predictions: *const SamcalPredictions,
    out_value: *mut f64,
) -> SamcalStatus {
    metric(predictions, out_value, metrics::auroc_misclassification)
}

/// AUROC of `scores` against 0/1 `positives`; ties count one half.
///
/// # Safety
/// `scores` and `positives` must hold `n` entries; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_auroc(
    scores: *const f64,
    positives: *const u8,
    n: usize,
    out_value: *mut f64,
) -> SamcalStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let pos: Vec<bool> = slice(positives, n, "positives")?.iter().map(|&b| b != 0).collect();
        *out(out_value, "out_value")? = metrics::auroc(s, &pos)?;
        Ok(())
    })
}

/// Fits a temperature on a logit prediction set by validation NLL.
///
/// # Safety
/// See `samcal_ece`.
#[no_mangle]
pub unsafe extern "C" fn samcal_fit_temperature(
    predictions: *const SamcalPredictions,
    out_temperature: *mut f64,
) -> SamcalStatus {
    metric(predictions, out_temperature, |p| posthoc::fit_temperature(p).map(|m| m.temperature))
}

/// Binary entropy in nats.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_binary_entropy(p: f64, out_value: *mut f64) -> SamcalStatus {
    guard(|| {
        *out(out_value, "out_value")? = losses::binary_entropy(p)?;
        Ok(())
    })
}

/// Lower bound on the entropy weight for a perturbation radius and perturbed probability.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_lambda_lower_bound(rho: f64, p_tilde: f64, out_value: *mut f64) -> SamcalStatus {
    guard(|| {
        *out(out_value, "out_value")? = theory::lambda_lower_bound(rho, p_tilde)?;
        Ok(())
    })
}

/// Evaluates the single-example entropy inequality at `(p, p_tilde)`.
///
/// # Safety
/// The out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_check_theorem1(
    p: f64,
    p_tilde: f64,
    out_holds: *mut bool,
    out_slack: *mut f64,
) -> SamcalStatus {
    guard(|| {
        let r = theory::check_theorem1(&ProbePair::new(p, p_tilde)?)?;
        *out(out_holds, "out_holds")? = r.holds;
        *out(out_slack, "out_slack")? = r.slack;
        Ok(())
    })
}

/// Mean CSAM outer loss of `n x k` log-probabilities.
///
/// # Safety
/// `log_probs` must hold `n * k` doubles, `labels` `n` entries; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn samcal_csam_outer_loss(
    log_probs: *const f64,
    labels: *const usize,
    n: usize,
    k: usize,
    gamma: f64,
    out_value: *mut f64,
) -> SamcalStatus {
    guard(|| {
        let lp = matrix(slice(log_probs, checked_len(n, k)?, "log_probs")?, n, k)?;
        let y = slice(labels, n, "labels")?;
        let kind = LossKind::CsamOuter { gamma };
        kind.validate()?;
        *out(out_value, "out_value")? = losses::loss(kind, &lp, y)?.mean;
        Ok(())
    })
}
