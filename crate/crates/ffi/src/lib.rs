//! C ABI for ctckit.
//!
//! Every entry point returns a [`CtcStatus`]. On failure a description of
//! the error is available from [`ctc_last_error_message`] on the same thread.
//! Posterior and logit buffers are row-major `frames x classes` with the
//! blank as the last class. Label buffers hold `int64_t` class indices.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use ctckit::decode::{beam_search_decode, best_path_decode, prefix_search_decode, DecodeResult};
use ctckit::lattice::{ctc_gradient as core_gradient, ctc_loss as core_loss, LabelSequence, PosteriorMatrix};
use ctckit::matrix::Matrix;
use ctckit::metrics::edit_distance;
use ctckit::model::CtcModel;
use ctckit::{Error, LoadError};

/// Result codes shared by all entry points.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtcStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    InfeasibleAlignment = 3,
    Numeric = 4,
    Shape = 5,
    Load = 6,
    Io = 7,
    Parse = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque handle to a trained or loaded model.
pub struct CtcModelHandle {
    model: CtcModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure {
    status: CtcStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let status = match err.root() {
            Error::Domain(_) => CtcStatus::Domain,
            Error::InfeasibleAlignment { .. } => CtcStatus::InfeasibleAlignment,
            Error::BudgetExceeded { .. } | Error::NonFiniteGradient { .. } => CtcStatus::Numeric,
            Error::Shape(_) => CtcStatus::Shape,
            Error::Load(_) => CtcStatus::Load,
            Error::Io { .. } => CtcStatus::Io,
            Error::Parse { .. } => CtcStatus::Parse,
            Error::AtSequence { .. } | Error::AtBatch { .. } => CtcStatus::Domain,
        };
        Failure {
            status,
            message: err.to_string(),
        }
    }
}

impl From<LoadError> for Failure {
    fn from(err: LoadError) -> Self {
        Error::from(err).into()
    }
}

fn fail(status: CtcStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

fn null(what: &str) -> Failure {
    fail(CtcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CtcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CtcStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("internal panic");
            CtcStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn write_out<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

unsafe fn matrix(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Failure> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| fail(CtcStatus::Domain, format!("{what} is too large")))?;
    let data = input(ptr, len, what)?.to_vec();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

unsafe fn posteriors(ptr: *const f64, frames: usize, classes: usize) -> Result<PosteriorMatrix, Failure> {
    Ok(PosteriorMatrix::new(matrix(ptr, frames, classes, "probs")?)?)
}

unsafe fn label_seq(ptr: *const i64, len: usize) -> Result<LabelSequence, Failure> {
    let raw = input(ptr, len, "labels")?;
    let converted: Option<Vec<usize>> = raw.iter().map(|&l| usize::try_from(l).ok()).collect();
    converted
        .map(LabelSequence)
        .ok_or_else(|| fail(CtcStatus::Domain, "negative label inside the label length"))
}

unsafe fn path(ptr: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(CtcStatus::Domain, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_best(
    result: &DecodeResult,
    out_labels: *mut i64,
    capacity: usize,
    out_len: *mut usize,
    out_score: *mut f64,
) -> Result<(), Failure> {
    let best = result.best();
    let n = best.labels.len();
    write_out(out_len, n, "out_len")?;
    if !out_score.is_null() {
        out_score.write(best.score);
    }
    if n > capacity {
        return Err(fail(
            CtcStatus::BufferTooSmall,
            format!("decoded {n} labels, buffer holds {capacity}"),
        ));
    }
    let out = output(out_labels, n, "out_labels")?;
    for (o, &l) in out.iter_mut().zip(best.labels.as_slice()) {
        *o = l as i64;
    }
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ctc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Negative log-likelihood of `labels` given posteriors over the first
/// `input_len` frames.
///
/// # Safety
/// `probs` must point to `frames * classes` doubles and `labels` to
/// `label_len` integers; `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctc_loss(
    probs: *const f64,
    frames: usize,
    classes: usize,
    labels: *const i64,
    label_len: usize,
    input_len: usize,
    out_loss: *mut f64,
) -> CtcStatus {
    guard(|| {
        let p = posteriors(probs, frames, classes)?;
        let l = label_seq(labels, label_len)?;
        let loss = core_loss(&p, &l, input_len, label_len)?;
        write_out(out_loss, loss, "out_loss")
    })
}

/// Loss and its gradient with respect to pre-softmax activations.
///
/// # Safety
/// `logits` and `out_grad` must each hold `frames * classes` doubles;
/// `labels` must hold `label_len` integers.
#[no_mangle]
pub unsafe extern "C" fn ctc_gradient(
    logits: *const f64,
    frames: usize,
    classes: usize,
    labels: *const i64,
    label_len: usize,
    input_len: usize,
    out_loss: *mut f64,
    out_grad: *mut f64,
) -> CtcStatus {
    guard(|| {
        let z = matrix(logits, frames, classes, "logits")?;
        let l = label_seq(labels, label_len)?;
        let (loss, grad) = core_gradient(&z, &l, input_len, label_len)?;
        output(out_grad, frames * classes, "out_grad")?.copy_from_slice(grad.as_slice());
        write_out(out_loss, loss, "out_loss")
    })
}

/// Levenshtein distance between two label sequences.
///
/// # Safety
/// `a` and `b` must hold `a_len` and `b_len` integers.
#[no_mangle]
pub unsafe extern "C" fn ctc_edit_distance(
    a: *const i64,
    a_len: usize,
    b: *const i64,
    b_len: usize,
    out_distance: *mut usize,
) -> CtcStatus {
    guard(|| {
        let a = input(a, a_len, "a")?;
        let b = input(b, b_len, "b")?;
        let d = if a.iter().chain(b).all(|&x| x >= 0) {
            let ua: Vec<usize> = a.iter().map(|&x| x as usize).collect();
            let ub: Vec<usize> = b.iter().map(|&x| x as usize).collect();
            edit_distance(&ua, &ub)
        } else {
            return Err(fail(CtcStatus::Domain, "labels must be non-negative"));
        };
        write_out(out_distance, d, "out_distance")
    })
}

/// Greedy decoding. `out_len` receives the decoded length even when the
/// buffer is too small; `out_score` may be null.
///
/// # Safety
/// `probs` must hold `frames * classes` doubles and `out_labels` `capacity`
/// integers.
#[no_mangle]
pub unsafe extern "C" fn ctc_best_path_decode(
    probs: *const f64,
    frames: usize,
    classes: usize,
    input_len: usize,
    out_labels: *mut i64,
    capacity: usize,
    out_len: *mut usize,
    out_score: *mut f64,
) -> CtcStatus {
    guard(|| {
        let p = posteriors(probs, frames, classes)?;
        let r = best_path_decode(&p, input_len)?;
        write_best(&r, out_labels, capacity, out_len, out_score)
    })
}

/// Top-1 prefix beam search.
///
/// # Safety
/// As for [`ctc_best_path_decode`].
#[no_mangle]
pub unsafe extern "C" fn ctc_beam_search_decode(
    probs: *const f64,
    frames: usize,
    classes: usize,
    input_len: usize,
    beam_width: usize,
    out_labels: *mut i64,
    capacity: usize,
    out_len: *mut usize,
    out_score: *mut f64,
) -> CtcStatus {
    guard(|| {
        let p = posteriors(probs, frames, classes)?;
        let r = beam_search_decode(&p, input_len, beam_width, 1)?;
        write_best(&r, out_labels, capacity, out_len, out_score)
    })
}

/// Segmented best-first search. `out_approximate` (may be null) is set to 1
/// when a segment exhausted `node_budget` and fell back to beam search.
///
/// # Safety
/// As for [`ctc_best_path_decode`].
#[no_mangle]
pub unsafe extern "C" fn ctc_prefix_search_decode(
    probs: *const f64,
    frames: usize,
    classes: usize,
    input_len: usize,
    blank_threshold: f64,
    node_budget: usize,
    out_labels: *mut i64,
    capacity: usize,
    out_len: *mut usize,
    out_score: *mut f64,
    out_approximate: *mut u8,
) -> CtcStatus {
    guard(|| {
        let p = posteriors(probs, frames, classes)?;
        let r = prefix_search_decode(&p, input_len, blank_threshold, node_budget)?;
        if !out_approximate.is_null() {
            out_approximate.write(u8::from(r.approximate));
        }
        write_best(&r, out_labels, capacity, out_len, out_score)
    })
}

/// Loads a model directory written by `save_model`. Free the handle with
/// [`ctc_model_free`].
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctc_model_load(dir: *const c_char, out_model: *mut *mut CtcModelHandle) -> CtcStatus {
    guard(|| {
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        out_model.write(ptr::null_mut());
        let model = CtcModel::load_model(path(dir, "dir")?, None)?;
        out_model.write(Box::into_raw(Box::new(CtcModelHandle { model })));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ctc_model_load`] and not be used afterwards.
/// Null is accepted.
#[no_mangle]
pub unsafe extern "C" fn ctc_model_free(model: *mut CtcModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn handle<'a>(model: *const CtcModelHandle) -> Result<&'a CtcModel, Failure> {
    model.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

/// # Safety
/// `model` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ctc_model_save(model: *const CtcModelHandle, dir: *const c_char) -> CtcStatus {
    guard(|| Ok(handle(model)?.save_model(path(dir, "dir")?)?))
}

/// Feature dimension and class count (labels plus blank) of a model.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ctc_model_dims(
    model: *const CtcModelHandle,
    out_feature_dim: *mut usize,
    out_num_classes: *mut usize,
) -> CtcStatus {
    guard(|| {
        let spec = handle(model)?.spec();
        write_out(out_feature_dim, spec.feature_dim, "out_feature_dim")?;
        write_out(out_num_classes, spec.num_classes(), "out_num_classes")
    })
}

struct OneSequence {
    features: Matrix,
    input_len: usize,
}

impl ctckit::data::Observations for OneSequence {
    fn len(&self) -> usize {
        1
    }

    fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    fn features(&self, _: usize) -> std::borrow::Cow<'_, Matrix> {
        std::borrow::Cow::Borrowed(&self.features)
    }

    fn input_len(&self, _: usize) -> usize {
        self.input_len
    }
}

unsafe fn one_sequence(
    features: *const f64,
    frames: usize,
    feature_dim: usize,
    input_len: usize,
) -> Result<OneSequence, Failure> {
    Ok(OneSequence {
        features: matrix(features, frames, feature_dim, "features")?,
        input_len,
    })
}

/// Posteriors for one sequence, written as `input_len x num_classes`.
///
/// # Safety
/// `features` must hold `frames * feature_dim` doubles and `out_probs`
/// `input_len * num_classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn ctc_model_probas(
    model: *const CtcModelHandle,
    features: *const f64,
    frames: usize,
    feature_dim: usize,
    input_len: usize,
    out_probs: *mut f64,
) -> CtcStatus {
    guard(|| {
        let model = handle(model)?;
        let seq = one_sequence(features, frames, feature_dim, input_len)?;
        let probs = model.get_probas(&seq)?.remove(0);
        let data = probs.matrix().as_slice();
        output(out_probs, data.len(), "out_probs")?.copy_from_slice(data);
        Ok(())
    })
}

/// Decodes one sequence with the model's stored decode settings (top-1).
///
/// # Safety
/// `features` must hold `frames * feature_dim` doubles and `out_labels`
/// `capacity` integers.
#[no_mangle]
pub unsafe extern "C" fn ctc_model_predict(
    model: *const CtcModelHandle,
    features: *const f64,
    frames: usize,
    feature_dim: usize,
    input_len: usize,
    out_labels: *mut i64,
    capacity: usize,
    out_len: *mut usize,
    out_score: *mut f64,
) -> CtcStatus {
    guard(|| {
        let model = handle(model)?;
        let seq = one_sequence(features, frames, feature_dim, input_len)?;
        let result = model.predict(&seq)?.remove(0);
        write_best(&result, out_labels, capacity, out_len, out_score)
    })
}
