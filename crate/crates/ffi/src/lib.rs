//! C ABI over `lfprompt`.
//!
//! Every fallible call returns an [`LfpStatus`]; on failure the message is
//! available from [`lfp_last_error`] on the same thread until the next call.
//! Handles are opaque, created by `*_new`/`*_run` functions and released
//! with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lfprompt::blackbox::{Decode, QueryMode};
use lfprompt::experiment::{self, ExperimentConfig, ExperimentReport, ResolvedTask, TaskSpec};
use lfprompt::predictive::{self, PredictiveTable};
use lfprompt::uqeval::{self, RiskFlags};
use lfprompt::{rng, Error, PosteriorEnsemble};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LfpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    InvalidInput = 4,
    Budget = 5,
    Stagnation = 6,
    Protocol = 7,
    AccessDenied = 8,
    Numerical = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
    Other = 13,
}

impl From<&Error> for LfpStatus {
    fn from(e: &Error) -> Self {
        match e.root() {
            Error::Config { .. } => LfpStatus::Config,
            Error::InvalidDimension(_) | Error::DimensionMismatch { .. } | Error::InvalidInput(_) | Error::InvalidEvaluation(_) => {
                LfpStatus::InvalidInput
            }
            Error::BudgetExhausted { .. } => LfpStatus::Budget,
            Error::Stagnation { .. } | Error::RejectionExhausted { .. } => LfpStatus::Stagnation,
            Error::Protocol(_) => LfpStatus::Protocol,
            Error::AccessDenied(_) => LfpStatus::AccessDenied,
            Error::NumericalBreakdown(_) | Error::DegenerateWeights(_) => LfpStatus::Numerical,
            Error::Io(_) => LfpStatus::Io,
            _ => LfpStatus::Other,
        }
    }
}

/// Which evaluation inputs of a task to predict on.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LfpSplit {
    Train = 0,
    Test = 1,
    NearOod = 2,
    FarOod = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LfpMetrics {
    pub accuracy: f64,
    pub ece: f64,
    pub aurrrc_entropy: f64,
    pub aurrrc_maxp: f64,
    pub lower_bound: f64,
}

/// A resolved task: simulator, projection, prior and data splits.
pub struct LfpTask(ResolvedTask);

/// A weighted posterior sample set.
pub struct LfpEnsemble(PosteriorEnsemble);

/// The outcome of one experiment run.
pub struct LfpReport {
    report: ExperimentReport,
    summary: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(LfpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(LfpStatus::from(&e), e.to_string())
    }
}

fn fail<T>(status: LfpStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, turning errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LfpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LfpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            LfpStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(LfpStatus::NullPointer, "null string argument");
    }
    CStr::from_ptr(p).to_str().or_else(|e| fail(LfpStatus::InvalidUtf8, e.to_string()))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail(LfpStatus::NullPointer, "null handle".into()))
}

unsafe fn out_slot<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail(LfpStatus::NullPointer, "null output pointer".into()))
}

unsafe fn fill(src: &[f64], out: *mut f64, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return fail(LfpStatus::NullPointer, "null output buffer");
    }
    if len < src.len() {
        return fail(LfpStatus::BufferTooSmall, format!("buffer holds {len} values, need {}", src.len()));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn lfp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn lfp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Resolves a task from its JSON description (`{"synthetic": {...}}` or
/// `{"external": {...}}`).
///
/// # Safety
/// `task_json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lfp_task_new(task_json: *const c_char, out: *mut *mut LfpTask) -> LfpStatus {
    guard(|| {
        let slot = out_slot(out)?;
        *slot = ptr::null_mut();
        let spec: TaskSpec = serde_json::from_str(text(task_json)?).or_else(|e| fail(LfpStatus::Config, e.to_string()))?;
        let task = experiment::resolve_task(&spec)?;
        *slot = Box::into_raw(Box::new(LfpTask(task)));
        Ok(())
    })
}

/// # Safety
/// `task` must be null or a handle from [`lfp_task_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lfp_task_free(task: *mut LfpTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Subspace dimension, class count and number of inputs in `split`.
///
/// # Safety
/// `task` must be a live handle; output pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn lfp_task_shape(
    task: *const LfpTask,
    split: LfpSplit,
    dim: *mut usize,
    classes: *mut usize,
    inputs: *mut usize,
) -> LfpStatus {
    guard(|| {
        let t = &handle(task)?.0;
        if let Some(d) = dim.as_mut() {
            *d = t.projection.subspace_dim();
        }
        if let Some(c) = classes.as_mut() {
            *c = t.simulator.classes();
        }
        if let Some(n) = inputs.as_mut() {
            *n = split_inputs(t, split).len();
        }
        Ok(())
    })
}

/// Labels of the train or test split, written into `out[0..n]`.
///
/// # Safety
/// `task` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lfp_task_labels(task: *const LfpTask, split: LfpSplit, out: *mut u32, len: usize) -> LfpStatus {
    guard(|| {
        let t = &handle(task)?.0;
        let labels = match split {
            LfpSplit::Train => &t.train.labels,
            LfpSplit::Test => &t.test.labels,
            _ => return fail(LfpStatus::InvalidInput, "OOD splits carry no labels"),
        };
        if out.is_null() {
            return fail(LfpStatus::NullPointer, "null output buffer");
        }
        if len < labels.len() {
            return fail(LfpStatus::BufferTooSmall, format!("buffer holds {len} labels, need {}", labels.len()));
        }
        ptr::copy_nonoverlapping(labels.as_ptr(), out, labels.len());
        Ok(())
    })
}

fn split_inputs(t: &ResolvedTask, split: LfpSplit) -> &[Vec<f64>] {
    match split {
        LfpSplit::Train => &t.train.inputs,
        LfpSplit::Test => &t.test.inputs,
        LfpSplit::NearOod => &t.near_ood,
        LfpSplit::FarOod => &t.far_ood,
    }
}

/// Runs an experiment from its JSON config; writes artifacts if the config
/// names an output directory.
///
/// # Safety
/// `config_json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lfp_experiment_run(config_json: *const c_char, out: *mut *mut LfpReport) -> LfpStatus {
    guard(|| {
        let slot = out_slot(out)?;
        *slot = ptr::null_mut();
        let cfg = ExperimentConfig::from_json(text(config_json)?)?;
        let report = experiment::run_experiment(&cfg)?;
        let summary = CString::new(report.summary_json()?).or_else(|e| fail(LfpStatus::Other, e.to_string()))?;
        *slot = Box::into_raw(Box::new(LfpReport { report, summary }));
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a handle from [`lfp_experiment_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lfp_report_free(report: *mut LfpReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Summary JSON, owned by the report.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lfp_report_summary(report: *const LfpReport) -> *const c_char {
    report.as_ref().map_or(ptr::null(), |r| r.summary.as_ptr())
}

/// Test-split metrics of the run.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lfp_report_metrics(report: *const LfpReport, out: *mut LfpMetrics) -> LfpStatus {
    guard(|| {
        let m = &handle(report)?.report.test_metrics;
        *out_slot(out)? = LfpMetrics {
            accuracy: m.accuracy,
            ece: m.ece,
            aurrrc_entropy: m.aurrrc_entropy,
            aurrrc_maxp: m.aurrrc_maxp,
            lower_bound: m.lower_bound,
        };
        Ok(())
    })
}

/// Writes the report's artifacts into directory `dir`.
///
/// # Safety
/// `report` must be a live handle and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lfp_report_write(report: *const LfpReport, dir: *const c_char) -> LfpStatus {
    guard(|| Ok(handle(report)?.report.write(Path::new(text(dir)?))?))
}

/// Copies the report's posterior into a new ensemble handle.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lfp_report_ensemble(report: *const LfpReport, out: *mut *mut LfpEnsemble) -> LfpStatus {
    guard(|| {
        let slot = out_slot(out)?;
        *slot = Box::into_raw(Box::new(LfpEnsemble(handle(report)?.report.ensemble.clone())));
        Ok(())
    })
}

/// # Safety
/// `ensemble` must be null or a live ensemble handle.
#[no_mangle]
pub unsafe extern "C" fn lfp_ensemble_free(ensemble: *mut LfpEnsemble) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Sample count and per-sample dimension.
///
/// # Safety
/// `ensemble` must be a live handle; output pointers may be null to skip.
#[no_mangle]
pub unsafe extern "C" fn lfp_ensemble_shape(ensemble: *const LfpEnsemble, len: *mut usize, dim: *mut usize) -> LfpStatus {
    guard(|| {
        let e = &handle(ensemble)?.0;
        if let Some(l) = len.as_mut() {
            *l = e.len();
        }
        if let Some(d) = dim.as_mut() {
            *d = e.dim();
        }
        Ok(())
    })
}

/// Copies sample `index` into `out[0..dim]`.
///
/// # Safety
/// `ensemble` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lfp_ensemble_sample(ensemble: *const LfpEnsemble, index: usize, out: *mut f64, len: usize) -> LfpStatus {
    guard(|| {
        let e = &handle(ensemble)?.0;
        let z = e
            .samples
            .get(index)
            .ok_or_else(|| Fail(LfpStatus::InvalidInput, format!("sample {index} of {}", e.len())))?;
        fill(z, out, len)
    })
}

/// Copies the normalized weights into `out[0..len(ensemble)]`.
///
/// # Safety
/// `ensemble` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lfp_ensemble_weights(ensemble: *const LfpEnsemble, out: *mut f64, len: usize) -> LfpStatus {
    guard(|| fill(&handle(ensemble)?.0.weights, out, len))
}

/// Posterior predictive distribution on `split`, row-major `inputs × classes`.
/// `labels_only` selects the argmax-decoded label average (required for
/// tasks served without logits); `seed` seeds the query stream.
///
/// # Safety
/// Handles must be live and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lfp_predict(
    task: *const LfpTask,
    ensemble: *const LfpEnsemble,
    split: LfpSplit,
    labels_only: bool,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> LfpStatus {
    guard(|| {
        let t = &handle(task)?.0;
        let e = &handle(ensemble)?.0;
        let inputs = split_inputs(t, split);
        let table = if labels_only {
            let sim = t.simulator.labels_only();
            predictive::predictive_from_labels(e, &sim, &t.projection, inputs, Decode::Argmax, &mut rng::seeded(seed))?
        } else {
            predictive::predictive_from_logits(e, &t.simulator, &t.projection, inputs)?
        };
        let flat: Vec<f64> = table.rows.into_iter().flatten().collect();
        fill(&flat, out, len)
    })
}

/// Accuracy, ECE, AURRRC under both scores and the oracle bound for a
/// row-major `rows × classes` predictive table.
///
/// # Safety
/// `probs` must hold `rows * classes` values, `labels` `rows` values.
#[no_mangle]
pub unsafe extern "C" fn lfp_metrics(
    probs: *const f64,
    rows: usize,
    classes: usize,
    labels: *const u32,
    out: *mut LfpMetrics,
) -> LfpStatus {
    guard(|| {
        if probs.is_null() || labels.is_null() {
            return fail(LfpStatus::NullPointer, "null input buffer");
        }
        if classes == 0 {
            return fail(LfpStatus::InvalidInput, "zero classes");
        }
        let flat = std::slice::from_raw_parts(probs, rows * classes);
        let table = PredictiveTable::new(flat.chunks(classes).map(<[f64]>::to_vec).collect(), QueryMode::Logits, 0)?;
        let m = uqeval::summarize(&table, std::slice::from_raw_parts(labels, rows))?;
        *out_slot(out)? = LfpMetrics {
            accuracy: m.accuracy,
            ece: m.ece,
            aurrrc_entropy: m.aurrrc_entropy,
            aurrrc_maxp: m.aurrrc_maxp,
            lower_bound: m.lower_bound,
        };
        Ok(())
    })
}

/// Oracle AURRRC lower bound for `n` flags (nonzero = bad prediction).
///
/// # Safety
/// `flags` must hold `n` bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lfp_oracle_lower_bound(flags: *const u8, n: usize, out: *mut f64) -> LfpStatus {
    guard(|| {
        if flags.is_null() {
            return fail(LfpStatus::NullPointer, "null flags");
        }
        let bits = std::slice::from_raw_parts(flags, n).iter().map(|&b| b != 0).collect();
        *out_slot(out)? = uqeval::oracle_lower_bound(&RiskFlags::new(bits)?);
        Ok(())
    })
}
