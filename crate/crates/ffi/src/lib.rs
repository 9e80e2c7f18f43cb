//! C interface to the membership inference laboratory.
//!
//! Objects cross the boundary as opaque handles created by `*_load`,
//! `*_from_*` or `*_run` functions and released by the matching `*_free`.
//! Every fallible function returns a [`MialabStatus`]; on failure the
//! message is available from [`mialab_last_error`] on the same thread.
//! Strings returned by the library are freed with [`mialab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use mialab::experiment::{run_experiment, ExperimentConfig, ExperimentSummary};
use mialab::metrics::evaluate;
use mialab::nn::{gradient_norm, LayerSelector, Network};
use mialab::presets::{preset, scenario_presets};
use mialab::snapshot::ModelSnapshot;
use mialab::{MiaError, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MialabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numeric = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    Degenerate = 8,
    Utf8 = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &MiaError) -> MialabStatus {
    match e {
        MiaError::Dimension(_) => MialabStatus::Dimension,
        MiaError::Numeric(_) => MialabStatus::Numeric,
        MiaError::Range(_) | MiaError::Argument(_) => MialabStatus::InvalidArgument,
        MiaError::Format { .. } | MiaError::Malformed(_) | MiaError::Json(_) | MiaError::Csv(_) => {
            MialabStatus::Format
        }
        MiaError::Config(_) => MialabStatus::Config,
        MiaError::Degenerate(_) => MialabStatus::Degenerate,
        MiaError::Io(_) => MialabStatus::Io,
        MiaError::Stage { source, .. } => status_of(source),
    }
}

/// Error raised inside the boundary layer itself.
struct Fail(MialabStatus, String);

impl From<MiaError> for Fail {
    fn from(e: MiaError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MialabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MialabStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MialabStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MialabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MialabStatus::Utf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn owned_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(MialabStatus::Utf8, "string contains NUL".into()))
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the thread.
#[no_mangle]
pub extern "C" fn mialab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn mialab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mialab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A trained target classifier.
pub struct MialabModel {
    net: Network,
}

/// Loads a model snapshot file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mialab_model_load(path: *const c_char, out: *mut *mut MialabModel) -> MialabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let net = ModelSnapshot::load(path)?.to_network()?;
        *out = Box::into_raw(Box::new(MialabModel { net }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mialab_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mialab_model_free(model: *mut MialabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width and number of classes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_model_dims(
    model: *const MialabModel,
    input_dim: *mut usize,
    num_classes: *mut usize,
) -> MialabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(input_dim, "input_dim")? = m.net.input_dim();
        *out_arg(num_classes, "num_classes")? = m.net.output_dim();
        Ok(())
    })
}

fn input(m: &MialabModel, x: &[f64]) -> Result<Tensor, Fail> {
    if x.len() != m.net.input_dim() {
        return Err(Fail(
            MialabStatus::Dimension,
            format!("input has {} values, model expects {}", x.len(), m.net.input_dim()),
        ));
    }
    Ok(Tensor::vector(x.to_vec()))
}

/// Writes the class probabilities of `x` into `probs` (`num_classes`
/// values).
///
/// # Safety
/// `x` must hold `x_len` values and `probs` `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn mialab_model_forward(
    model: *const MialabModel,
    x: *const f64,
    x_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> MialabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = input(m, slice_arg(x, x_len, "x")?)?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        if probs_len != m.net.output_dim() {
            return Err(Fail(
                MialabStatus::Dimension,
                format!("probs holds {probs_len} values, model has {} classes", m.net.output_dim()),
            ));
        }
        let trace = m.net.forward(&x, false, 0)?;
        slice::from_raw_parts_mut(probs, probs_len).copy_from_slice(trace.probs.data());
        Ok(())
    })
}

/// Cross-entropy loss of `(x, label)` and the norm of its gradient with
/// respect to the last layer's parameters.
///
/// # Safety
/// `x` must hold `x_len` values; `loss` and `grad_norm` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_model_loss_grad_norm(
    model: *const MialabModel,
    x: *const f64,
    x_len: usize,
    label: usize,
    loss: *mut f64,
    grad_norm: *mut f64,
) -> MialabStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = input(m, slice_arg(x, x_len, "x")?)?;
        let (loss_out, norm_out) = (out_arg(loss, "loss")?, out_arg(grad_norm, "grad_norm")?);
        let (trace, grads) = m.net.loss_and_backward(&x, label)?;
        *loss_out = trace.loss.unwrap_or(f64::NAN);
        *norm_out = gradient_norm(&grads, LayerSelector::Last)?;
        Ok(())
    })
}

/// Membership attack quality at one threshold.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MialabEval {
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub auc: f64,
    pub members: usize,
    pub nonmembers: usize,
}

/// Scores `>= threshold` are predicted members; `truth[i] != 0` marks a
/// member.
///
/// # Safety
/// `scores` and `truth` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_evaluate(
    scores: *const f64,
    truth: *const u8,
    n: usize,
    threshold: f64,
    out: *mut MialabEval,
) -> MialabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let scores = slice_arg(scores, n, "scores")?;
        let truth: Vec<bool> = slice_arg(truth, n, "truth")?.iter().map(|&t| t != 0).collect();
        let r = evaluate(scores, &truth, threshold)?;
        *out = MialabEval {
            accuracy: r.attack_accuracy,
            tpr: r.tpr,
            fpr: r.fpr,
            auc: r.auc,
            members: r.members,
            nonmembers: r.nonmembers,
        };
        Ok(())
    })
}

/// An experiment config ready to run.
pub struct MialabExperiment {
    cfg: ExperimentConfig,
}

/// Results of a finished experiment.
pub struct MialabSummary {
    summary: ExperimentSummary,
}

fn new_experiment(cfg: ExperimentConfig, out: &mut *mut MialabExperiment) -> Result<(), Fail> {
    cfg.validate()?;
    *out = Box::into_raw(Box::new(MialabExperiment { cfg }));
    Ok(())
}

/// Parses and validates an experiment config in JSON.
///
/// # Safety
/// `json` must be NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_experiment_from_json(
    json: *const c_char,
    out: *mut *mut MialabExperiment,
) -> MialabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg: ExperimentConfig = serde_json::from_str(str_arg(json, "json")?)
            .map_err(|e| Fail(MialabStatus::Config, e.to_string()))?;
        new_experiment(cfg, out)
    })
}

/// Copies a built-in preset.
///
/// # Safety
/// `name` must be NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_experiment_from_preset(
    name: *const c_char,
    out: *mut *mut MialabExperiment,
) -> MialabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let name = str_arg(name, "name")?;
        let cfg = preset(name).ok_or_else(|| Fail(MialabStatus::Config, format!("unknown preset `{name}`")))?;
        new_experiment(cfg, out)
    })
}

/// Number of built-in presets.
#[no_mangle]
pub extern "C" fn mialab_preset_count() -> usize {
    scenario_presets().len()
}

/// Name of preset `index`, to be freed with [`mialab_string_free`].
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_preset_name(index: usize, out: *mut *mut c_char) -> MialabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = scenario_presets()
            .into_iter()
            .nth(index)
            .ok_or_else(|| Fail(MialabStatus::InvalidArgument, format!("no preset {index}")))?;
        *out = owned_string(p.name)?;
        Ok(())
    })
}

/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mialab_experiment_set_seed(exp: *mut MialabExperiment, seed: u64) -> MialabStatus {
    guard(|| {
        exp.as_mut().ok_or_else(|| null("experiment"))?.cfg.seed = seed;
        Ok(())
    })
}

/// Sets the artifact directory; NULL disables writing artifacts.
///
/// # Safety
/// `exp` must be a live handle; `dir` NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mialab_experiment_set_output_dir(
    exp: *mut MialabExperiment,
    dir: *const c_char,
) -> MialabStatus {
    guard(|| {
        let e = exp.as_mut().ok_or_else(|| null("experiment"))?;
        e.cfg.output_dir = if dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(dir, "dir")?))
        };
        Ok(())
    })
}

/// The config as JSON, to be freed with [`mialab_string_free`].
///
/// # Safety
/// `exp` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_experiment_to_json(
    exp: *const MialabExperiment,
    out: *mut *mut c_char,
) -> MialabStatus {
    guard(|| {
        let e = exp.as_ref().ok_or_else(|| null("experiment"))?;
        let out = out_arg(out, "out")?;
        *out = owned_string(serde_json::to_string_pretty(&e.cfg).map_err(MiaError::from)?)?;
        Ok(())
    })
}

/// Runs the experiment to completion.
///
/// # Safety
/// `exp` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_experiment_run(
    exp: *const MialabExperiment,
    out: *mut *mut MialabSummary,
) -> MialabStatus {
    guard(|| {
        let e = exp.as_ref().ok_or_else(|| null("experiment"))?;
        let out = out_arg(out, "out")?;
        let summary = run_experiment(&e.cfg)?;
        *out = Box::into_raw(Box::new(MialabSummary { summary }));
        Ok(())
    })
}

/// # Safety
/// `exp` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mialab_experiment_free(exp: *mut MialabExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Number of runs (sweep variants) and attacks in run `run`.
///
/// # Safety
/// `summary` must be a live handle; outputs valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_summary_counts(
    summary: *const MialabSummary,
    run: usize,
    runs: *mut usize,
    attacks: *mut usize,
) -> MialabStatus {
    guard(|| {
        let s = &summary.as_ref().ok_or_else(|| null("summary"))?.summary;
        *out_arg(runs, "runs")? = s.runs.len();
        let r = s
            .runs
            .get(run)
            .ok_or_else(|| Fail(MialabStatus::InvalidArgument, format!("no run {run}")))?;
        *out_arg(attacks, "attacks")? = r.attacks.len();
        Ok(())
    })
}

/// Evaluation of attack `attack` in run `run`.
///
/// # Safety
/// `summary` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_summary_eval(
    summary: *const MialabSummary,
    run: usize,
    attack: usize,
    out: *mut MialabEval,
) -> MialabStatus {
    guard(|| {
        let s = &summary.as_ref().ok_or_else(|| null("summary"))?.summary;
        let out = out_arg(out, "out")?;
        let a = s
            .runs
            .get(run)
            .and_then(|r| r.attacks.get(attack))
            .ok_or_else(|| Fail(MialabStatus::InvalidArgument, format!("no attack {attack} in run {run}")))?;
        let e = &a.eval;
        *out = MialabEval {
            accuracy: e.attack_accuracy,
            tpr: e.tpr,
            fpr: e.fpr,
            auc: e.auc,
            members: e.members,
            nonmembers: e.nonmembers,
        };
        Ok(())
    })
}

/// The full summary as JSON, to be freed with [`mialab_string_free`].
///
/// # Safety
/// `summary` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mialab_summary_json(summary: *const MialabSummary, out: *mut *mut c_char) -> MialabStatus {
    guard(|| {
        let s = &summary.as_ref().ok_or_else(|| null("summary"))?.summary;
        let out = out_arg(out, "out")?;
        *out = owned_string(serde_json::to_string_pretty(s).map_err(MiaError::from)?)?;
        Ok(())
    })
}

/// # Safety
/// `summary` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mialab_summary_free(summary: *mut MialabSummary) {
    if !summary.is_null() {
        drop(Box::from_raw(summary));
    }
}
