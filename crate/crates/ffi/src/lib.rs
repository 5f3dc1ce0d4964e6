//! C ABI over `influence-core`.
//!
//! Every object crosses the boundary as an opaque handle returned through an
//! out-pointer (`infl_dataset_load_iris`, `infl_model_train`, `infl_rank`,
//! ...) and released with the matching `infl_*_free`. Functions return an [`InflStatus`]; on failure the
//! message is kept per thread and read with [`infl_last_error_message`].
//! Panics never unwind into C: they are caught and reported as
//! `INFL_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use influence_core::data::{self, Dataset};
use influence_core::ihvp::{IhvpConfig, SolverKind};
use influence_core::influence::{self, InfluenceReport};
use influence_core::nn::{self, Activation, Example, ModelSpec};
use influence_core::runner::{self, RunOptions};
use influence_core::training::{self, TrainConfig, TrainedModel};
use influence_core::InfluenceError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidConfig = 3,
    Numerical = 4,
    Io = 5,
    CacheCorruption = 6,
    OutOfRange = 7,
    Panic = 8,
}

pub const INFL_ACTIVATION_TANH: u32 = 0;
pub const INFL_ACTIVATION_RELU: u32 = 1;

pub const INFL_SOLVER_EXACT: u32 = 0;
pub const INFL_SOLVER_CG: u32 = 1;
pub const INFL_SOLVER_LISSA: u32 = 2;

/// A labelled dataset.
pub struct InflDataset(Dataset);

/// A trained model together with the fingerprint of its training set.
pub struct InflModel(TrainedModel);

/// Influence scores of every training point for one test point.
pub struct InflReport(InfluenceReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &InfluenceError) -> InflStatus {
    match err.root() {
        InfluenceError::InvalidConfig(_) => InflStatus::InvalidConfig,
        InfluenceError::CacheCorruption { .. } => InflStatus::CacheCorruption,
        InfluenceError::Io { .. }
        | InfluenceError::BadMagic { .. }
        | InfluenceError::TruncatedIdx { .. }
        | InfluenceError::IdxCountMismatch { .. } => InflStatus::Io,
        e if e.is_numerical() => InflStatus::Numerical,
        _ => InflStatus::InvalidInput,
    }
}

struct Failure(InflStatus, String);

impl From<InfluenceError> for Failure {
    fn from(e: InfluenceError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(InflStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> InflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => InflStatus::Ok,
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
            InflStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(InflStatus::InvalidInput, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn activation(code: u32) -> Result<Activation, Failure> {
    match code {
        INFL_ACTIVATION_TANH => Ok(Activation::Tanh),
        INFL_ACTIVATION_RELU => Ok(Activation::Relu),
        other => Err(Failure(InflStatus::InvalidInput, format!("unknown activation code {other}"))),
    }
}

fn solver(code: u32) -> Result<SolverKind, Failure> {
    match code {
        INFL_SOLVER_EXACT => Ok(SolverKind::Exact),
        INFL_SOLVER_CG => Ok(SolverKind::Cg),
        INFL_SOLVER_LISSA => Ok(SolverKind::Lissa),
        other => Err(Failure(InflStatus::InvalidInput, format!("unknown solver code {other}"))),
    }
}

/// Message of the last failed call on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn infl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn infl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The embedded 150-example Iris table.
#[no_mangle]
pub unsafe extern "C" fn infl_dataset_load_iris(out_dataset: *mut *mut InflDataset) -> InflStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        *slot = boxed(InflDataset(data::load_iris()));
        Ok(())
    })
}

/// Builds a dataset from a row-major `n x dim` feature matrix and `n` labels.
#[no_mangle]
pub unsafe extern "C" fn infl_dataset_from_arrays(
    features: *const f64,
    labels: *const u32,
    n: usize,
    dim: usize,
    num_classes: usize,
    out_dataset: *mut *mut InflDataset,
) -> InflStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        if n == 0 || dim == 0 {
            return Err(Failure(InflStatus::InvalidInput, "n and dim must be positive".into()));
        }
        if features.is_null() {
            return Err(null("features"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| Failure(InflStatus::InvalidInput, "n * dim overflows".into()))?;
        let x = std::slice::from_raw_parts(features, len);
        let y = std::slice::from_raw_parts(labels, n);
        let examples = x
            .chunks_exact(dim)
            .zip(y)
            .map(|(row, &label)| Example {
                features: row.to_vec(),
                label: label as usize,
            })
            .collect();
        *slot = boxed(InflDataset(Dataset::new("ffi", num_classes, dim, examples)?));
        Ok(())
    })
}

/// Seeded train/test split. With `normalize` set, both halves are
/// standardized with the training half's statistics.
#[no_mangle]
pub unsafe extern "C" fn infl_dataset_split(
    dataset: *const InflDataset,
    test_fraction: f64,
    seed: u64,
    stratified: bool,
    normalize: bool,
    out_train: *mut *mut InflDataset,
    out_test: *mut *mut InflDataset,
) -> InflStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        let train_slot = out(out_train, "out_train")?;
        let test_slot = out(out_test, "out_test")?;
        let s = data::split(&ds.0, test_fraction, seed, stratified)?;
        let (train, test) = if normalize {
            let (a, b, _) = data::normalize(&s.train, &s.test)?;
            (a, b)
        } else {
            (s.train, s.test)
        };
        *train_slot = boxed(InflDataset(train));
        *test_slot = boxed(InflDataset(test));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn infl_dataset_len(dataset: *const InflDataset, out_len: *mut usize) -> InflStatus {
    guard(|| {
        let ds = deref(dataset, "dataset")?;
        *out(out_len, "out_len")? = ds.0.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn infl_dataset_free(dataset: *mut InflDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Full-batch gradient descent on `train`. `depth` hidden layers of `width`
/// units; depth 0 is multinomial logistic regression.
#[no_mangle]
pub unsafe extern "C" fn infl_model_train(
    train: *const InflDataset,
    depth: usize,
    width: usize,
    activation_code: u32,
    learning_rate: f64,
    steps: usize,
    weight_decay: f64,
    seed: u64,
    out_model: *mut *mut InflModel,
) -> InflStatus {
    guard(|| {
        let ds = deref(train, "train")?;
        let slot = out(out_model, "out_model")?;
        let spec = ModelSpec::uniform(ds.0.feature_dim, depth, width, ds.0.num_classes, activation(activation_code)?)?;
        let cfg = TrainConfig {
            learning_rate,
            steps,
            weight_decay,
            seed,
            record_grad_norm_every: 0,
        };
        *slot = boxed(InflModel(training::train(&spec, &ds.0, &cfg)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn infl_model_num_params(model: *const InflModel, out_count: *mut usize) -> InflStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *out(out_count, "out_count")? = m.0.theta_star.len();
        Ok(())
    })
}

/// Copies the trained parameters into `buf`, which must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn infl_model_params(model: *const InflModel, buf: *mut f64, len: usize) -> InflStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let p = m.0.theta_star.len();
        if len < p {
            return Err(Failure(InflStatus::OutOfRange, format!("buffer holds {len} values, model has {p}")));
        }
        std::slice::from_raw_parts_mut(buf, p).copy_from_slice(&m.0.theta_star);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn infl_model_final_grad_norm(model: *const InflModel, out_norm: *mut f64) -> InflStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *out(out_norm, "out_norm")? = m.0.final_grad_norm;
        Ok(())
    })
}

/// Per-example loss of example `index` of `dataset` under `model`.
#[no_mangle]
pub unsafe extern "C" fn infl_model_example_loss(
    model: *const InflModel,
    dataset: *const InflDataset,
    index: usize,
    out_loss: *mut f64,
) -> InflStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let ds = deref(dataset, "dataset")?;
        let slot = out(out_loss, "out_loss")?;
        let z = example_at(&ds.0, index)?;
        *slot = nn::example_loss(&m.0.spec, &m.0.theta_star, z)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn infl_model_free(model: *mut InflModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn example_at(ds: &Dataset, index: usize) -> Result<&Example, Failure> {
    ds.examples.get(index).ok_or_else(|| {
        Failure(
            InflStatus::OutOfRange,
            format!("index {index} out of range for {} examples", ds.len()),
        )
    })
}

/// Scores every training point of `train` against example `test_index` of
/// `test`. `damping` is added to the Hessian before solving.
#[no_mangle]
pub unsafe extern "C" fn infl_rank(
    model: *const InflModel,
    train: *const InflDataset,
    test: *const InflDataset,
    test_index: usize,
    solver_code: u32,
    damping: f64,
    out_report: *mut *mut InflReport,
) -> InflStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let tr = deref(train, "train")?;
        let te = deref(test, "test")?;
        let slot = out(out_report, "out_report")?;
        let z = example_at(&te.0, test_index)?;
        let cfg = IhvpConfig {
            damping,
            ..IhvpConfig::with_solver(solver(solver_code)?)
        };
        *slot = boxed(InflReport(influence::rank_training_points(&m.0, &tr.0, z, test_index, &cfg)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn infl_report_len(report: *const InflReport, out_len: *mut usize) -> InflStatus {
    guard(|| {
        let r = deref(report, "report")?;
        *out(out_len, "out_len")? = r.0.n();
        Ok(())
    })
}

/// Training index at 0-based ranking position `position` (most positive
/// influence first) and its pair influence.
#[no_mangle]
pub unsafe extern "C" fn infl_report_ranked(
    report: *const InflReport,
    position: usize,
    out_train_index: *mut usize,
    out_influence: *mut f64,
) -> InflStatus {
    guard(|| {
        let r = deref(report, "report")?;
        let idx_slot = out(out_train_index, "out_train_index")?;
        let inf_slot = out(out_influence, "out_influence")?;
        let &i = r.0.ranking.get(position).ok_or_else(|| {
            Failure(InflStatus::OutOfRange, format!("position {position} out of range for {} scores", r.0.n()))
        })?;
        *idx_slot = i;
        *inf_slot = r.0.scores[i].pair_influence;
        Ok(())
    })
}

/// Pair influence and predicted loss change on removal for training point
/// `train_index`.
#[no_mangle]
pub unsafe extern "C" fn infl_report_score(
    report: *const InflReport,
    train_index: usize,
    out_influence: *mut f64,
    out_predicted_delta_loss: *mut f64,
) -> InflStatus {
    guard(|| {
        let r = deref(report, "report")?;
        let inf_slot = out(out_influence, "out_influence")?;
        let delta_slot = out(out_predicted_delta_loss, "out_predicted_delta_loss")?;
        let s = r.0.scores.get(train_index).ok_or_else(|| {
            Failure(InflStatus::OutOfRange, format!("train index {train_index} out of range for {} scores", r.0.n()))
        })?;
        *inf_slot = s.pair_influence;
        *delta_slot = s.predicted_delta_loss;
        Ok(())
    })
}

/// Serializes the report as JSON. Release the string with [`infl_string_free`].
#[no_mangle]
pub unsafe extern "C" fn infl_report_to_json(report: *const InflReport, out_json: *mut *mut c_char) -> InflStatus {
    guard(|| {
        let r = deref(report, "report")?;
        let slot = out(out_json, "out_json")?;
        *slot = CString::new(r.0.to_json()?).expect("JSON has no NULs").into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn infl_report_free(report: *mut InflReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

#[no_mangle]
pub unsafe extern "C" fn infl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs an experiment config end to end and writes its reports.
/// `cache_dir` may be NULL (no caching); `out_failed_points` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn infl_run_experiment(
    config_path: *const c_char,
    cache_dir: *const c_char,
    workers: usize,
    out_failed_points: *mut usize,
) -> InflStatus {
    guard(|| {
        let config = path_arg(config_path, "config_path")?;
        let cache_dir = if cache_dir.is_null() {
            None
        } else {
            Some(path_arg(cache_dir, "cache_dir")?)
        };
        let options = RunOptions {
            cache_dir,
            workers,
            ..RunOptions::default()
        };
        let (_, summary) = runner::run(config, &options)?;
        if let Some(slot) = out_failed_points.as_mut() {
            *slot = summary.failed_points;
        }
        Ok(())
    })
}
