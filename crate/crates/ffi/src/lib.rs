//! C ABI over `paws-core`.
//!
//! Configurations and trained models are opaque handles. Every fallible call
//! returns a [`PawsStatus`]; on failure [`paws_last_error`] describes what
//! went wrong on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use paws_core::checkpoint::Checkpoint;
use paws_core::config::TrainConfig;
use paws_core::encoder::{embed, EncoderParams};
use paws_core::train::{run, Experiment};
use paws_core::verification::run_suite;
use paws_core::{Matrix, PawsError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PawsStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad configuration, shapes or arguments.
    InvalidArgument = 2,
    /// Unreadable or mismatched checkpoint.
    Format = 3,
    Io = 4,
    /// Training diverged.
    Numerical = 5,
    /// Output buffer too small.
    BufferTooSmall = 6,
    Panic = 7,
    Internal = 8,
}

/// Experiment configuration.
pub struct PawsConfig {
    inner: TrainConfig,
}

/// Trained encoder.
pub struct PawsModel {
    params: EncoderParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PawsError) -> PawsStatus {
    match e {
        PawsError::Format(_) => PawsStatus::Format,
        PawsError::Io(_) => PawsStatus::Io,
        PawsError::Numerical(_) => PawsStatus::Numerical,
        e if e.is_validation() => PawsStatus::InvalidArgument,
        _ => PawsStatus::Internal,
    }
}

struct Fail(PawsStatus, String);

impl From<PawsError> for Fail {
    fn from(e: PawsError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PawsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PawsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside paws".into());
            PawsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(PawsStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(PawsStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(PawsStatus::NullPointer, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(PawsStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Message for the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn paws_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Default configuration. Free with [`paws_config_free`].
#[no_mangle]
pub extern "C" fn paws_config_new() -> *mut PawsConfig {
    Box::into_raw(Box::new(PawsConfig { inner: TrainConfig::default() }))
}

/// Reads a `key = value` configuration file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn paws_config_load(path: *const c_char, out: *mut *mut PawsConfig) -> PawsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        out_arg(out, "out")?;
        let inner = TrainConfig::load(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(PawsConfig { inner }));
        Ok(())
    })
}

/// Sets one configuration key, e.g. `("paws.T", "0.5")`.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn paws_config_set(cfg: *mut PawsConfig, key: *const c_char, value: *const c_char) -> PawsStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| Fail(PawsStatus::NullPointer, "cfg is null".into()))?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        cfg.inner.set(key, value)?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn paws_config_free(cfg: *mut PawsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains with `cfg`. When `out_dir` is non-NULL, metrics, the resolved
/// configuration and the checkpoint are written there.
///
/// # Safety
/// `cfg` must come from this library, `out_dir` must be NULL or
/// NUL-terminated, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paws_train(
    cfg: *const PawsConfig,
    out_dir: *const c_char,
    out: *mut *mut PawsModel,
) -> PawsStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        out_arg(out, "out")?;
        let dir = if out_dir.is_null() { None } else { Some(PathBuf::from(str_arg(out_dir, "out_dir")?)) };
        let exp = Experiment::prepare(cfg.inner.clone())?;
        let res = run(&exp, None, dir.as_deref())?;
        *out = Box::into_raw(Box::new(PawsModel { params: res.state.params }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn paws_model_load(path: *const c_char, out: *mut *mut PawsModel) -> PawsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        out_arg(out, "out")?;
        let ck = Checkpoint::load(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(PawsModel { params: ck.params }));
        Ok(())
    })
}

/// Writes the model's parameters as a checkpoint without optimizer state.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn paws_model_save(model: *const PawsModel, path: *const c_char) -> PawsStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        Checkpoint::new(model.params.clone()).save(&PathBuf::from(path))?;
        Ok(())
    })
}

/// Input features expected by the model, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn paws_model_input_dim(model: *const PawsModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.input_dim)
}

/// Representation width, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn paws_model_embed_dim(model: *const PawsModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.embed_dim)
}

/// Encodes `rows` row-major inputs of width `cols` into `out`, which must
/// hold `rows * embed_dim` doubles (`out_len`).
///
/// # Safety
/// `inputs` must point to `rows * cols` readable doubles and `out` to
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn paws_model_embed(
    model: *const PawsModel,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> PawsStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        if inputs.is_null() && rows * cols > 0 {
            return Err(Fail(PawsStatus::NullPointer, "inputs is null".into()));
        }
        out_arg(out, "out")?;
        let need = rows * model.params.config.embed_dim;
        if out_len < need {
            return Err(Fail(PawsStatus::BufferTooSmall, format!("out holds {out_len} values, need {need}")));
        }
        let data = if rows * cols == 0 { Vec::new() } else { std::slice::from_raw_parts(inputs, rows * cols).to_vec() };
        let x = Matrix::from_vec(rows, cols, data)?;
        let z = embed(&model.params, &x, false)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(z.data());
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn paws_model_free(model: *mut PawsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Nearest-neighbour test accuracy of `model` on the dataset described by `cfg`.
///
/// # Safety
/// Handles must come from this library and `accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paws_eval_nn(
    model: *const PawsModel,
    cfg: *const PawsConfig,
    accuracy: *mut f64,
) -> PawsStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let cfg = ref_arg(cfg, "cfg")?;
        out_arg(accuracy, "accuracy")?;
        if model.params.config.input_dim != cfg.inner.data.dim {
            return Err(Fail(
                PawsStatus::Format,
                format!("model expects {} features, dataset has {}", model.params.config.input_dim, cfg.inner.data.dim),
            ));
        }
        let exp = Experiment::prepare(cfg.inner.clone())?;
        *accuracy = exp.nn_accuracy(&model.params)?;
        Ok(())
    })
}

/// Runs the collapse checks. `*passed` is 1 when every asserted check passed, else 0.
///
/// # Safety
/// `passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn paws_verify(seed: u64, passed: *mut i32) -> PawsStatus {
    guard(|| {
        out_arg(passed, "passed")?;
        let suite = run_suite(seed)?;
        *passed = suite.all_passed() as i32;
        Ok(())
    })
}
