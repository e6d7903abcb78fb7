//! C ABI over the lmlab core. Worlds and models are opaque handles created
//! and destroyed here; every call returns an [`LmlabStatus`] and reports
//! detail through `lmlab_last_error`. Strings returned through out-params
//! are owned by the library and must be released with `lmlab_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lmlab::config::ExperimentConfig;
use lmlab::experiment::{self, ModelDoc, WorldDoc};
use lmlab::softmax::{xent_loss, ModelRef, SoftmaxModel};
use lmlab::world::GroundTruth;

/// Status codes returned by every lmlab call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmlabStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments failed validation (dimensions, ranges, UTF-8).
    InvalidArgument = 2,
    /// JSON parsing or schema validation failed.
    ParseError = 3,
    /// A numerical routine reported an error.
    NumericError = 4,
    /// Filesystem I/O failed.
    IoError = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &lmlab::Error) -> LmlabStatus {
    use lmlab::Error::*;
    match err {
        Json(_) | Config { .. } => LmlabStatus::ParseError,
        Io(_) => LmlabStatus::IoError,
        DimMismatch(_) | NotStochastic(_) => LmlabStatus::InvalidArgument,
        _ => LmlabStatus::NumericError,
    }
}

/// World handle: a fully known context distribution plus conditional table.
pub struct LmlabWorld(GroundTruth);

/// Model handle: word embeddings and per-context features.
pub struct LmlabModel(SoftmaxModel);

fn guard(f: impl FnOnce() -> LmlabStatus) -> LmlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&msg);
            LmlabStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, LmlabStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(LmlabStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        LmlabStatus::InvalidArgument
    })
}

fn write_string(out: *mut *mut c_char, text: String) -> LmlabStatus {
    match CString::new(text) {
        Ok(s) => {
            unsafe { *out = s.into_raw() };
            LmlabStatus::Ok
        }
        Err(_) => {
            set_error("output contained an interior NUL byte");
            LmlabStatus::InvalidArgument
        }
    }
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing lmlab call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn lmlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must come from an lmlab out-parameter and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lmlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Synthesize a world from an experiment config document.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_world_synth(
    config_json: *const c_char,
    out: *mut *mut LmlabWorld,
) -> LmlabStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return LmlabStatus::NullPointer;
        }
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match lmlab::world::make_ground_truth(&cfg.world, cfg.seed) {
            Ok(gt) => {
                *out = Box::into_raw(Box::new(LmlabWorld(gt)));
                LmlabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Parse a world from its JSON document (the `world.json` schema).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_world_from_json(json: *const c_char, out: *mut *mut LmlabWorld) -> LmlabStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return LmlabStatus::NullPointer;
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let doc: WorldDoc = match serde_json_from(text) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match doc.to_ground_truth() {
            Ok(gt) => {
                *out = Box::into_raw(Box::new(LmlabWorld(gt)));
                LmlabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

fn serde_json_from<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, LmlabStatus> {
    serde_json::from_str(text).map_err(|e| {
        set_error(&e.to_string());
        LmlabStatus::ParseError
    })
}

/// Serialize a world to its JSON document.
///
/// # Safety
/// `world` must be a live world handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_world_to_json(world: *const LmlabWorld, out: *mut *mut c_char) -> LmlabStatus {
    guard(|| {
        if world.is_null() || out.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        let doc = WorldDoc::new(&(*world).0, None);
        match serde_json::to_string(&doc) {
            Ok(text) => write_string(out, text),
            Err(e) => {
                set_error(&e.to_string());
                LmlabStatus::ParseError
            }
        }
    })
}

/// # Safety
/// `world` must be a live world handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lmlab_world_free(world: *mut LmlabWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Vocabulary size of a world.
///
/// # Safety
/// `world` must be a live world handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_world_vocab(world: *const LmlabWorld, out: *mut usize) -> LmlabStatus {
    guard(|| {
        if world.is_null() || out.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        *out = (*world).0.vocab();
        LmlabStatus::Ok
    })
}

/// Context count of a world.
///
/// # Safety
/// `world` must be a live world handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_world_contexts(world: *const LmlabWorld, out: *mut usize) -> LmlabStatus {
    guard(|| {
        if world.is_null() || out.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        *out = (*world).0.contexts();
        LmlabStatus::Ok
    })
}

/// Minimum achievable cross-entropy of the world (the expected entropy of
/// its conditionals), in nats.
///
/// # Safety
/// `world` must be a live world handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_optimal_xent(world: *const LmlabWorld, out: *mut f64) -> LmlabStatus {
    guard(|| {
        if world.is_null() || out.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        *out = lmlab::softmax::optimal_xent(&(*world).0);
        LmlabStatus::Ok
    })
}

/// Train the reference model described by the config on this world.
///
/// # Safety
/// `world` must be a live world handle, `config_json` a NUL-terminated
/// string, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_train(
    world: *const LmlabWorld,
    config_json: *const c_char,
    out: *mut *mut LmlabModel,
) -> LmlabStatus {
    guard(|| {
        if world.is_null() || out.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match experiment::train_reference_model(&cfg, &(*world).0) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(LmlabModel(model)));
                LmlabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Serialize a model to its JSON document.
///
/// # Safety
/// `model` must be a live model handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_model_to_json(model: *const LmlabModel, out: *mut *mut c_char) -> LmlabStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        match serde_json::to_string(&ModelDoc::new(&(*model).0)) {
            Ok(text) => write_string(out, text),
            Err(e) => {
                set_error(&e.to_string());
                LmlabStatus::ParseError
            }
        }
    })
}

/// Parse a model from its JSON document (the `model.json` schema).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_model_from_json(json: *const c_char, out: *mut *mut LmlabModel) -> LmlabStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return LmlabStatus::NullPointer;
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let doc: ModelDoc = match serde_json_from(text) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match doc.to_model() {
            Ok(m) => {
                *out = Box::into_raw(Box::new(LmlabModel(m)));
                LmlabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// # Safety
/// `model` must be a live model handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lmlab_model_free(model: *mut LmlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Exact cross-entropy of a model on a world, in nats.
///
/// # Safety
/// `world` and `model` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_xent_loss(
    world: *const LmlabWorld,
    model: *const LmlabModel,
    out: *mut f64,
) -> LmlabStatus {
    guard(|| {
        if world.is_null() || model.is_null() || out.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        let gt = &(*world).0;
        let m = &(*model).0;
        if m.vocab() != gt.vocab() || m.contexts() != gt.contexts() {
            set_error("model dimensions do not match the world");
            return LmlabStatus::InvalidArgument;
        }
        *out = xent_loss(gt, ModelRef::Softmax(m));
        LmlabStatus::Ok
    })
}

/// Optimal Quad objective value at embedding dimension d: minus half the
/// sum of the top-d eigenvalues of the substitutability matrix.
///
/// # Safety
/// `world` must be a live world handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_quad_optimum(world: *const LmlabWorld, d: usize, out: *mut f64) -> LmlabStatus {
    guard(|| {
        if world.is_null() || out.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        match lmlab::quad::quad_closed_form(&(*world).0, d) {
            Ok(opt) => {
                *out = opt.value;
                LmlabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Pinsker gap for a pair of length-`len` probability vectors: `lhs` gets
/// the l1 distance, `rhs` gets sqrt(2 KL(qstar || q)) (+inf on support
/// mismatch).
///
/// # Safety
/// `q` and `qstar` must point to `len` doubles; `lhs`/`rhs` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_pinsker_gap(
    q: *const f64,
    qstar: *const f64,
    len: usize,
    lhs: *mut f64,
    rhs: *mut f64,
) -> LmlabStatus {
    guard(|| {
        if q.is_null() || qstar.is_null() || lhs.is_null() || rhs.is_null() {
            set_error("null pointer");
            return LmlabStatus::NullPointer;
        }
        let qs = std::slice::from_raw_parts(q, len);
        let qss = std::slice::from_raw_parts(qstar, len);
        let (l, r) = lmlab::bound::pinsker_gap(qs, qss);
        *lhs = l;
        *rhs = r;
        LmlabStatus::Ok
    })
}

/// Run the full bound pipeline for a config and write the artifact bundle
/// into `out_dir`. `all_hold` reports whether every theorem bound held.
///
/// # Safety
/// `config_json` and `out_dir` must be NUL-terminated strings; `all_hold`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmlab_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
    jobs: usize,
    all_hold: *mut bool,
) -> LmlabStatus {
    guard(|| {
        if all_hold.is_null() {
            set_error("null out pointer");
            return LmlabStatus::NullPointer;
        }
        let text = match read_str(config_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let dir = match read_str(out_dir) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let run = match experiment::run_experiment(&cfg, jobs) {
            Ok(r) => r,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        if let Err(e) = experiment::write_run(Path::new(dir), &run) {
            set_error(&e.to_string());
            return status_of(&e);
        }
        *all_hold = run.all_hold;
        LmlabStatus::Ok
    })
}
