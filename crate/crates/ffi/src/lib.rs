//! C ABI over `selfplay-core`.
//!
//! Objects cross the boundary as opaque handles created by `sp_*_new` style
//! functions and released with the matching `sp_*_free`. Every fallible call
//! returns an [`SpStatus`]; on failure a message for the calling thread is
//! available from [`sp_last_error`]. Strings returned to the caller are owned
//! by the caller and must be released with [`sp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use selfplay_core::minilang::{evaluate, parse_str};
use selfplay_core::orchestrator::{
    build_corpus, io, pass_at_1, run_selfplay, MetricsReport, OrchestratorError, RunConfig,
};
use selfplay_core::policy::PolicyModel;
use thiserror::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Eval = 6,
    Runtime = 7,
    Panic = 8,
}

#[derive(Debug, Error)]
enum FfiError {
    #[error("null argument: {0}")]
    Null(&'static str),
    #[error("argument {0} is not valid UTF-8")]
    Utf8(&'static str),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error(transparent)]
    Core(#[from] OrchestratorError),
}

impl FfiError {
    fn status(&self) -> SpStatus {
        match self {
            FfiError::Null(_) => SpStatus::NullArgument,
            FfiError::Utf8(_) => SpStatus::InvalidUtf8,
            FfiError::Parse(_) => SpStatus::Parse,
            FfiError::Eval(_) => SpStatus::Eval,
            FfiError::Core(e) if e.is_config() => SpStatus::Config,
            FfiError::Core(OrchestratorError::Io(_)) => SpStatus::Io,
            FfiError::Core(_) => SpStatus::Runtime,
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

fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> SpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(e.to_string());
            e.status()
        }
        Err(_) => {
            set_last_error("panic inside the library".into());
            SpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, FfiError> {
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| FfiError::Utf8(name))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, FfiError> {
    p.as_ref().ok_or(FfiError::Null(name))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, FfiError> {
    p.as_mut().ok_or(FfiError::Null(name))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .unwrap_or_default()
        .into_raw()
}

/// Opaque run configuration.
pub struct SpConfig(RunConfig);

/// Opaque result of a finished self-play run.
pub struct SpRun(MetricsReport);

/// Message describing the last failed call on this thread, or null.
/// The pointer stays valid until the next call into the library.
#[no_mangle]
pub extern "C" fn sp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn sp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration with the given seed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_config_default(seed: u64, out: *mut *mut SpConfig) -> SpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        *out = Box::into_raw(Box::new(SpConfig(cfg)));
        Ok(())
    })
}

/// Parses a TOML configuration; missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_config_from_toml(
    toml: *const c_char,
    out: *mut *mut SpConfig,
) -> SpStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let out = out_arg(out, "out")?;
        let cfg = RunConfig::from_toml_str(text)?;
        *out = Box::into_raw(Box::new(SpConfig(cfg)));
        Ok(())
    })
}

/// Serializes the configuration as TOML into a caller-owned string.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_config_to_toml(
    cfg: *const SpConfig,
    out: *mut *mut c_char,
) -> SpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = out_arg(out, "out")?;
        *out = owned_string(cfg.0.to_toml_string());
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_config_set_seed(cfg: *mut SpConfig, seed: u64) -> SpStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sp_config_set_iterations(cfg: *mut SpConfig, iterations: u32) -> SpStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.iterations = iterations as usize;
        Ok(())
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn sp_config_free(cfg: *mut SpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the full self-play loop, writing artifacts under `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a NUL-terminated string and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_selfplay_run(
    cfg: *const SpConfig,
    out_dir: *const c_char,
    out: *mut *mut SpRun,
) -> SpStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let out = out_arg(out, "out")?;
        let (_, report) = run_selfplay(&cfg.0, &dir)?;
        *out = Box::into_raw(Box::new(SpRun(report)));
        Ok(())
    })
}

/// Held-out Pass@1 of the random, fine-tuned and final policies.
///
/// # Safety
/// `run` must be a live handle; each output pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn sp_run_pass_at_1(
    run: *const SpRun,
    baseline: *mut f64,
    sft: *mut f64,
    last: *mut f64,
) -> SpStatus {
    guard(|| {
        let r = &ref_arg(run, "run")?.0;
        for (p, v) in [
            (baseline, r.baseline_pass_at_1),
            (sft, r.sft_pass_at_1),
            (last, r.final_pass_at_1),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Number of completed self-play iterations, excluding the SFT stage.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_run_iterations(run: *const SpRun, out: *mut u32) -> SpStatus {
    guard(|| {
        let r = &ref_arg(run, "run")?.0;
        *out_arg(out, "out")? = r.iterations.len().saturating_sub(1) as u32;
        Ok(())
    })
}

/// The run report as JSON in a caller-owned string.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_run_report_json(run: *const SpRun, out: *mut *mut c_char) -> SpStatus {
    guard(|| {
        let r = &ref_arg(run, "run")?.0;
        let out = out_arg(out, "out")?;
        let json = serde_json::to_string(r).map_err(OrchestratorError::from)?;
        *out = owned_string(json);
        Ok(())
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn sp_run_free(run: *mut SpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Held-out Pass@1 of a saved policy checkpoint under `cfg`'s corpus.
///
/// # Safety
/// `cfg` must be a live handle, `policy_path` a NUL-terminated string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_eval_policy(
    cfg: *const SpConfig,
    policy_path: *const c_char,
    out: *mut f64,
) -> SpStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.0;
        let path = PathBuf::from(str_arg(policy_path, "policy_path")?);
        let out = out_arg(out, "out")?;
        let model: PolicyModel = io::read_json(&path)?;
        let split = build_corpus(cfg)?;
        *out = pass_at_1(&model, &split.heldout, cfg.policy.max_steps);
        Ok(())
    })
}

/// Parses and evaluates a program on one input with the given fuel.
/// Results outside the `i64` range are reported as evaluation errors.
///
/// # Safety
/// `program` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_program_eval(
    program: *const c_char,
    x0: i64,
    x1: i64,
    x2: i64,
    fuel: u64,
    out: *mut i64,
) -> SpStatus {
    guard(|| {
        let text = str_arg(program, "program")?;
        let out = out_arg(out, "out")?;
        let prog = parse_str(text).map_err(|e| FfiError::Parse(e.to_string()))?;
        let v = evaluate(&prog, [x0, x1, x2], fuel).map_err(|e| FfiError::Eval(e.to_string()))?;
        *out = i64::try_from(v).map_err(|_| FfiError::Eval(format!("{v} overflows i64")))?;
        Ok(())
    })
}
