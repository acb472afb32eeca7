//! C ABI for the schda engine: opaque config handles, status codes, and a
//! one-call experiment runner, so other languages can drive runs without
//! shelling out to the CLI.
//!
//! Conventions: every function returns a [`SchdaStatus`]; on any non-OK
//! status, [`schda_last_error`] returns a thread-local message describing
//! the failure. Handles are created and released by this library only.

use schda_core::config::{FilterMode, RunConfig};
use schda_core::experiment::run_experiment;
use schda_core::plot::render_run_dir;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

/// Opaque run-configuration handle.
pub struct SchdaConfig {
    inner: RunConfig,
}

/// Status codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    InvalidConfig = 3,
    RunFailed = 4,
}

/// Filter algorithm selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchdaMode {
    Bootstrap = 0,
    Tempered = 1,
    Nudged = 2,
}

impl From<SchdaMode> for FilterMode {
    fn from(value: SchdaMode) -> Self {
        match value {
            SchdaMode::Bootstrap => FilterMode::Bootstrap,
            SchdaMode::Tempered => FilterMode::Tempered,
            SchdaMode::Nudged => FilterMode::Nudged,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let owned = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn schda_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn schda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `path` must be a valid NUL-terminated string or null.
unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, SchdaStatus> {
    if path.is_null() {
        set_error("null path argument");
        return Err(SchdaStatus::NullPointer);
    }
    CStr::from_ptr(path).to_str().map_err(|_| {
        set_error("path is not valid UTF-8");
        SchdaStatus::InvalidString
    })
}

/// New handle with the full-domain experiment defaults. Free with
/// [`schda_config_free`].
#[no_mangle]
pub extern "C" fn schda_config_default() -> *mut SchdaConfig {
    Box::into_raw(Box::new(SchdaConfig {
        inner: RunConfig::experiment1(),
    }))
}

/// New handle with the half-domain experiment defaults.
#[no_mangle]
pub extern "C" fn schda_config_experiment2() -> *mut SchdaConfig {
    Box::into_raw(Box::new(SchdaConfig {
        inner: RunConfig::experiment2(),
    }))
}

/// Load a TOML config file; returns null on failure (see
/// [`schda_last_error`]).
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn schda_config_from_file(path: *const c_char) -> *mut SchdaConfig {
    let Ok(path) = path_arg(path) else {
        return std::ptr::null_mut();
    };
    match RunConfig::load(Path::new(path)) {
        Ok(inner) => Box::into_raw(Box::new(SchdaConfig { inner })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `config` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn schda_config_free(config: *mut SchdaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

unsafe fn with_config<'a>(config: *mut SchdaConfig) -> Result<&'a mut SchdaConfig, SchdaStatus> {
    if config.is_null() {
        set_error("null config handle");
        return Err(SchdaStatus::NullPointer);
    }
    Ok(&mut *config)
}

/// # Safety
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn schda_config_set_seed(
    config: *mut SchdaConfig,
    seed: u64,
) -> SchdaStatus {
    match with_config(config) {
        Ok(c) => {
            c.inner.seed = seed;
            SchdaStatus::Ok
        }
        Err(status) => status,
    }
}

/// # Safety
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn schda_config_set_mode(
    config: *mut SchdaConfig,
    mode: SchdaMode,
) -> SchdaStatus {
    match with_config(config) {
        Ok(c) => {
            c.inner.mode = mode.into();
            SchdaStatus::Ok
        }
        Err(status) => status,
    }
}

/// # Safety
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn schda_config_set_assim_steps(
    config: *mut SchdaConfig,
    steps: usize,
) -> SchdaStatus {
    match with_config(config) {
        Ok(c) => {
            c.inner.n_assim_steps = steps;
            SchdaStatus::Ok
        }
        Err(status) => status,
    }
}

/// # Safety
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn schda_config_set_particles(
    config: *mut SchdaConfig,
    n_particles: usize,
    ess_threshold: usize,
) -> SchdaStatus {
    match with_config(config) {
        Ok(c) => {
            c.inner.n_particles = n_particles;
            c.inner.ess_threshold = ess_threshold;
            SchdaStatus::Ok
        }
        Err(status) => status,
    }
}

/// # Safety
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn schda_config_set_batches(
    config: *mut SchdaConfig,
    n_batches: usize,
) -> SchdaStatus {
    match with_config(config) {
        Ok(c) => {
            c.inner.n_batches = n_batches;
            SchdaStatus::Ok
        }
        Err(status) => status,
    }
}

/// Validate the handle's current values.
///
/// # Safety
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn schda_config_validate(config: *mut SchdaConfig) -> SchdaStatus {
    match with_config(config) {
        Ok(c) => match c.inner.validate() {
            Ok(()) => SchdaStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                SchdaStatus::InvalidConfig
            }
        },
        Err(status) => status,
    }
}

/// Run a full experiment, writing every artifact into `out_dir`.
///
/// # Safety
/// `config` must be a live handle; `out_dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn schda_run_experiment(
    config: *const SchdaConfig,
    out_dir: *const c_char,
) -> SchdaStatus {
    if config.is_null() {
        set_error("null config handle");
        return SchdaStatus::NullPointer;
    }
    let out_dir = match path_arg(out_dir) {
        Ok(p) => p,
        Err(status) => return status,
    };
    let config = &*config;
    if let Err(e) = config.inner.validate() {
        set_error(&e.to_string());
        return SchdaStatus::InvalidConfig;
    }
    match run_experiment(&config.inner, Path::new(out_dir)) {
        Ok(_) => SchdaStatus::Ok,
        Err(e) => {
            set_error(&e.to_string());
            SchdaStatus::RunFailed
        }
    }
}

/// Regenerate the SVG plots from a run directory.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn schda_render_plots(dir: *const c_char) -> SchdaStatus {
    let dir = match path_arg(dir) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match render_run_dir(Path::new(dir)) {
        Ok(()) => SchdaStatus::Ok,
        Err(e) => {
            set_error(&e.to_string());
            SchdaStatus::RunFailed
        }
    }
}
