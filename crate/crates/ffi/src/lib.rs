//! C ABI over the zeromaml engine.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible function returns a
//! [`ZmStatus`]; on anything but `ZM_STATUS_OK` a description of the failure
//! is available from [`zm_last_error_message`] on the same thread. Strings
//! returned through out-parameters are allocated here and must be released
//! with [`zm_string_free`]. Panics never cross the boundary; they surface as
//! `ZM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use zeromaml::config::{preset, ExperimentConfig};
use zeromaml::io::{load_model_for, save_model};
use zeromaml::meta::{outer_update, MetaModel};
use zeromaml::numerics::RngStream;
use zeromaml::runner::{run_verify, Experiment, TaskSampler};
use zeromaml::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Contract = 3,
    Degenerate = 4,
    Unsupported = 5,
    NonFinite = 6,
    Config = 7,
    Format = 8,
    Io = 9,
    VerificationFailed = 10,
    Panic = 11,
}

impl From<&Error> for ZmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Contract(_) => ZmStatus::Contract,
            Error::Degenerate(_) => ZmStatus::Degenerate,
            Error::Unsupported(_) => ZmStatus::Unsupported,
            Error::NonFinite(_) => ZmStatus::NonFinite,
            Error::Config { .. } => ZmStatus::Config,
            Error::Format(_) | Error::Json(_) => ZmStatus::Format,
            Error::Verification(_) => ZmStatus::VerificationFailed,
            Error::Io(_) => ZmStatus::Io,
        }
    }
}

/// An experiment configuration.
pub struct ZmConfig {
    inner: ExperimentConfig,
}

/// A model together with the banks, evaluation episodes and task stream it
/// trains on.
pub struct ZmSession {
    experiment: Experiment,
    model: MetaModel,
    sampler: TaskSampler,
    tasks: RngStream,
    iteration: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(ZmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(ZmStatus::from(&e), e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs `body`, converting errors and panics into a status and last-error message.
fn guard(body: impl FnOnce() -> Outcome) -> ZmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            ZmStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {message}"));
            ZmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ZmStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> std::result::Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(ZmStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> std::result::Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> std::result::Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Outcome {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// The message of the last failed call on this thread, or null after a
/// successful one. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn zm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn zm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a configuration from a named preset.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zm_config_from_preset(name: *const c_char, out: *mut *mut ZmConfig) -> ZmStatus {
    guard(|| {
        let name = read_str(name, "name")?;
        let cfg = preset(name)?;
        write_out(out, Box::into_raw(Box::new(ZmConfig { inner: cfg })), "out")
    })
}

/// Parses a configuration from its text form.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zm_config_parse(text: *const c_char, out: *mut *mut ZmConfig) -> ZmStatus {
    guard(|| {
        let cfg = ExperimentConfig::parse(read_str(text, "text")?)?;
        write_out(out, Box::into_raw(Box::new(ZmConfig { inner: cfg })), "out")
    })
}

/// Sets the run seed.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn zm_config_set_seed(config: *mut ZmConfig, seed: u64) -> ZmStatus {
    guard(|| {
        deref_mut(config, "config")?.inner.run.seed = seed;
        Ok(())
    })
}

/// Writes the resolved configuration text; release it with [`zm_string_free`].
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zm_config_to_text(config: *const ZmConfig, out: *mut *mut c_char) -> ZmStatus {
    guard(|| {
        let text = deref(config, "config")?.inner.to_text();
        write_out(out, owned_string(text), "out")
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `config` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn zm_config_free(config: *mut ZmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the finite-difference gradient checks for `trials` random instances
/// per variant (0 keeps the configured count). Writes the reports as JSON
/// when `out_json` is non-null. Returns `ZM_STATUS_VERIFICATION_FAILED` if
/// any check breached its tolerance.
///
/// # Safety
/// `config` must be a live handle; `out_json` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn zm_verify(config: *const ZmConfig, trials: u32, out_json: *mut *mut c_char) -> ZmStatus {
    guard(|| {
        let mut cfg = deref(config, "config")?.inner.clone();
        if trials > 0 {
            cfg.verify.trials = trials as usize;
        }
        let reports = run_verify(&cfg)?;
        if !out_json.is_null() {
            let json = serde_json::to_string(&reports).map_err(Error::from)?;
            out_json.write(owned_string(json));
        }
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.variant.clone()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Failure(ZmStatus::VerificationFailed, format!("gradient checks failed for {}", failed.join(", "))))
        }
    })
}

/// Builds the banks and evaluation episodes for `config` and initializes a
/// model from its seed.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zm_session_new(config: *const ZmConfig, out: *mut *mut ZmSession) -> ZmStatus {
    guard(|| {
        let experiment = Experiment::new(deref(config, "config")?.inner.clone())?;
        let model = experiment.init_model()?;
        let sampler = experiment.default_sampler();
        let tasks = experiment.task_rng();
        let session = ZmSession { experiment, model, sampler, tasks, iteration: 0 };
        write_out(out, Box::into_raw(Box::new(session)), "out")
    })
}

/// Runs `iterations` outer updates and writes the mean pre-update query loss
/// to `out_loss` (if non-null). A non-finite update leaves the model at its
/// last finite state.
///
/// # Safety
/// `session` must be a live handle; `out_loss` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn zm_session_train(session: *mut ZmSession, iterations: u32, out_loss: *mut f64) -> ZmStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let meta = s.experiment.config.meta.clone();
        let mut total = 0.0;
        for _ in 0..iterations {
            let batch = s.experiment.sample_batch(s.sampler, &mut s.tasks)?;
            let before = s.model.clone();
            match outer_update(&mut s.model, &batch, &meta, s.experiment.pool()) {
                Ok(loss) => total += loss,
                Err(e) => {
                    s.model = before;
                    return Err(e.into());
                }
            }
            s.iteration += 1;
        }
        if !out_loss.is_null() && iterations > 0 {
            out_loss.write(total / iterations as f64);
        }
        Ok(())
    })
}

/// Number of outer updates applied so far.
///
/// # Safety
/// `session` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zm_session_iteration(session: *const ZmSession, out: *mut u64) -> ZmStatus {
    guard(|| write_out(out, deref(session, "session")?.iteration, "out"))
}

/// Meta-test accuracy on the frozen evaluation episodes, with the head as
/// trained (`zero_head_first == 0`) or zeroed before adaptation.
///
/// # Safety
/// `session` must be a live handle; `out_accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zm_session_evaluate(
    session: *const ZmSession,
    zero_head_first: bool,
    out_accuracy: *mut f64,
) -> ZmStatus {
    guard(|| {
        let s = deref(session, "session")?;
        let (raw, zeroed) = s.experiment.evaluate_both(&s.model)?;
        write_out(out_accuracy, if zero_head_first { zeroed.accuracy } else { raw.accuracy }, "out_accuracy")
    })
}

/// Frobenius norm of the head.
///
/// # Safety
/// `session` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn zm_session_head_norm(session: *const ZmSession, out: *mut f64) -> ZmStatus {
    guard(|| write_out(out, deref(session, "session")?.model.head.norm(), "out"))
}

/// Writes the model in its versioned text format.
///
/// # Safety
/// `session` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn zm_session_save(session: *const ZmSession, path: *const c_char) -> ZmStatus {
    guard(|| {
        let s = deref(session, "session")?;
        save_model(&s.model, &PathBuf::from(read_str(path, "path")?))?;
        Ok(())
    })
}

/// Replaces the model with one loaded from `path`; its shape must match the
/// session's configuration. The iteration counter is reset.
///
/// # Safety
/// `session` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn zm_session_load(session: *mut ZmSession, path: *const c_char) -> ZmStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let path = PathBuf::from(read_str(path, "path")?);
        let cfg = &s.experiment.config;
        s.model = load_model_for(&path, &cfg.encoder_sizes(), &cfg.meta)?;
        s.iteration = 0;
        Ok(())
    })
}

/// Releases a session. Null is ignored.
///
/// # Safety
/// `session` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn zm_session_free(session: *mut ZmSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
