//! C ABI over the reconstruction library.
//!
//! Every fallible function returns a [`GcnfaceStatus`]; on failure the
//! message is kept per thread and read with [`gcnface_last_error`]. Handles
//! are opaque and must be released with their matching `_free` function.
//! Paths and configuration text are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use gcnface::gcn::{read_checkpoint_file, write_checkpoint_file};
use gcnface::pipeline::{
    evaluate, gradcheck_suite, infer_prepared, read_dataset_file, synth_dataset, train_step, write_dataset_file,
    RunConfig, Setup, StepLog, TrainData, TrainState,
};
use gcnface::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcnfaceStatus {
    Ok = 0,
    Contract = 1,
    UnsupportedOp = 2,
    NonConvergence = 3,
    Parse = 4,
    Config = 5,
    DegenerateMask = 6,
    NonFinite = 7,
    Io = 8,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 9,
    /// An output buffer was too small; the required length was still written.
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for GcnfaceStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Contract { .. } => Self::Contract,
            Error::UnsupportedOp(_) => Self::UnsupportedOp,
            Error::NonConvergence { .. } => Self::NonConvergence,
            Error::Parse { .. } => Self::Parse,
            Error::Config(_) => Self::Config,
            Error::DegenerateMask(_) => Self::DegenerateMask,
            Error::NonFinite { .. } => Self::NonFinite,
            Error::Io(_) => Self::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(GcnfaceStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), format!("{}: {e}", e.kind()))
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(GcnfaceStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GcnfaceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GcnfaceStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GcnfaceStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    text(p, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn out<T>(p: *mut T, value: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(invalid("output pointer is null"));
    }
    p.write(value);
    Ok(())
}

/// Copies `s` and a NUL into `buf` when it fits; always stores the required
/// size (including the NUL) in `needed`.
unsafe fn copy_text(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Failure> {
    let n = s.len() + 1;
    if !needed.is_null() {
        needed.write(n);
    }
    if buf.is_null() || len < n {
        return Err(Failure(
            GcnfaceStatus::BufferTooSmall,
            format!("buffer of {len} bytes, {n} needed"),
        ));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    buf.add(s.len()).write(0);
    Ok(())
}

struct Session {
    setup: Setup,
    data: TrainData,
}

/// Trainable parameters and optimizer state bound to a session.
pub struct GcnfaceTrainer {
    session: Arc<Session>,
    state: TrainState,
}

/// Configuration, model, mesh hierarchy and dataset. Trainers keep their own
/// reference, so a session may be freed before its trainers.
pub struct GcnfaceSession(Arc<Session>);

/// Loss terms of one training step. Rendering and critic terms are NaN while
/// inactive.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GcnfaceStepLog {
    pub step: u64,
    pub sigma: [f64; 4],
    pub pixel: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub vertex_texture: f64,
    pub vertex_projected: f64,
    pub total: f64,
    pub critic_loss: f64,
    pub penalty: f64,
}

impl From<&StepLog> for GcnfaceStepLog {
    fn from(l: &StepLog) -> Self {
        let o = |v: Option<f64>| v.unwrap_or(f64::NAN);
        Self {
            step: l.step as u64,
            sigma: l.sigma,
            pixel: o(l.pixel),
            identity: o(l.identity),
            adversarial: o(l.adversarial),
            vertex_texture: l.vertex_texture,
            vertex_projected: l.vertex_projected,
            total: l.total,
            critic_loss: o(l.critic_loss),
            penalty: o(l.penalty),
        }
    }
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gcnface_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a session. `config_toml` may be null for defaults. `dataset_path`
/// may be null to synthesize `data.count` samples from the configuration.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn gcnface_session_new(
    config_toml: *const c_char,
    dataset_path: *const c_char,
    out: *mut *mut GcnfaceSession,
) -> GcnfaceStatus {
    guard(|| {
        let config = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(text(config_toml, "config_toml")?)?
        };
        config.validate()?;
        let setup = Setup::new(config)?;
        let samples = if dataset_path.is_null() {
            synth_dataset(&setup, setup.config.data.count)?
        } else {
            read_dataset_file(&path(dataset_path, "dataset_path")?)?
        };
        let data = TrainData::new(&setup, samples)?;
        let s = Box::new(GcnfaceSession(Arc::new(Session { setup, data })));
        self::out(out, Box::into_raw(s))
    })
}

/// # Safety
/// `session` must be null or a pointer from [`gcnface_session_new`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn gcnface_session_free(session: *mut GcnfaceSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// # Safety
/// `session` must be a live session handle; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcnface_session_sample_count(
    session: *const GcnfaceSession,
    count: *mut usize,
) -> GcnfaceStatus {
    guard(|| out(count, handle(session, "session")?.0.data.len()))
}

/// Side length in pixels of every image.
///
/// # Safety
/// `session` must be a live session handle; `size` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcnface_session_image_size(
    session: *const GcnfaceSession,
    size: *mut usize,
) -> GcnfaceStatus {
    guard(|| out(size, handle(session, "session")?.0.setup.image_size()))
}

/// # Safety
/// `session` must be a live session handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn gcnface_session_save_dataset(
    session: *const GcnfaceSession,
    path: *const c_char,
) -> GcnfaceStatus {
    guard(|| {
        let s = handle(session, "session")?;
        Ok(write_dataset_file(&s.0.data.samples, &self::path(path, "path")?)?)
    })
}

/// Writes the session's effective configuration as TOML.
///
/// # Safety
/// `session` must be a live session handle; `buf` must hold `len` bytes or be
/// null; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn gcnface_session_config(
    session: *const GcnfaceSession,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> GcnfaceStatus {
    guard(|| copy_text(&handle(session, "session")?.0.setup.config.to_toml(), buf, len, needed))
}

/// Creates a trainer with freshly initialized parameters, or resumes from
/// `checkpoint_path` when it is not null.
///
/// # Safety
/// `session` must be a live session handle; `checkpoint_path` null or a valid
/// string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gcnface_trainer_new(
    session: *const GcnfaceSession,
    checkpoint_path: *const c_char,
    out: *mut *mut GcnfaceTrainer,
) -> GcnfaceStatus {
    guard(|| {
        let session = Arc::clone(&handle(session, "session")?.0);
        let state = if checkpoint_path.is_null() {
            TrainState::new(&session.setup)
        } else {
            let store = read_checkpoint_file(&path(checkpoint_path, "checkpoint_path")?)?;
            TrainState::from_checkpoint(&session.setup, &store)?
        };
        self::out(out, Box::into_raw(Box::new(GcnfaceTrainer { session, state })))
    })
}

/// # Safety
/// `trainer` must be null or a pointer from [`gcnface_trainer_new`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn gcnface_trainer_free(trainer: *mut GcnfaceTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs one training step. `log` may be null. When `dump_dir` is not null a
/// non-finite loss writes a diagnostic checkpoint there.
///
/// # Safety
/// `trainer` must be a live trainer handle; `dump_dir` null or a valid
/// string; `log` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gcnface_trainer_step(
    trainer: *mut GcnfaceTrainer,
    dump_dir: *const c_char,
    log: *mut GcnfaceStepLog,
) -> GcnfaceStatus {
    guard(|| {
        let t = handle_mut(trainer, "trainer")?;
        let dump = if dump_dir.is_null() { None } else { Some(path(dump_dir, "dump_dir")?) };
        let entry = train_step(&t.session.setup, &t.session.data, &mut t.state, dump.as_deref())?;
        if !log.is_null() {
            log.write((&entry).into());
        }
        Ok(())
    })
}

/// # Safety
/// `trainer` must be a live trainer handle; `step` writable.
#[no_mangle]
pub unsafe extern "C" fn gcnface_trainer_current_step(trainer: *const GcnfaceTrainer, step: *mut u64) -> GcnfaceStatus {
    guard(|| out(step, handle(trainer, "trainer")?.state.step as u64))
}

/// # Safety
/// `trainer` must be a live trainer handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn gcnface_trainer_save(trainer: *const GcnfaceTrainer, path: *const c_char) -> GcnfaceStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        let store = t.state.to_checkpoint(&t.session.setup);
        Ok(write_checkpoint_file(&store, &self::path(path, "path")?)?)
    })
}

/// Refined per-vertex albedo of one sample, `3 * vertex_count` values in
/// vertex-major RGB order. `needed` receives the value count.
///
/// # Safety
/// `trainer` must be a live trainer handle; `values` must hold `len` doubles
/// or be null; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn gcnface_trainer_refined_albedo(
    trainer: *const GcnfaceTrainer,
    sample: usize,
    values: *mut f64,
    len: usize,
    needed: *mut usize,
) -> GcnfaceStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        let prep = t
            .session
            .data
            .prepared
            .get(sample)
            .ok_or_else(|| invalid(&format!("sample {sample} out of range")))?;
        let inf = infer_prepared(&t.session.setup, &t.state.params, prep)?;
        let data = inf.refined_albedo.data();
        if !needed.is_null() {
            needed.write(data.len());
        }
        if values.is_null() || len < data.len() {
            return Err(Failure(
                GcnfaceStatus::BufferTooSmall,
                format!("buffer of {len} values, {} needed", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), values, data.len());
        Ok(())
    })
}

/// Writes OBJ meshes, renders and the projection mask of one sample into
/// `dir`.
///
/// # Safety
/// `trainer` must be a live trainer handle; `dir` a valid string.
#[no_mangle]
pub unsafe extern "C" fn gcnface_trainer_infer(
    trainer: *const GcnfaceTrainer,
    sample: usize,
    dir: *const c_char,
) -> GcnfaceStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        let prep = t
            .session
            .data
            .prepared
            .get(sample)
            .ok_or_else(|| invalid(&format!("sample {sample} out of range")))?;
        let inf = infer_prepared(&t.session.setup, &t.state.params, prep)?;
        inf.write(&t.session.setup, &path(dir, "dir")?)?;
        Ok(())
    })
}

/// Evaluation report over the session's dataset as text.
///
/// # Safety
/// `trainer` must be a live trainer handle; `buf` must hold `len` bytes or be
/// null; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn gcnface_trainer_eval(
    trainer: *const GcnfaceTrainer,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> GcnfaceStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        let report = evaluate(&t.session.setup, &t.state.params, &t.session.data)?;
        copy_text(&report.to_text(), buf, len, needed)
    })
}

/// Runs the finite-difference suite. `all_passed` receives 1 or 0; the
/// report text goes to `buf` as with [`gcnface_trainer_eval`].
///
/// # Safety
/// `all_passed` must be writable; `buf` must hold `len` bytes or be null;
/// `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn gcnface_gradcheck(
    seed: u64,
    all_passed: *mut i32,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> GcnfaceStatus {
    guard(|| {
        let report = gradcheck_suite(seed, None)?;
        out(all_passed, i32::from(report.all_passed()))?;
        copy_text(&report.to_text(), buf, len, needed)
    })
}
