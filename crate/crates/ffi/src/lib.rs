//! C ABI over the gossip-sgd engine.
//!
//! Conventions:
//! - Every fallible function returns a [`GsStatus`]; on failure the message
//!   is available from [`gs_last_error_message`] on the same thread.
//! - Objects are opaque handles created by `*_new`/`*_parse`/`*_run` style
//!   functions and released by the matching `*_free`. Freeing NULL is a no-op.
//! - Strings returned through out-parameters are owned by the caller and
//!   must be released with [`gs_string_free`].
//! - Panics never cross the boundary; they surface as `GS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gossip_sgd::bounds::{
    async_consensus_bound, async_optimality_bound, sync_optimality_bound, BoundKind, BoundSpec,
};
use gossip_sgd::config::{parse_config, RunConfig};
use gossip_sgd::experiment::{emit_matrix_diagnostics, run_experiment, ExitStatus, ExperimentOutcome};
use gossip_sgd::mixing::{contraction_lambda, LambdaVariant};
use gossip_sgd::simulator::TraceRecord;
use gossip_sgd::transport::{decode_message, encode_message, Message, MessageKind, HEADER_LEN};
use gossip_sgd::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    RuntimeError = 4,
    DecodeError = 5,
    BufferTooSmall = 6,
    OutOfRange = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsLambdaVariant {
    Theorem = 0,
    Diagonalization = 1,
}

impl From<GsLambdaVariant> for LambdaVariant {
    fn from(v: GsLambdaVariant) -> Self {
        match v {
            GsLambdaVariant::Theorem => LambdaVariant::Theorem,
            GsLambdaVariant::Diagonalization => LambdaVariant::Diagonalization,
        }
    }
}

/// Closed-form bound inputs. `beta`, `c` and `lambda_variant` are read only
/// by the consensus bound.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GsBoundParams {
    pub m: f64,
    pub l: f64,
    pub sigma_sq: f64,
    pub alpha: f64,
    pub beta: f64,
    pub p: usize,
    pub initial_sq_err: f64,
    pub c: f64,
    pub lambda_variant: GsLambdaVariant,
}

/// One logged observation; the run id and protocol live on the run handle.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GsTraceRecord {
    pub t: u64,
    pub sim_time: f64,
    pub sq_err_opt: f64,
    pub sq_err_consensus: f64,
    pub loss_mean: f64,
    pub alpha: f64,
    pub max_grad_norm: f64,
}

impl From<&TraceRecord> for GsTraceRecord {
    fn from(r: &TraceRecord) -> Self {
        GsTraceRecord {
            t: r.t,
            sim_time: r.sim_time,
            sq_err_opt: r.sq_err_opt,
            sq_err_consensus: r.sq_err_consensus,
            loss_mean: r.loss_mean,
            alpha: r.alpha,
            max_grad_norm: r.max_grad_norm,
        }
    }
}

/// Decoded frame header.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GsFrameHeader {
    pub kind: u8,
    pub sender: u32,
    pub round_tag: u32,
    pub count: u32,
}

/// A validated experiment configuration.
pub struct GsConfig {
    inner: RunConfig,
}

/// A finished experiment: traces, summary and optional bound verdict.
pub struct GsRun {
    outcome: ExperimentOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    let c = CString::new(text).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: GsStatus, msg: impl Into<String>) -> GsStatus {
    set_last_error(msg);
    status
}

fn status_of(e: &Error) -> GsStatus {
    match e {
        Error::Config(_) => GsStatus::ConfigError,
        Error::Decode(_) => GsStatus::DecodeError,
        Error::IndexOutOfRange { .. } => GsStatus::OutOfRange,
        Error::InvalidParameter(_)
        | Error::DimensionMismatch { .. }
        | Error::Empty(_)
        | Error::Unsupported(_)
        | Error::DegenerateBound(_) => {
            GsStatus::InvalidArgument
        }
        _ => GsStatus::RuntimeError,
    }
}

fn from_error(e: Error) -> GsStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

/// Runs `f`, converting panics into `GS_STATUS_PANIC`.
fn guard(f: impl FnOnce() -> GsStatus) -> GsStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(GsStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, GsStatus> {
    if s.is_null() {
        return Err(fail(GsStatus::NullPointer, "string argument is NULL"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(GsStatus::InvalidArgument, "string argument is not UTF-8"))
}

fn into_c_string(s: String) -> Result<*mut c_char, GsStatus> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| fail(GsStatus::RuntimeError, "string contains an interior NUL"))
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(GsStatus::NullPointer, concat!("`", stringify!($p), "` is NULL"));
        })+
    };
}

/// Message of the most recent failure on this thread, or NULL after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn gs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be NULL or a pointer obtained from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a TOML experiment config.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_config_parse(text: *const c_char, out: *mut *mut GsConfig) -> GsStatus {
    guard(|| {
        non_null!(out);
        *out = ptr::null_mut();
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_config(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(GsConfig { inner }));
                GsStatus::Ok
            }
            Err(e) => fail(GsStatus::ConfigError, e.to_string()),
        }
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from [`gs_config_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gs_config_free(cfg: *mut GsConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Complete TOML echo of a config; free with [`gs_string_free`].
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_config_to_toml(cfg: *const GsConfig, out: *mut *mut c_char) -> GsStatus {
    guard(|| {
        non_null!(cfg, out);
        *out = ptr::null_mut();
        match (*cfg).inner.to_toml() {
            Ok(s) => match into_c_string(s) {
                Ok(p) => {
                    *out = p;
                    GsStatus::Ok
                }
                Err(s) => s,
            },
            Err(e) => from_error(e),
        }
    })
}

/// Redirects a config's artifacts.
///
/// # Safety
/// `cfg` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gs_config_set_output_dir(cfg: *mut GsConfig, dir: *const c_char) -> GsStatus {
    guard(|| {
        non_null!(cfg);
        match read_str(dir) {
            Ok(d) => {
                (*cfg).inner.run.output_dir = PathBuf::from(d);
                GsStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Runs the experiment and writes its artifacts.
///
/// A run whose bound report fails still returns `GS_STATUS_OK`; read the
/// verdict with [`gs_run_exit_code`] or [`gs_run_bound_pass`].
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_run_experiment(cfg: *const GsConfig, out: *mut *mut GsRun) -> GsStatus {
    guard(|| {
        non_null!(cfg, out);
        *out = ptr::null_mut();
        match run_experiment(&(*cfg).inner) {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(GsRun { outcome }));
                GsStatus::Ok
            }
            Err(e) => {
                let status = match e.status {
                    ExitStatus::ConfigError => GsStatus::ConfigError,
                    _ => GsStatus::RuntimeError,
                };
                fail(status, e.to_string())
            }
        }
    })
}

/// # Safety
/// `run` must be NULL or a handle from [`gs_run_experiment`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gs_run_free(run: *mut GsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// The command-line exit code the run maps to (0 or 1).
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_run_exit_code(run: *const GsRun) -> i32 {
    if run.is_null() {
        return ExitStatus::RuntimeError.code();
    }
    (*run).outcome.status.code()
}

/// `1` pass, `0` fail, `-1` when no bound report was requested.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_run_bound_pass(run: *const GsRun) -> i32 {
    if run.is_null() {
        return -1;
    }
    match &(*run).outcome.bound_report {
        Some(r) => i32::from(r.pass),
        None => -1,
    }
}

/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gs_run_trial_count(run: *const GsRun) -> usize {
    if run.is_null() {
        return 0;
    }
    (*run).outcome.traces.len()
}

/// Number of records in trial `trial`'s trace.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_run_trace_len(run: *const GsRun, trial: usize, out: *mut usize) -> GsStatus {
    guard(|| {
        non_null!(run, out);
        match (*run).outcome.traces.as_slice().get(trial) {
            Some(t) => {
                *out = t.len();
                GsStatus::Ok
            }
            None => fail(GsStatus::OutOfRange, format!("no trial {trial}")),
        }
    })
}

/// Copies record `index` of trial `trial`.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_run_trace_record(
    run: *const GsRun,
    trial: usize,
    index: usize,
    out: *mut GsTraceRecord,
) -> GsStatus {
    guard(|| {
        non_null!(run, out);
        match (*run).outcome.traces.as_slice().get(trial).and_then(|t| t.get(index)) {
            Some(r) => {
                *out = r.into();
                GsStatus::Ok
            }
            None => fail(GsStatus::OutOfRange, format!("no record {index} in trial {trial}")),
        }
    })
}

/// Summary JSON of the run; free with [`gs_string_free`].
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_run_summary_json(run: *const GsRun, out: *mut *mut c_char) -> GsStatus {
    guard(|| {
        non_null!(run, out);
        *out = ptr::null_mut();
        let json = match serde_json::to_string(&(*run).outcome.summary) {
            Ok(j) => j,
            Err(e) => return from_error(e.into()),
        };
        match into_c_string(json) {
            Ok(p) => {
                *out = p;
                GsStatus::Ok
            }
            Err(s) => s,
        }
    })
}

fn bound_spec(kind: BoundKind, b: &GsBoundParams) -> Result<BoundSpec, Error> {
    let s = BoundSpec::new(kind, b.m, b.l, b.sigma_sq, b.alpha, b.p, b.initial_sq_err)?;
    match kind {
        BoundKind::AsyncConsensus => s.with_consensus(b.beta, b.c, b.lambda_variant.into()),
        _ => Ok(s),
    }
}

fn eval_bound(
    kind: BoundKind,
    params: *const GsBoundParams,
    t: u64,
    out: *mut f64,
    f: fn(&BoundSpec, u64) -> gossip_sgd::Result<f64>,
) -> GsStatus {
    guard(|| {
        non_null!(params, out);
        // SAFETY: both checked non-null; the caller guarantees validity.
        let b = unsafe { &*params };
        match bound_spec(kind, b).and_then(|s| f(&s, t)) {
            Ok(v) => {
                unsafe { *out = v };
                GsStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// `(1 - 2 alpha mL/(m+L))^t init + p alpha sigma^2 (m+L)/(2mL)`.
///
/// # Safety
/// `params` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_sync_optimality_bound(params: *const GsBoundParams, t: u64, out: *mut f64) -> GsStatus {
    eval_bound(BoundKind::SyncOptimality, params, t, out, sync_optimality_bound)
}

/// Like the synchronous bound with the contraction slowed by `1/p`.
///
/// # Safety
/// `params` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_async_optimality_bound(params: *const GsBoundParams, t: u64, out: *mut f64) -> GsStatus {
    eval_bound(BoundKind::AsyncOptimality, params, t, out, async_optimality_bound)
}

/// Asynchronous consensus bound; needs `beta`, `c` and `lambda_variant`.
///
/// # Safety
/// `params` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_async_consensus_bound(params: *const GsBoundParams, t: u64, out: *mut f64) -> GsStatus {
    eval_bound(BoundKind::AsyncConsensus, params, t, out, async_consensus_bound)
}

/// Per-event consensus contraction factor.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_contraction_lambda(
    p: usize,
    beta: f64,
    variant: GsLambdaVariant,
    out: *mut f64,
) -> GsStatus {
    guard(|| {
        non_null!(out);
        if p == 0 || !(0.0..=1.0).contains(&beta) {
            return fail(GsStatus::InvalidArgument, format!("need p >= 1 and beta in [0, 1], got p={p} beta={beta}"));
        }
        *out = contraction_lambda(p, beta, variant.into());
        GsStatus::Ok
    })
}

/// Text report of closed-form versus enumerated mixing moments; free with
/// [`gs_string_free`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_mixing_diagnostics(p: usize, beta: f64, out: *mut *mut c_char) -> GsStatus {
    guard(|| {
        non_null!(out);
        *out = ptr::null_mut();
        match emit_matrix_diagnostics(p, beta) {
            Ok(text) => match into_c_string(text) {
                Ok(s) => {
                    *out = s;
                    GsStatus::Ok
                }
                Err(s) => s,
            },
            Err(e) => from_error(e),
        }
    })
}

/// Bytes needed to encode a frame of `count` doubles.
#[no_mangle]
pub extern "C" fn gs_frame_encoded_len(count: usize) -> usize {
    HEADER_LEN + 8 * count
}

/// Encodes a frame into `buf`. `written` always receives the required size,
/// so a too-small buffer reports how much to allocate.
///
/// # Safety
/// `payload` must point to `count` doubles (or be NULL when `count` is 0);
/// `buf` must be writable for `cap` bytes; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_frame_encode(
    kind: u8,
    sender: u32,
    round_tag: u32,
    payload: *const f64,
    count: usize,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> GsStatus {
    guard(|| {
        non_null!(written);
        *written = gs_frame_encoded_len(count);
        if count > 0 && payload.is_null() {
            return fail(GsStatus::NullPointer, "`payload` is NULL");
        }
        let kind = match MessageKind::try_from(kind) {
            Ok(k) => k,
            Err(e) => return fail(GsStatus::InvalidArgument, e.to_string()),
        };
        let values = if count == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(payload, count).to_vec()
        };
        let msg = Message {
            kind,
            sender,
            round_tag,
            payload: values,
        };
        let bytes = match encode_message(&msg) {
            Ok(b) => b,
            Err(e) => return from_error(e),
        };
        if cap < bytes.len() {
            return fail(
                GsStatus::BufferTooSmall,
                format!("frame needs {} bytes, buffer has {cap}", bytes.len()),
            );
        }
        non_null!(buf);
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        GsStatus::Ok
    })
}

/// Decodes a frame. The header is always filled on success or when the
/// payload buffer is too small; `payload` receives `header.count` doubles.
///
/// # Safety
/// `buf` must be readable for `len` bytes; `header` writable; `payload`
/// writable for `cap` doubles (may be NULL when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn gs_frame_decode(
    buf: *const u8,
    len: usize,
    header: *mut GsFrameHeader,
    payload: *mut f64,
    cap: usize,
) -> GsStatus {
    guard(|| {
        non_null!(buf, header);
        let bytes = std::slice::from_raw_parts(buf, len);
        let msg = match decode_message(bytes) {
            Ok(m) => m,
            Err(e) => return from_error(e),
        };
        *header = GsFrameHeader {
            kind: msg.kind as u8,
            sender: msg.sender,
            round_tag: msg.round_tag,
            count: msg.payload.len() as u32,
        };
        if msg.payload.len() > cap {
            return fail(
                GsStatus::BufferTooSmall,
                format!("frame carries {} values, buffer holds {cap}", msg.payload.len()),
            );
        }
        if !msg.payload.is_empty() {
            non_null!(payload);
            ptr::copy_nonoverlapping(msg.payload.as_ptr(), payload, msg.payload.len());
        }
        GsStatus::Ok
    })
}
