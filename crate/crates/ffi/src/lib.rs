//! C ABI over the amesh wire codec, benchmark statistics and an embeddable
//! demo server.
//!
//! Every fallible call returns an [`AmeshStatus`]; results come back through
//! out-pointers. Handles are opaque and must be released with their `_free`
//! or `_stop` function. The message of the last failure on the calling
//! thread is available from [`amesh_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::ptr;
use std::slice;

use amesh::bench::{harmonic_mean, performance_rate, StatsError};
use amesh::config::ServerConfig;
use amesh::demo::{DemoServer, Mode, PIPELINE_RULES};
use amesh::wire::{self, DecodeError, MessageEnvelope, MsgKind, ServiceType};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmeshStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownKind = 3,
    UnknownService = 4,
    Truncated = 5,
    BadFrame = 6,
    Oversize = 7,
    EmptyInput = 8,
    NonPositiveValue = 9,
    NonPositiveBaseline = 10,
    Io = 11,
    Panic = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: AmeshStatus, message: impl Into<String>) -> AmeshStatus {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
    status
}

/// Runs `f`, converting a panic into `AmeshStatus::Panic`.
fn guard(f: impl FnOnce() -> AmeshStatus) -> AmeshStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(AmeshStatus::Panic, "internal panic"),
    }
}

/// Bytes at `data`, or an empty slice for a zero length.
///
/// # Safety
/// A non-zero `len` requires `data` to point at `len` readable bytes.
unsafe fn bytes_in<'a, T>(data: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if data.is_null() {
        None
    } else {
        Some(slice::from_raw_parts(data, len))
    }
}

fn decode_status(e: &DecodeError) -> AmeshStatus {
    match e {
        DecodeError::UnknownKind { .. } => AmeshStatus::UnknownKind,
        DecodeError::UnknownService { .. } => AmeshStatus::UnknownService,
        DecodeError::TruncatedFrame { .. } => AmeshStatus::Truncated,
        DecodeError::OversizeFrame { .. } => AmeshStatus::Oversize,
        _ => AmeshStatus::BadFrame,
    }
}

fn stats_status(e: StatsError) -> AmeshStatus {
    match e {
        StatsError::EmptyInput => AmeshStatus::EmptyInput,
        StatsError::NonPositiveValue => AmeshStatus::NonPositiveValue,
        StatsError::NonPositiveBaseline => AmeshStatus::NonPositiveBaseline,
    }
}

/// A decoded or constructed message envelope.
pub struct AmeshEnvelope(MessageEnvelope);

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn amesh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, NUL-terminated, static.
#[no_mangle]
pub extern "C" fn amesh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an envelope. `session_id` is UTF-8 of `session_len` bytes,
/// `payload` is `payload_len` bytes; either may be null when empty.
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amesh_envelope_new(
    kind: u8,
    service: u8,
    session_id: *const u8,
    session_len: usize,
    request_id: u64,
    timestamp_us: u64,
    payload: *const u8,
    payload_len: usize,
    out: *mut *mut AmeshEnvelope,
) -> AmeshStatus {
    guard(|| {
        if out.is_null() {
            return fail(AmeshStatus::NullPointer, "out is null");
        }
        let Some(kind) = MsgKind::from_code(kind) else {
            return fail(AmeshStatus::UnknownKind, format!("unknown msg_kind {kind}"));
        };
        let Some(service) = ServiceType::from_code(service) else {
            return fail(AmeshStatus::UnknownService, format!("unknown service_type {service}"));
        };
        let (Some(sid), Some(body)) = (bytes_in(session_id, session_len), bytes_in(payload, payload_len)) else {
            return fail(AmeshStatus::NullPointer, "null buffer with non-zero length");
        };
        let Ok(sid) = std::str::from_utf8(sid) else {
            return fail(AmeshStatus::InvalidArgument, "session id is not UTF-8");
        };
        if sid.len() > wire::MAX_SESSION_ID_LEN {
            return fail(AmeshStatus::Oversize, "session id longer than 255 bytes");
        }
        let env = MessageEnvelope {
            kind,
            session_id: sid.to_owned(),
            service,
            request_id,
            timestamp_us,
            payload: body.to_vec().into(),
        };
        *out = Box::into_raw(Box::new(AmeshEnvelope(env)));
        AmeshStatus::Ok
    })
}

/// # Safety
/// `env` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn amesh_envelope_free(env: *mut AmeshEnvelope) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live envelope handle.
#[no_mangle]
pub unsafe extern "C" fn amesh_envelope_kind(env: *const AmeshEnvelope) -> u8 {
    env.as_ref().map_or(u8::MAX, |e| e.0.kind.code())
}

/// # Safety
/// `env` must be a live envelope handle.
#[no_mangle]
pub unsafe extern "C" fn amesh_envelope_service(env: *const AmeshEnvelope) -> u8 {
    env.as_ref().map_or(u8::MAX, |e| e.0.service.code())
}

/// # Safety
/// `env` must be a live envelope handle.
#[no_mangle]
pub unsafe extern "C" fn amesh_envelope_request_id(env: *const AmeshEnvelope) -> u64 {
    env.as_ref().map_or(0, |e| e.0.request_id)
}

/// # Safety
/// `env` must be a live envelope handle.
#[no_mangle]
pub unsafe extern "C" fn amesh_envelope_timestamp_us(env: *const AmeshEnvelope) -> u64 {
    env.as_ref().map_or(0, |e| e.0.timestamp_us)
}

/// Session id bytes (UTF-8, not NUL-terminated), owned by the handle.
///
/// # Safety
/// `env` must be a live envelope handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amesh_envelope_session_id(env: *const AmeshEnvelope, len: *mut usize) -> *const u8 {
    match (env.as_ref(), len.as_mut()) {
        (Some(e), Some(len)) => {
            *len = e.0.session_id.len();
            e.0.session_id.as_ptr()
        }
        _ => ptr::null(),
    }
}

/// Payload bytes, owned by the handle.
///
/// # Safety
/// `env` must be a live envelope handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amesh_envelope_payload(env: *const AmeshEnvelope, len: *mut usize) -> *const u8 {
    match (env.as_ref(), len.as_mut()) {
        (Some(e), Some(len)) => {
            *len = e.0.payload.len();
            e.0.payload.as_ptr()
        }
        _ => ptr::null(),
    }
}

/// Encodes `env` into a new buffer, released with [`amesh_bytes_free`].
///
/// # Safety
/// `env` must be a live handle; `out` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amesh_encode(env: *const AmeshEnvelope, out: *mut *mut u8, out_len: *mut usize) -> AmeshStatus {
    guard(|| {
        let (Some(env), false, false) = (env.as_ref(), out.is_null(), out_len.is_null()) else {
            return fail(AmeshStatus::NullPointer, "null argument");
        };
        match wire::encode(&env.0) {
            Ok(bytes) => {
                let boxed = bytes.into_boxed_slice();
                *out_len = boxed.len();
                *out = Box::into_raw(boxed).cast();
                AmeshStatus::Ok
            }
            Err(e) => fail(AmeshStatus::Oversize, e.to_string()),
        }
    })
}

/// # Safety
/// `data`/`len` must come from [`amesh_encode`]. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn amesh_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// Decodes the first frame of `data`. On success `*out` holds a new handle
/// and `*consumed` the frame length.
///
/// # Safety
/// `data` must be valid for `len` bytes; `out` and `consumed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amesh_decode(
    data: *const u8,
    len: usize,
    out: *mut *mut AmeshEnvelope,
    consumed: *mut usize,
) -> AmeshStatus {
    guard(|| {
        if out.is_null() || consumed.is_null() {
            return fail(AmeshStatus::NullPointer, "null out-pointer");
        }
        let Some(bytes) = bytes_in(data, len) else {
            return fail(AmeshStatus::NullPointer, "null buffer with non-zero length");
        };
        match wire::decode(bytes) {
            Ok((env, used)) => {
                *consumed = used;
                *out = Box::into_raw(Box::new(AmeshEnvelope(env)));
                AmeshStatus::Ok
            }
            Err(e) => fail(decode_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `values` must be valid for `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amesh_harmonic_mean(values: *const f64, len: usize, out: *mut f64) -> AmeshStatus {
    guard(|| {
        let (Some(values), false) = (bytes_in(values, len), out.is_null()) else {
            return fail(AmeshStatus::NullPointer, "null argument");
        };
        match harmonic_mean(values) {
            Ok(v) => {
                *out = v;
                AmeshStatus::Ok
            }
            Err(e) => fail(stats_status(e), e.to_string()),
        }
    })
}

/// `(baseline - candidate) / baseline`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amesh_performance_rate(baseline_ms: f64, candidate_ms: f64, out: *mut f64) -> AmeshStatus {
    guard(|| {
        if out.is_null() {
            return fail(AmeshStatus::NullPointer, "out is null");
        }
        match performance_rate(baseline_ms, candidate_ms) {
            Ok(v) => {
                *out = v;
                AmeshStatus::Ok
            }
            Err(e) => fail(stats_status(e), e.to_string()),
        }
    })
}

/// An in-process demo server with its own runtime.
pub struct AmeshServer {
    runtime: tokio::runtime::Runtime,
    server: DemoServer,
    endpoint: CString,
}

/// Starts the conversational pipeline demo on `127.0.0.1:port` (0 picks a
/// free port). `remote` serves the mock components from broker workers.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn amesh_server_start(port: u16, remote: bool, out: *mut *mut AmeshServer) -> AmeshStatus {
    guard(|| {
        if out.is_null() {
            return fail(AmeshStatus::NullPointer, "out is null");
        }
        let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => return fail(AmeshStatus::Io, e.to_string()),
        };
        let config = ServerConfig { port, ..Default::default() };
        let mode = if remote { Mode::Remote } else { Mode::Local };
        let server = match runtime.block_on(DemoServer::start(mode, PIPELINE_RULES, &config)) {
            Ok(s) => s,
            Err(e) => return fail(AmeshStatus::Io, e.to_string()),
        };
        let endpoint = CString::new(server.endpoint()).unwrap_or_default();
        *out = Box::into_raw(Box::new(AmeshServer { runtime, server, endpoint }));
        AmeshStatus::Ok
    })
}

/// `tcp://host:port`, owned by the handle.
///
/// # Safety
/// `server` must be a live server handle.
#[no_mangle]
pub unsafe extern "C" fn amesh_server_endpoint(server: *const AmeshServer) -> *const c_char {
    server.as_ref().map_or(ptr::null(), |s| s.endpoint.as_ptr())
}

/// Stops the server and releases the handle. Null is ignored.
///
/// # Safety
/// `server` must come from [`amesh_server_start`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn amesh_server_stop(server: *mut AmeshServer) {
    if server.is_null() {
        return;
    }
    let s = Box::from_raw(server);
    s.runtime.block_on(s.server.shutdown());
    s.runtime.shutdown_timeout(std::time::Duration::from_secs(1));
}
