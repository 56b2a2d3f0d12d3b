use std::ffi::CStr;
use std::path::Path;
use std::ptr;

use amesh::wire::{self, MessageEnvelope, MsgKind, ServiceType};
use amesh_ffi::*;

fn envelope(kind: u8, service: u8, sid: &[u8], payload: &[u8]) -> (AmeshStatus, *mut AmeshEnvelope) {
    let mut out = ptr::null_mut();
    let status =
        unsafe { amesh_envelope_new(kind, service, sid.as_ptr(), sid.len(), 9, 1234, payload.as_ptr(), payload.len(), &mut out) };
    (status, out)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(amesh_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn encode_matches_the_core_codec() {
    let (status, env) = envelope(2, 1, b"s-bob", b"{\"a\":1}");
    assert_eq!(status, AmeshStatus::Ok);
    let mut data = ptr::null_mut();
    let mut len = 0;
    assert_eq!(unsafe { amesh_encode(env, &mut data, &mut len) }, AmeshStatus::Ok);
    let bytes = unsafe { std::slice::from_raw_parts(data, len) }.to_vec();

    let core = MessageEnvelope {
        kind: MsgKind::Request,
        service: ServiceType::Nlu,
        session_id: "s-bob".into(),
        request_id: 9,
        timestamp_us: 1234,
        payload: b"{\"a\":1}".to_vec().into(),
    };
    assert_eq!(bytes, wire::encode(&core).unwrap());
    unsafe {
        amesh_bytes_free(data, len);
        amesh_envelope_free(env);
    }
}

#[test]
fn decode_exposes_every_field() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    let frame = std::fs::read(golden.join("38_session_unicode.bin")).unwrap();
    let expected = wire::decode_exact(&frame).unwrap();
    let mut env = ptr::null_mut();
    let mut used = 0;
    assert_eq!(unsafe { amesh_decode(frame.as_ptr(), frame.len(), &mut env, &mut used) }, AmeshStatus::Ok);
    assert_eq!(used, frame.len());
    unsafe {
        assert_eq!(amesh_envelope_kind(env), expected.kind.code());
        assert_eq!(amesh_envelope_service(env), expected.service.code());
        assert_eq!(amesh_envelope_request_id(env), expected.request_id);
        assert_eq!(amesh_envelope_timestamp_us(env), expected.timestamp_us);
        let mut n = 0;
        let sid = amesh_envelope_session_id(env, &mut n);
        assert_eq!(std::slice::from_raw_parts(sid, n), expected.session_id.as_bytes());
        let body = amesh_envelope_payload(env, &mut n);
        assert_eq!(std::slice::from_raw_parts(body, n), &expected.payload[..]);
        amesh_envelope_free(env);
    }
}

#[test]
fn errors_map_to_codes() {
    assert_eq!(envelope(99, 0, b"", b"").0, AmeshStatus::UnknownKind);
    assert!(last_error().contains("msg_kind"));
    assert_eq!(envelope(0, 99, b"", b"").0, AmeshStatus::UnknownService);
    assert_eq!(envelope(0, 0, &[0xff, 0xfe], b"").0, AmeshStatus::InvalidArgument);
    assert_eq!(envelope(0, 0, &[b'x'; 256], b"").0, AmeshStatus::Oversize);

    let mut env = ptr::null_mut();
    let mut used = 0;
    let bad = b"NOPE-not-a-frame-at-all-really-no";
    assert_eq!(unsafe { amesh_decode(bad.as_ptr(), bad.len(), &mut env, &mut used) }, AmeshStatus::BadFrame);
    assert_eq!(unsafe { amesh_decode(b"AMF1".as_ptr(), 4, &mut env, &mut used) }, AmeshStatus::Truncated);
    assert_eq!(unsafe { amesh_decode(ptr::null(), 5, &mut env, &mut used) }, AmeshStatus::NullPointer);
    assert_eq!(unsafe { amesh_encode(ptr::null(), ptr::null_mut(), ptr::null_mut()) }, AmeshStatus::NullPointer);
    // Freeing null is a no-op.
    unsafe {
        amesh_envelope_free(ptr::null_mut());
        amesh_bytes_free(ptr::null_mut(), 0);
        amesh_server_stop(ptr::null_mut());
    }
}

#[test]
fn statistics() {
    let mut out = 0.0;
    let values = [29.0, 12.0];
    assert_eq!(unsafe { amesh_harmonic_mean(values.as_ptr(), 2, &mut out) }, AmeshStatus::Ok);
    let oracle = 2.0 / (1.0 / 29.0 + 1.0 / 12.0);
    assert!((out - oracle).abs() < 1e-12);
    assert_eq!(unsafe { amesh_harmonic_mean(values.as_ptr(), 0, &mut out) }, AmeshStatus::EmptyInput);
    let neg = [1.0, -1.0];
    assert_eq!(unsafe { amesh_harmonic_mean(neg.as_ptr(), 2, &mut out) }, AmeshStatus::NonPositiveValue);

    assert_eq!(unsafe { amesh_performance_rate(29.0, 12.0, &mut out) }, AmeshStatus::Ok);
    assert!((out - 0.5862).abs() < 5e-5);
    assert_eq!(unsafe { amesh_performance_rate(738.0, 147.0, &mut out) }, AmeshStatus::Ok);
    assert!((out - 0.8008).abs() < 5e-5);
    assert_eq!(unsafe { amesh_performance_rate(0.0, 1.0, &mut out) }, AmeshStatus::NonPositiveBaseline);
}

#[test]
fn embedded_server_accepts_connections() {
    let mut server = ptr::null_mut();
    assert_eq!(unsafe { amesh_server_start(0, false, &mut server) }, AmeshStatus::Ok, "{}", last_error());
    let endpoint = unsafe { CStr::from_ptr(amesh_server_endpoint(server)) }.to_str().unwrap().to_owned();
    assert!(endpoint.starts_with("tcp://127.0.0.1:"));
    let addr = endpoint.trim_start_matches("tcp://");
    assert!(std::net::TcpStream::connect(addr).is_ok());
    unsafe { amesh_server_stop(server) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(amesh_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
