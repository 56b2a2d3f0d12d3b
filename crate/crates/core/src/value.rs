//! Schema-free structured values carried on blackboards and in envelope payloads.
//!
//! Values travel as canonical JSON text: object keys sorted, no insignificant
//! whitespace. An empty payload decodes to `null`.

use bytes::Bytes;
pub use serde_json::{json, Map, Value};

pub fn to_payload(value: &Value) -> Bytes {
    if value.is_null() {
        return Bytes::new();
    }
    Bytes::from(canonical_text(value))
}

pub fn from_payload(payload: &[u8]) -> Result<Value, serde_json::Error> {
    if payload.is_empty() {
        return Ok(Value::Null);
    }
    serde_json::from_slice(payload)
}

pub fn canonical_text(value: &Value) -> String {
    // serde_json's default map is ordered, so this is already canonical.
    serde_json::to_string(value).expect("Value serialization is infallible")
}

/// Follows a dotted field path; missing fields and non-object hops yield `None`.
pub fn project<'a>(value: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(value, |current, field| match current {
        Value::Object(map) => map.get(field),
        Value::Array(items) => field.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => None,
    })
}

/// Text view of a value used when a component expects an utterance.
pub fn as_text(value: &Value) -> Option<&str> {
    match value {
        Value::String(s) => Some(s),
        Value::Object(map) => ["utterance", "text", "bytes"]
            .iter()
            .find_map(|k| map.get(*k).and_then(Value::as_str)),
        _ => None,
    }
}
