//! Canonical JSON: the single byte encoding used for hashing, chain dumps,
//! scenario configs and reports.
//!
//! Rules: object keys sorted bytewise, no insignificant whitespace, integers
//! in minimal decimal form, strings escaped minimally (only `"`, `\` and
//! control characters), UTF-8 output. Floats are rejected.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CanonicalError {
    #[error("non-canonical value at {path}: {reason}")]
    NonCanonicalValue { path: String, reason: String },
    #[error("malformed json: {0}")]
    Malformed(String),
    #[error("input is valid json but not in canonical form")]
    NotCanonicalForm,
}

impl CanonicalError {
    fn non_canonical(path: &str, reason: impl Into<String>) -> Self {
        CanonicalError::NonCanonicalValue {
            path: if path.is_empty() { "$".to_string() } else { path.to_string() },
            reason: reason.into(),
        }
    }
}

/// Encode a value tree to canonical bytes.
pub fn canonical_encode(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    let mut out = Vec::with_capacity(64);
    write_value(&mut out, value, &mut String::new())?;
    Ok(out)
}

/// Convenience wrapper over [`canonical_encode`] returning a `String`.
pub fn canonical_string(value: &Value) -> Result<String, CanonicalError> {
    // the writer only ever emits valid UTF-8
    canonical_encode(value).map(|b| String::from_utf8(b).expect("canonical output is utf-8"))
}

/// Serialize any serde type through the canonical encoder. Maps with
/// non-string keys are reported as `NonCanonicalValue`.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let v = serde_json::to_value(value).map_err(|e| CanonicalError::non_canonical("$", e.to_string()))?;
    canonical_encode(&v)
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String, CanonicalError> {
    to_canonical_bytes(value).map(|b| String::from_utf8(b).expect("canonical output is utf-8"))
}

/// Rejects values that cannot be canonically encoded without producing output.
pub fn check_canonical(value: &Value) -> Result<(), CanonicalError> {
    check(value, &mut String::new())
}

fn check(value: &Value, path: &mut String) -> Result<(), CanonicalError> {
    match value {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            Err(CanonicalError::non_canonical(path, format!("float {n} not allowed")))
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                check(item, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        Value::Object(map) => {
            for (k, v) in map {
                let len = path.len();
                path.push('.');
                path.push_str(k);
                check(v, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Parse JSON bytes without checking canonical form.
pub fn decode(bytes: &[u8]) -> Result<Value, CanonicalError> {
    serde_json::from_slice(bytes).map_err(|e| CanonicalError::Malformed(e.to_string()))
}

/// Parse bytes and require that they are exactly the canonical encoding of
/// the value they describe.
pub fn decode_strict(bytes: &[u8]) -> Result<Value, CanonicalError> {
    let value = decode(bytes)?;
    if canonical_encode(&value)? != bytes {
        return Err(CanonicalError::NotCanonicalForm);
    }
    Ok(value)
}

pub fn from_canonical_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CanonicalError> {
    let value = decode(bytes)?;
    check_canonical(&value)?;
    serde_json::from_value(value).map_err(|e| CanonicalError::Malformed(e.to_string()))
}

fn write_value(out: &mut Vec<u8>, value: &Value, path: &mut String) -> Result<(), CanonicalError> {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => {
            if let Some(i) = n.as_u64() {
                out.extend_from_slice(i.to_string().as_bytes());
            } else if let Some(i) = n.as_i64() {
                out.extend_from_slice(i.to_string().as_bytes());
            } else {
                return Err(CanonicalError::non_canonical(path, format!("float {n} not allowed")));
            }
        }
        Value::String(s) => write_string(out, s),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                write_value(out, item, path)?;
                path.truncate(len);
            }
            out.push(b']');
        }
        Value::Object(map) => write_object(out, map, path)?,
    }
    Ok(())
}

fn write_object(out: &mut Vec<u8>, map: &Map<String, Value>, path: &mut String) -> Result<(), CanonicalError> {
    // Map iteration order depends on serde_json features; sort explicitly.
    let mut entries: Vec<(&String, &Value)> = map.iter().collect();
    entries.sort_unstable_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    out.push(b'{');
    for (i, (k, v)) in entries.into_iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        write_string(out, k);
        out.push(b':');
        let len = path.len();
        path.push('.');
        path.push_str(k);
        write_value(out, v, path)?;
        path.truncate(len);
    }
    out.push(b'}');
    Ok(())
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.push(b'"');
    for ch in s.chars() {
        match ch {
            '"' => out.extend_from_slice(b"\\\""),
            '\\' => out.extend_from_slice(b"\\\\"),
            '\u{08}' => out.extend_from_slice(b"\\b"),
            '\u{0c}' => out.extend_from_slice(b"\\f"),
            '\n' => out.extend_from_slice(b"\\n"),
            '\r' => out.extend_from_slice(b"\\r"),
            '\t' => out.extend_from_slice(b"\\t"),
            c if (c as u32) < 0x20 => {
                out.extend_from_slice(format!("\\u{:04x}", c as u32).as_bytes());
            }
            c => {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
    }
    out.push(b'"');
}
