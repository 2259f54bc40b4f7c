//! Canonical JSON encoding (RFC 8785 subset).
//!
//! Object members are sorted by their UTF-16 code-unit sequence, no
//! insignificant whitespace is emitted, and strings use the ECMAScript
//! escaping rules. Numbers are restricted to integers so that the
//! shortest-form number serialization is plain decimal.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("floating-point value {0} is not permitted in canonical payloads")]
    FloatingPoint(String),
    #[error("value could not be converted to JSON: {0}")]
    Serialize(String),
}

/// Canonical bytes for an already-built JSON value.
pub fn canonical_bytes(value: &Value) -> Result<Vec<u8>, CanonicalError> {
    let mut out = String::new();
    write_value(value, &mut out)?;
    Ok(out.into_bytes())
}

/// Canonical bytes for any serializable value.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let v = serde_json::to_value(value).map_err(|e| CanonicalError::Serialize(e.to_string()))?;
    canonical_bytes(&v)
}

/// Lowercase hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_value(value: &Value, out: &mut String) -> Result<(), CanonicalError> {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                write!(out, "{i}").expect("write to String");
            } else if let Some(u) = n.as_u64() {
                write!(out, "{u}").expect("write to String");
            } else {
                return Err(CanonicalError::FloatingPoint(n.to_string()));
            }
        }
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.encode_utf16().cmp(b.0.encode_utf16()));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(k, out);
                out.push(':');
                write_value(v, out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

fn write_string(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\u{08}' => out.push_str("\\b"),
            '\u{0c}' => out.push_str("\\f"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                write!(out, "\\u{:04x}", c as u32).expect("write to String");
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_order_does_not_matter() {
        let a: Value = serde_json::from_str(r#"{"b":1,"a":2}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(canonical_bytes(&a).unwrap(), canonical_bytes(&b).unwrap());
        assert_eq!(canonical_bytes(&a).unwrap(), br#"{"a":2,"b":1}"#);
    }

    #[test]
    fn empty_object() {
        assert_eq!(canonical_bytes(&json!({})).unwrap(), b"{}");
    }

    #[test]
    fn floats_rejected() {
        let err = canonical_bytes(&json!({"rs": 1.5})).unwrap_err();
        assert!(matches!(err, CanonicalError::FloatingPoint(_)));
    }

    #[test]
    fn nested_and_escaped() {
        let v = json!({"z": [true, null, -3], "a": {"y": "q\"\n\u{1}", "x": "é"}});
        assert_eq!(
            String::from_utf8(canonical_bytes(&v).unwrap()).unwrap(),
            "{\"a\":{\"x\":\"é\",\"y\":\"q\\\"\\n\\u0001\"},\"z\":[true,null,-3]}"
        );
    }

    #[test]
    fn utf16_key_ordering() {
        // U+E000 sorts after U+1F600 in UTF-8 byte order but before it in UTF-16.
        let v = json!({"\u{1F600}": 1, "\u{E000}": 2});
        let s = String::from_utf8(canonical_bytes(&v).unwrap()).unwrap();
        assert_eq!(s, "{\"\u{1F600}\":1,\"\u{E000}\":2}");
    }
}
