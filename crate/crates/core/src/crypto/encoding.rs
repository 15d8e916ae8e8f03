//! Canonical message encoding.
//!
//! Every signed or transmitted message is encoded as a 4-byte ASCII domain
//! tag followed by minified JSON with lexicographically sorted object keys.
//! Byte strings are lowercase hex; integers are plain base-10 numbers. Any
//! implementation that follows these rules produces identical bytes for
//! identical logical messages, which is what makes signatures portable.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::digest::{sha256, Digest};

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("unsupported message kind: {0}")]
    UnsupportedKind(String),
    #[error("message does not serialise to a JSON object")]
    NotAnObject,
    #[error("non-integral number in canonical message")]
    NonIntegral,
    #[error("domain tag mismatch: expected {expected}, found {found}")]
    TagMismatch { expected: String, found: String },
    #[error("payload shorter than a domain tag")]
    Truncated,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A message type with a fixed domain tag.
pub trait Canonical: Serialize {
    const TAG: [u8; 4];

    fn canonical_bytes(&self) -> Vec<u8> {
        canonical_encode(self).expect("protocol messages always encode")
    }

    fn canonical_digest(&self) -> Digest {
        sha256(&self.canonical_bytes())
    }
}

pub fn canonical_encode<T: Canonical + ?Sized>(msg: &T) -> Result<Vec<u8>, EncodingError> {
    encode_tagged(&T::TAG, msg)
}

/// Encodes an arbitrary serialisable value under `tag`.
pub fn encode_tagged<T: Serialize + ?Sized>(tag: &[u8; 4], msg: &T) -> Result<Vec<u8>, EncodingError> {
    // serde_json's default map is a BTreeMap, so going through `Value`
    // sorts keys at every nesting level.
    let value = serde_json::to_value(msg)?;
    if !value.is_object() {
        return Err(EncodingError::NotAnObject);
    }
    check_integral(&value)?;
    let mut out = Vec::with_capacity(128);
    out.extend_from_slice(tag);
    serde_json::to_writer(&mut out, &value)?;
    Ok(out)
}

fn check_integral(value: &Value) -> Result<(), EncodingError> {
    match value {
        Value::Number(n) if !(n.is_u64() || n.is_i64()) => Err(EncodingError::NonIntegral),
        Value::Array(items) => items.iter().try_for_each(check_integral),
        Value::Object(map) => map.values().try_for_each(check_integral),
        _ => Ok(()),
    }
}

pub fn canonical_decode<T: Canonical + DeserializeOwned>(bytes: &[u8]) -> Result<T, EncodingError> {
    let (tag, body) = split_tag(bytes)?;
    if tag != T::TAG {
        return Err(EncodingError::TagMismatch {
            expected: String::from_utf8_lossy(&T::TAG).into_owned(),
            found: String::from_utf8_lossy(&tag).into_owned(),
        });
    }
    Ok(serde_json::from_slice(body)?)
}

pub fn split_tag(bytes: &[u8]) -> Result<([u8; 4], &[u8]), EncodingError> {
    if bytes.len() < 4 {
        return Err(EncodingError::Truncated);
    }
    let tag = [bytes[0], bytes[1], bytes[2], bytes[3]];
    Ok((tag, &bytes[4..]))
}
