//! Canonical JSON: lexicographically sorted keys, no insignificant whitespace, UTF-8.
//!
//! Every document that is hashed, logged or put on the wire goes through here so
//! that independent implementations agree on the exact bytes.

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Serializes `value` in canonical form.
///
/// Structs are first lowered to a [`serde_json::Value`], whose object map is a
/// `BTreeMap` (the `preserve_order` feature is never enabled in this workspace),
/// so keys come out sorted regardless of field declaration order.
pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    let value = serde_json::to_value(value)?;
    serde_json::to_vec(&value)
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

pub fn from_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}
