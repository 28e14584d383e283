//! Base64 little-endian encoding of float arrays for JSON artifacts.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serializer};

pub fn encode_f32(values: &[f32]) -> String {
    let mut raw = Vec::with_capacity(values.len() * 4);
    for v in values {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(raw)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>, String> {
    let raw = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if raw.len() % 4 != 0 {
        return Err("payload not a multiple of 4 bytes".into());
    }
    Ok(raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn encode_f64(values: &[f64]) -> String {
    let mut raw = Vec::with_capacity(values.len() * 8);
    for v in values {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(raw)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>, String> {
    let raw = STANDARD.decode(text).map_err(|e| e.to_string())?;
    if raw.len() % 8 != 0 {
        return Err("payload not a multiple of 8 bytes".into());
    }
    Ok(raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect())
}

/// `#[serde(with = "crate::codec::b64")]` for `Vec<f32>` fields.
pub mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode_f32(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        let text = String::deserialize(d)?;
        decode_f32(&text).map_err(serde::de::Error::custom)
    }
}

/// Same for `Vec<f64>` fields.
pub mod b64_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode_f64(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        decode_f64(&text).map_err(serde::de::Error::custom)
    }
}
