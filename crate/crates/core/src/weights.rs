//! Weight files: one line of compact JSON header, a newline, then the
//! parameters as a flat little-endian IEEE-754 `f64` array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub kind: String,
    /// `(name, shape, dilation)` per layer, in storage order.
    pub layers: Vec<(String, Vec<usize>, usize)>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleParams>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode(header: &WeightHeader, values: &[f64]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(WeightHeader, Vec<f64>)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("weight file has no header line".into()))?;
    let header: WeightHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Parse(format!("weight header: {e}")))?;
    let body = &bytes[split + 1..];
    if !body.len().is_multiple_of(8) {
        return Err(Error::Parse(
            "weight payload is not a whole number of f64 values".into(),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect::<Vec<_>>();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "weight file contains non-finite values".into(),
        ));
    }
    Ok((header, values))
}

pub fn write(path: impl AsRef<Path>, header: &WeightHeader, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(header, values)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<(WeightHeader, Vec<f64>)> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_is_little_endian_f64() {
        let header = WeightHeader {
            kind: "t".into(),
            layers: vec![("a".into(), vec![2], 1)],
            seed: 3,
            vocab: None,
            schedule: None,
            extra: serde_json::Value::Null,
        };
        let bytes = encode(&header, &[1.0, -0.5]);
        let body = &bytes[bytes.iter().position(|&b| b == b'\n').unwrap() + 1..];
        assert_eq!(&body[..8], &1.0f64.to_le_bytes());
        assert_eq!(&body[8..], &(-0.5f64).to_le_bytes());
        let (h, v) = decode(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(v, vec![1.0, -0.5]);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
