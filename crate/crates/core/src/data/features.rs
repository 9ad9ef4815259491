//! Binary per-segment feature files.
//!
//! Layout: magic `DMNF`, version byte, `N: u32`, `D: u32`, then `N·D`
//! little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMNF";
pub const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 4 + 4;

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.rank() != 2 || features.rows() == 0 {
        return Err(Error::Dimension(format!(
            "features must be [N × D], got {:?}",
            features.shape()
        )));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * features.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a DMNF feature file (bad magic)".into()));
    }
    if bytes.len() < HEADER {
        return Err(Error::Length {
            expected: HEADER,
            actual: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported feature version {}", bytes[4])));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(Error::Format("feature file has no segments".into()));
    }
    let expected = HEADER + 4 * n * d;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![n, d], data)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Resolution {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_features(&bytes)
}

pub fn save_features(features: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_features(features)?)?;
    Ok(())
}

/// Confirm that `path` exists and holds a well-formed feature file.
pub fn validate(path: &Path) -> Result<()> {
    load_features(path).map(|_| ())
}
