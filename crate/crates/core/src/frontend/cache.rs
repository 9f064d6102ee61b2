//! Feature cache: `"BWF1"`, `u32` rows, `u32` columns, then rows x columns
//! little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::{FeatureMatrix, FrontendError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"BWF1";

pub fn encode_feature_cache(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * f.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(f.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(f.n_frames as u32).to_le_bytes());
    for &v in &f.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_cache(bytes: &[u8], frame_shift: f64) -> Result<FeatureMatrix> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(FrontendError::Format("feature cache magic is not BWF1".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * rows * cols {
        return Err(FrontendError::Format(format!(
            "feature cache holds {} bytes of values, header says {rows}x{cols}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureMatrix::new(rows, cols, values, frame_shift)
}

pub fn write_feature_cache(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_cache(f))
        .map_err(|source| FrontendError::Io { path: path.display().to_string(), source })
}

/// Reads a cache file; the frame shift is not stored and defaults to 10 ms.
pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|source| FrontendError::Io { path: path.display().to_string(), source })?;
    decode_feature_cache(&bytes, 0.010)
}
