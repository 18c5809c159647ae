//! `DTT1` flat tensor files: the magic `DTT1`, little-endian `u32` height,
//! width and channels, then `H * W * D` little-endian `f64` values with the
//! channel index fastest.

use std::fs;
use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

pub const DTT_MAGIC: &[u8; 4] = b"DTT1";
const HEADER_LEN: usize = 16;

pub fn encode_dtt(map: &FeatureMap) -> Vec<u8> {
    let (h, w, d) = map.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * map.len());
    out.extend_from_slice(DTT_MAGIC);
    for dim in [h, w, d] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a `DTT1` buffer. `origin` only labels errors.
pub fn decode_dtt(bytes: &[u8], origin: &Path) -> Result<FeatureMap> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(origin, "truncated header"));
    }
    if &bytes[..4] != DTT_MAGIC {
        return Err(Error::format(
            origin,
            format!("bad magic bytes {:?}", &bytes[..4]),
        ));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, d) = (dim(0), dim(1), dim(2));
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::format(origin, "dimension overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 8 {
        return Err(Error::format(
            origin,
            format!(
                "expected {} payload bytes for {h}x{w}x{d}, found {}",
                count * 8,
                body.len()
            ),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(origin, format!("non-finite value at element {pos}")));
    }
    FeatureMap::from_vec(h, w, d, data)
}

pub fn write_dtt(path: &Path, map: &FeatureMap) -> Result<()> {
    fs::write(path, encode_dtt(map)).map_err(|e| Error::io(path, e))
}

pub fn read_dtt(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dtt(&bytes, path)
}
