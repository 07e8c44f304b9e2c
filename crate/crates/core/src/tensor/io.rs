//! SCAT v1 tensor files.
//!
//! Layout: magic `SCAT`, version byte `1`, rank byte, `rank` little-endian
//! `u32` extents, then the row-major payload as little-endian `f32`.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCAT";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a SCAT v1 buffer; `origin` is only used in error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing SCAT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = numel
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(header));
    if expected != Some(bytes.len()) {
        return Err(bad(format!(
            "payload length {} does not match shape {shape:?}",
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
