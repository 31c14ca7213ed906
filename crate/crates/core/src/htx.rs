//! The HTX1 tensor container.
//!
//! Layout: the four magic bytes `HTX1`, one `u8` rank, `rank` little-endian
//! `u32` extents, then the values as little-endian `f32` in row-major order.
//! Nothing may follow the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"HTX1";

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::Format("missing HTX1 magic".into()))?;
    let (&rank, mut rest) = rest
        .split_first()
        .ok_or_else(|| Error::Format("missing rank byte".into()))?;
    let rank = rank as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let (ext, tail) =
            split_u32(rest).ok_or_else(|| Error::Format("truncated extents".into()))?;
        shape.push(ext as usize);
        rest = tail;
    }
    let n = numel(&shape).map_err(|_| Error::Format(format!("extents {shape:?} overflow")))?;
    let expected = n
        .checked_mul(4)
        .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
    if rest.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, extents {shape:?} need {expected}",
            rest.len()
        )));
    }
    let data = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

fn split_u32(bytes: &[u8]) -> Option<(u32, &[u8])> {
    if bytes.len() < 4 {
        return None;
    }
    let (head, tail) = bytes.split_at(4);
    Some((
        u32::from_le_bytes([head[0], head[1], head[2], head[3]]),
        tail,
    ))
}

pub fn write(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
