//! "AKSP" parameter checkpoints.
//!
//! Layout: magic, u32 version, u32 tensor count; per tensor a u16 name length, UTF-8
//! name, u8 rank, u32 dims and f32 data, all little-endian.

use std::fs;
use std::path::Path;

use akspace_autodiff::{ParamSet, Tensor};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"AKSP";
pub const VERSION: u32 = 1;

pub fn encode_params(params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        if !t.all_finite() {
            return Err(CoreError::Invalid(format!("parameter {name} is not finite")));
        }
        let name_len = u16::try_from(name.len())
            .map_err(|_| CoreError::Invalid(format!("parameter name {name} too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamSet<f32>> {
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(CoreError::format(path, "truncated checkpoint"));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(CoreError::format(path, "bad magic, expected AKSP"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(CoreError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = u32_at(take(4)?);
    let mut params = ParamSet::new();
    for _ in 0..count {
        let b = take(2)?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| CoreError::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let data = take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| CoreError::format(path, e.to_string()))?;
        params
            .push(&name, tensor)
            .map_err(|e| CoreError::format(path, e.to_string()))?;
    }
    if !cursor.is_empty() {
        return Err(CoreError::format(path, "trailing bytes after checkpoint"));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    fs::write(path, encode_params(params)?).map_err(|e| CoreError::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_params(&bytes, path)
}
