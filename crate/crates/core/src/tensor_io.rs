//! "AKT1" raw tensor files: magic, u32 LE rank, u32 LE dims, f32 LE row-major values.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::kspace::{ComplexImage, Domain, RealGrid};

const MAGIC: &[u8; 4] = b"AKT1";

/// Shape plus f32 values as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RawTensor> {
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(CoreError::format(path, "truncated tensor file"));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(CoreError::format(path, "bad magic, expected AKT1"));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let rank = read_u32(take(4)?);
    if rank > 8 {
        return Err(CoreError::format(path, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(take(4)?));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CoreError::format(path, "shape overflows"))?;
    let payload = take(count.checked_mul(4).ok_or_else(|| CoreError::format(path, "shape overflows"))?)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if !cursor.is_empty() {
        return Err(CoreError::format(path, "trailing bytes after tensor data"));
    }
    Ok(RawTensor { shape, data })
}

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    fs::write(path, encode(shape, data)).map_err(|e| CoreError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes, path)
}

/// Writes a real grid as a rank-2 tensor.
pub fn write_grid(path: &Path, grid: &RealGrid) -> Result<()> {
    let data: Vec<f32> = grid.data().iter().map(|&v| v as f32).collect();
    write_tensor(path, &[grid.size(), grid.size()], &data)
}

pub fn read_grid(path: &Path) -> Result<RealGrid> {
    let t = read_tensor(path)?;
    if t.shape.len() != 2 {
        return Err(CoreError::format(path, format!("expected rank 2, got {:?}", t.shape)));
    }
    RealGrid::new(t.shape[0], t.shape[1], t.data.iter().map(|&v| v as f64).collect())
}

/// Writes a complex image as a `[2, N, N]` tensor (real plane, then imaginary plane).
pub fn write_complex(path: &Path, img: &ComplexImage) -> Result<()> {
    let n = img.size();
    let data: Vec<f32> = img.planes().iter().map(|&v| v as f32).collect();
    write_tensor(path, &[2, n, n], &data)
}

pub fn read_complex(path: &Path, domain: Domain) -> Result<ComplexImage> {
    let t = read_tensor(path)?;
    if t.shape.len() != 3 || t.shape[0] != 2 || t.shape[1] != t.shape[2] {
        return Err(CoreError::format(path, format!("expected [2, N, N], got {:?}", t.shape)));
    }
    let planes: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
    ComplexImage::from_planes(t.shape[1], &planes, domain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bytes() {
        let data = [1.5f32, -2.0, 0.25, 7.0, 0.0, -0.0];
        let bytes = encode(&[2, 3], &data);
        assert_eq!(&bytes[..4], b"AKT1");
        let t = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(t.shape, vec![2, 3]);
        assert_eq!(t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, Path::new("m")).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long, Path::new("m")).is_err());
    }
}
