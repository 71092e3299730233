//! `QDT1` tensor files: magic `QDT1`, `u32` ndim, `u32` dims, then a
//! little-endian float32 row-major payload.

use std::fs;
use std::path::Path;

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QDT1";

/// Raw decoded tensor of any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<RawTensor, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("bad magic (expected QDT1)".into());
    }
    let word = |at: usize| -> std::result::Result<u32, String> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| "truncated header".to_string())
    };
    let ndim = word(4)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        dims.push(word(8 + 4 * k)? as usize);
    }
    let header = 8 + 4 * ndim;
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * count {
        return Err(format!(
            "payload size mismatch: dims {dims:?} need {} bytes, found {}",
            4 * count,
            payload.len()
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format!("non-finite value at flat index {i}"));
    }
    Ok(RawTensor { dims, data })
}

pub fn mat_to_f32(m: &Mat) -> Vec<f32> {
    m.iter().map(|&v| v as f32).collect()
}

/// Writes a 2-D array. Values are narrowed to float32.
pub fn write_tensor(path: &Path, m: &Mat) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Tensor {
            path: path.into(),
            message: "refusing to write non-finite values".into(),
        });
    }
    let bytes = encode(&[m.nrows(), m.ncols()], &mat_to_f32(m));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<RawTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|message| Error::Tensor {
        path: path.into(),
        message,
    })
}

/// Reads a 2-D array; a 1-D file is returned as a single row.
pub fn read_tensor(path: &Path) -> Result<Mat> {
    let raw = read_raw(path)?;
    let (r, c) = match raw.dims.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => {
            return Err(Error::Tensor {
                path: path.into(),
                message: format!("expected a 2-D tensor, found dims {other:?}"),
            })
        }
    };
    let data: Vec<f64> = raw.data.iter().map(|&v| v as f64).collect();
    Ok(Mat::from_shape_vec((r, c), data).expect("dims checked"))
}
