//! Dense matrix files.
//!
//! ```text
//! magic     4 bytes  "Z2FD"
//! version   u32
//! dtype     u8       1 = f64, 2 = u32
//! rank      u8
//! extents   rank x u64
//! payload   row-major, little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"Z2FD";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_U32: u8 = 2;

/// Contents of a matrix file.
#[derive(Debug, Clone, PartialEq)]
pub enum Matrix {
    F64(Array),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl Matrix {
    pub fn shape(&self) -> &[usize] {
        match self {
            Matrix::F64(a) => a.shape(),
            Matrix::U32 { shape, .. } => shape,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (dtype, shape) = match self {
            Matrix::F64(a) => (DTYPE_F64, a.shape()),
            Matrix::U32 { shape, .. } => (DTYPE_U32, shape.as_slice()),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype);
        out.push(u8::try_from(shape.len()).expect("rank fits in a byte"));
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match self {
            Matrix::F64(a) => a.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Matrix::U32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = || Error::Truncated { path: path.into() };
        let format = |message: String| Error::Format {
            path: path.into(),
            message,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        if bytes.len() < 10 {
            return Err(truncated());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        let dtype = bytes[8];
        let rank = bytes[9] as usize;
        let mut pos = 10;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes.get(pos..pos + 8).ok_or_else(truncated)?;
            shape.push(usize::try_from(u64::from_le_bytes(chunk.try_into().expect("8 bytes"))).map_err(|_| truncated())?);
            pos += 8;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(truncated)?;
        let width = match dtype {
            DTYPE_F64 => 8,
            DTYPE_U32 => 4,
            other => return Err(format(format!("unknown dtype code {other}"))),
        };
        let end = n.checked_mul(width).and_then(|b| b.checked_add(pos)).ok_or_else(truncated)?;
        if bytes.len() < end {
            return Err(truncated());
        }
        if bytes.len() > end {
            return Err(format("trailing bytes after payload".into()));
        }
        let payload = &bytes[pos..end];
        Ok(match dtype {
            DTYPE_F64 => Matrix::F64(Array::from_vec(
                shape,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )?),
            _ => Matrix::U32 {
                shape,
                data: payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            },
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads an f64 matrix of the given rank.
pub fn read_f64(path: &Path, rank: usize) -> Result<Array> {
    match Matrix::read(path)? {
        Matrix::F64(a) if a.rank() == rank => Ok(a),
        m => Err(Error::Format {
            path: path.into(),
            message: format!("expected a rank-{rank} f64 matrix, found {}", describe(&m)),
        }),
    }
}

/// Reads a u32 matrix of the given rank.
pub fn read_u32(path: &Path, rank: usize) -> Result<(Vec<usize>, Vec<u32>)> {
    match Matrix::read(path)? {
        Matrix::U32 { shape, data } if shape.len() == rank => Ok((shape, data)),
        m => Err(Error::Format {
            path: path.into(),
            message: format!("expected a rank-{rank} u32 matrix, found {}", describe(&m)),
        }),
    }
}

fn describe(m: &Matrix) -> String {
    match m {
        Matrix::F64(a) => format!("f64 {:?}", a.shape()),
        Matrix::U32 { shape, .. } => format!("u32 {shape:?}"),
    }
}
