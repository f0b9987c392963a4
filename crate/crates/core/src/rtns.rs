//! `RTNS` tensor files and activation manifests.
//!
//! Layout: magic `RTNS`, `u8` version (1), `u8` dtype (1 = f32, 2 = f64),
//! `u8` ndim, one zero padding byte, `ndim` little-endian `u64` dims, then
//! the row-major little-endian payload. Rank-1 tensors load as a single row.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};
use crate::tensor::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"RTNS";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(PruneError::Format(format!("unknown dtype {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(m: &DenseMatrix, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 + m.data().len() * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, dtype as u8, 2, 0]);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<DenseMatrix> {
    let mut r = bytes;
    let mut head = [0u8; 8];
    r.read_exact(&mut head)
        .map_err(|_| PruneError::Format("truncated header".into()))?;
    if head[..4] != MAGIC {
        return Err(PruneError::Format("bad magic".into()));
    }
    if head[4] != VERSION {
        return Err(PruneError::Format(format!(
            "unsupported version {}",
            head[4]
        )));
    }
    let dtype = DType::from_byte(head[5])?;
    let ndim = head[6] as usize;
    if !(1..=2).contains(&ndim) {
        return Err(PruneError::Format(format!("unsupported rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)
            .map_err(|_| PruneError::Format("truncated dims".into()))?;
        dims.push(
            usize::try_from(u64::from_le_bytes(d))
                .map_err(|_| PruneError::Format("dimension too large".into()))?,
        );
    }
    let (rows, cols) = if ndim == 1 {
        (1, dims[0])
    } else {
        (dims[0], dims[1])
    };
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| PruneError::Format("dimension overflow".into()))?;
    let w = dtype.width();
    if r.len() != count * w {
        return Err(PruneError::Format(format!(
            "payload has {} bytes, expected {}",
            r.len(),
            count * w
        )));
    }
    let data = r
        .chunks_exact(w)
        .map(|c| match dtype {
            DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    DenseMatrix::new(rows, cols, data)
}

pub fn read_tensor(path: &Path) -> Result<DenseMatrix> {
    decode(&fs::read(path)?)
}

/// Writes `m` as f64 via a temporary file in the same directory, then renames.
pub fn write_tensor(path: &Path, m: &DenseMatrix) -> Result<()> {
    write_atomic(path, &encode(m, DType::F64))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| PruneError::Io(e.error))?;
    Ok(())
}

/// Ordered list of activation batch files. Relative paths resolve against
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationManifest {
    pub batches: Vec<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<DenseMatrix>> {
    let manifest: ActivationManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.batches.is_empty() {
        return Err(PruneError::InvalidConfig(format!(
            "manifest {} lists no batches",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    manifest
        .batches
        .iter()
        .map(|p| read_tensor(&base.join(p)))
        .collect()
}
