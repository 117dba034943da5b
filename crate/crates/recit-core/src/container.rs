//! Versioned binary container for named `f64` matrices with a JSON header.
//!
//! Layout: magic `RCTC`, little-endian `u32` version, `u32` header length,
//! the UTF-8 JSON header, then the raw row-major little-endian `f64` payload
//! of every matrix in header order. Writes go through a temp file and a
//! rename so readers never observe a partial file. Round trips are bitwise.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 4] = b"RCTC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    matrices: Vec<MatrixInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub matrices: Vec<(String, Array2<f64>)>,
}

impl Container {
    pub fn matrix(&self, name: &str) -> Option<&Array2<f64>> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_container(
    path: &Path,
    kind: &str,
    meta: &serde_json::Value,
    matrices: &[(String, &Array2<f64>)],
) -> Result<(), ContainerError> {
    let header = Header {
        kind: kind.to_string(),
        meta: meta.clone(),
        matrices: matrices
            .iter()
            .map(|(name, m)| MatrixInfo {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| ContainerError::Malformed(format!("header encode: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(MAGIC).map_err(io_err(&tmp))?;
        f.write_all(&VERSION.to_le_bytes()).map_err(io_err(&tmp))?;
        f.write_all(&(header_bytes.len() as u32).to_le_bytes())
            .map_err(io_err(&tmp))?;
        f.write_all(&header_bytes).map_err(io_err(&tmp))?;
        let mut buf = Vec::new();
        for (_, m) in matrices {
            buf.clear();
            buf.reserve(m.len() * 8);
            for &v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf).map_err(io_err(&tmp))?;
        }
        f.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_container(path: &Path) -> Result<Container, ContainerError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(io_err(path))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    f.read_exact(&mut word).map_err(io_err(path))?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(io_err(path))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| ContainerError::Malformed(format!("header decode: {e}")))?;

    let mut matrices = Vec::with_capacity(header.matrices.len());
    for info in &header.matrices {
        let count = info.rows * info.cols;
        let mut bytes = vec![0u8; count * 8];
        f.read_exact(&mut bytes).map_err(|_| {
            ContainerError::Malformed(format!("truncated payload for matrix {:?}", info.name))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let m = Array2::from_shape_vec((info.rows, info.cols), data)
            .map_err(|e| ContainerError::Malformed(format!("shape {e}")))?;
        matrices.push((info.name.clone(), m));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        matrices,
    })
}
