//! JSON-Lines dataset persistence: one sample object per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, Dataset, Sample};

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        for sample in dataset {
            let line = serde_json::to_string(sample).map_err(|e| DataError::Parse {
                line: 0,
                message: format!("encode: {e}"),
            })?;
            f.write_all(line.as_bytes()).map_err(io_err)?;
            f.write_all(b"\n").map_err(io_err)?;
        }
        f.flush().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let raw = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}
