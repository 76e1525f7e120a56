//! Parameter checkpoints: one JSON manifest line, then little-endian f64 values.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

const FORMAT: &str = "brrl-params-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    entries: Vec<(String, usize, usize)>,
    /// Free-form metadata supplied by the caller.
    meta: serde_json::Value,
}

pub fn write_checkpoint(w: &mut impl Write, params: &ParameterSet, meta: serde_json::Value) -> Result<()> {
    let manifest = Manifest {
        format: FORMAT.into(),
        entries: params.iter().map(|(n, t)| (n.to_string(), t.rows(), t.cols())).collect(),
        meta,
    };
    let line = serde_json::to_string(&manifest).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for x in params.flat() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<(ParameterSet, serde_json::Value)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: Manifest = serde_json::from_str(line.trim_end()).map_err(|e| AutodiffError::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(AutodiffError::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    let mut params = ParameterSet::new();
    let mut buf = [0u8; 8];
    for (name, rows, cols) in manifest.entries {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf).map_err(|_| AutodiffError::Checkpoint(format!("truncated data in {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(name, Tensor::new(rows, cols, data)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(AutodiffError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((params, manifest.meta))
}

pub fn save(path: &Path, params: &ParameterSet, meta: serde_json::Value) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, params, meta)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterSet, serde_json::Value)> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut p = ParameterSet::new();
        p.push("w0", Tensor::new(2, 2, vec![0.1, -1e-300, f64::MAX, 3.0]).unwrap());
        p.push("b0", Tensor::row(vec![1.0 / 3.0, 0.0]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, serde_json::json!({"iteration": 4})).unwrap();
        let (q, meta) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta["iteration"], 4);
    }

    #[test]
    fn truncation_is_detected() {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::row(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, serde_json::Value::Null).unwrap();
        buf.pop();
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
