//! CKPT1 container: named f32 tensors with a JSON manifest.
//!
//! Layout: the bytes `CKPT1\n`, one JSON line
//! `[{"name":...,"shape":[...],"offset":...}, ...]` (offset in bytes from the
//! start of the payload section), a newline, then the concatenated
//! little-endian 32-bit float blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;
use crate::segnet::params::ParamSet;

pub const MAGIC: &[u8] = b"CKPT1\n";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn write_checkpoint<F: Real>(params: &ParamSet<F>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut manifest = Vec::new();
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let io = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n").map_err(io)?;
    for (_, t) in params.iter() {
        for &v in t.data() {
            w.write_all(&v.to_f32_().to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn read_line(r: &mut impl Read, path: &str) -> Result<Vec<u8>> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::Truncated {
                path: path.to_string(),
                detail: "eof before end of manifest line".into(),
            });
        }
        if byte[0] == b'\n' {
            return Ok(line);
        }
        line.push(byte[0]);
        if line.len() > 64 * 1024 * 1024 {
            return Err(Error::Truncated {
                path: path.to_string(),
                detail: "manifest line unreasonably long".into(),
            });
        }
    }
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8], path: &str) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf).map_err(|_| Error::BadMagic {
        path: path.to_string(),
        expected: String::from_utf8_lossy(&magic[..magic.len() - 1]).to_string(),
    })?;
    if buf != magic {
        return Err(Error::BadMagic {
            path: path.to_string(),
            expected: String::from_utf8_lossy(&magic[..magic.len() - 1]).to_string(),
        });
    }
    Ok(())
}

pub(crate) fn read_json_line<T: for<'de> Deserialize<'de>>(
    r: &mut impl Read,
    path: &str,
) -> Result<T> {
    let line = read_line(r, path)?;
    Ok(serde_json::from_slice(&line)?)
}

pub fn read_checkpoint<F: Real>(path: &Path) -> Result<ParamSet<F>> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, MAGIC, &p)?;
    let manifest: Vec<ManifestEntry> = read_json_line(&mut r, &p)?;
    let mut params = ParamSet::new();
    let mut expected_offset = 0u64;
    for entry in &manifest {
        if entry.offset != expected_offset {
            return Err(Error::PayloadMismatch {
                path: p.clone(),
                detail: format!(
                    "tensor {} at offset {}, expected {}",
                    entry.name, entry.offset, expected_offset
                ),
            });
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes).map_err(|_| Error::Truncated {
            path: p.clone(),
            detail: format!("payload ended inside tensor {}", entry.name),
        })?;
        let data: Vec<F> = bytes
            .chunks_exact(4)
            .map(|c| F::from_f32_(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        params.insert(&entry.name, Tensor::from_vec(&entry.shape, data)?);
        expected_offset += 4 * n as u64;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(&p, e))? != 0 {
        return Err(Error::PayloadMismatch {
            path: p,
            detail: "trailing bytes after last tensor".into(),
        });
    }
    Ok(params)
}
