//! Self-describing binary sample files: a short header (magic, dtype,
//! shape, config hash) followed by little-endian float64 payload. The
//! format is fixed so reruns produce byte-identical files.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"VPSM";
const VERSION: u8 = 1;
const DTYPE_F64_LE: u8 = 1;

/// Write a sample matrix (rows = samples, columns = coordinates) with the
/// producing config's hash embedded in the header.
pub fn write_samples(path: &Path, samples: &[Vec<f64>], config_hash: &[u8; 32]) -> Result<()> {
    ensure!(!samples.is_empty(), "refusing to write an empty sample file");
    let dim = samples[0].len();
    ensure!(
        samples.iter().all(|s| s.len() == dim),
        "all samples must share one dimension"
    );
    let mut buf = Vec::with_capacity(64 + samples.len() * dim * 8);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F64_LE);
    buf.push(2); // ndim: samples × dim
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    buf.extend_from_slice(config_hash);
    for s in samples {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a sample file back; returns the sample matrix and the embedded
/// config hash.
pub fn read_samples(path: &Path) -> Result<(Vec<Vec<f64>>, [u8; 32])> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |what: &str| {
        Error::FileFormat(format!("{}: {what}", path.display()))
    };
    if bytes.len() < 7 || &bytes[0..4] != MAGIC {
        return Err(fail("not a sample file (bad magic)"));
    }
    if bytes[4] != VERSION {
        return Err(fail("unsupported sample-file version"));
    }
    if bytes[5] != DTYPE_F64_LE {
        return Err(fail("unsupported dtype"));
    }
    let ndim = bytes[6] as usize;
    if ndim != 2 {
        return Err(fail("expected a 2-d sample matrix"));
    }
    let header = 7 + ndim * 8 + 32;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let dim_at = |i: usize| {
        let off = 7 + i * 8;
        u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize
    };
    let (rows, cols) = (dim_at(0), dim_at(1));
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&bytes[7 + ndim * 8..header]);
    let want = header + rows * cols * 8;
    if bytes.len() != want {
        return Err(fail("payload length does not match header shape"));
    }
    let mut samples = Vec::with_capacity(rows);
    let mut off = header;
    for _ in 0..rows {
        let mut row = Vec::with_capacity(cols);
        for _ in 0..cols {
            row.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        samples.push(row);
    }
    Ok((samples, hash))
}
