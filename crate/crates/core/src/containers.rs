//! Flat binary file containers and the line-delimited label format.
//!
//! All multi-byte values are little-endian.
//!
//! * Features  (`MTFB`): magic, version u32, rows u32, cols u32, then
//!   rows*cols f32 row-major.
//! * NormStats (`MTNS`): magic, version u32, dim u32, mean f32[dim],
//!   variance f32[dim].
//! * Codebook  (`MTCB`): magic, version u32, C u32, D u32, then C*D f32
//!   row-major centroids.
//! * Label stream, binary: a bare run of u32 values (no header).
//! * Label stream, text: one decimal label per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::featext::{FeatureSequence, NormStats};

pub const FORMAT_VERSION: u32 = 1;
pub const FEATURES_MAGIC: &[u8; 4] = b"MTFB";
pub const NORMSTATS_MAGIC: &[u8; 4] = b"MTNS";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"MTCB";

#[derive(Error, Debug)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("malformed container: {0}")]
    Malformed(String),
}

fn write_magic(w: &mut impl Write, magic: &[u8; 4]) -> Result<(), ContainerError> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

fn read_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<(), ContainerError> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(ContainerError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&m).into_owned(),
        });
    }
    let v = read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(ContainerError::BadVersion(v));
    }
    Ok(())
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<(), ContainerError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_f32s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<(), ContainerError> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, ContainerError> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn save_features(path: &Path, feats: &FeatureSequence) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, FEATURES_MAGIC)?;
    write_u32(&mut w, feats.num_frames() as u32)?;
    write_u32(&mut w, feats.dim() as u32)?;
    write_f32s(&mut w, feats.data().iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureSequence, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, FEATURES_MAGIC)?;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let data = read_f32s(&mut r, rows * cols)?;
    Ok(FeatureSequence::from_flat(rows, cols, data))
}

pub fn save_norm_stats(path: &Path, stats: &NormStats) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, NORMSTATS_MAGIC)?;
    write_u32(&mut w, stats.mean.len() as u32)?;
    write_f32s(&mut w, stats.mean.iter().copied())?;
    write_f32s(&mut w, stats.variance.iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn load_norm_stats(path: &Path) -> Result<NormStats, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, NORMSTATS_MAGIC)?;
    let dim = read_u32(&mut r)? as usize;
    let mean = read_f32s(&mut r, dim)?;
    let variance = read_f32s(&mut r, dim)?;
    if variance.iter().any(|&v| v <= 0.0) {
        return Err(ContainerError::Malformed("non-positive variance".into()));
    }
    Ok(NormStats { mean, variance })
}

pub fn save_codebook_raw(
    path: &Path,
    c: usize,
    d: usize,
    centroids: &[f64],
) -> Result<(), ContainerError> {
    assert_eq!(centroids.len(), c * d);
    let mut w = BufWriter::new(File::create(path)?);
    write_magic(&mut w, CODEBOOK_MAGIC)?;
    write_u32(&mut w, c as u32)?;
    write_u32(&mut w, d as u32)?;
    write_f32s(&mut w, centroids.iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn load_codebook_raw(path: &Path) -> Result<(usize, usize, Vec<f64>), ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, CODEBOOK_MAGIC)?;
    let c = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let data = read_f32s(&mut r, c * d)?;
    Ok((c, d, data))
}

/// On-disk encoding for label streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelFormat {
    /// One decimal label per line.
    Text,
    /// A bare run of little-endian u32 values.
    Binary,
}

pub fn save_labels(path: &Path, labels: &[u32], format: LabelFormat) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        LabelFormat::Text => {
            for l in labels {
                writeln!(w, "{l}")?;
            }
        }
        LabelFormat::Binary => {
            for l in labels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path, format: LabelFormat) -> Result<Vec<u32>, ContainerError> {
    match format {
        LabelFormat::Text => {
            let r = BufReader::new(File::open(path)?);
            let mut out = Vec::new();
            for (i, line) in r.lines().enumerate() {
                let line = line?;
                let t = line.trim();
                if t.is_empty() {
                    continue;
                }
                let v: u32 = t
                    .parse()
                    .map_err(|_| ContainerError::Malformed(format!("line {}: {t:?}", i + 1)))?;
                out.push(v);
            }
            Ok(out)
        }
        LabelFormat::Binary => {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            if bytes.len() % 4 != 0 {
                return Err(ContainerError::Malformed(format!(
                    "binary label file length {} not a multiple of 4",
                    bytes.len()
                )));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        }
    }
}
