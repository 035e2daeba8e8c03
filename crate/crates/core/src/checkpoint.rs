//! Versioned binary checkpoint: named f64 tensors, a config echo, and the
//! training RNG state. Tensors are addressed by name, not offset, so the
//! format stays forward-compatible when parameters are added.
//!
//! Layout (little-endian): magic `MTCK`, version u32, config echo
//! (u32 byte length + `key=value` lines), rng seed (32 bytes) and word
//! position (u128), tensor count u32, then per tensor: name (u32 length +
//! utf8), rows u32, cols u32, rows*cols f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::containers::{read_u32, write_u32, ContainerError};
use crate::nn::{Mat, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// RNG state snapshot for resumable, reproducible training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Ordered `key=value` description of the model that wrote this file.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Mat)>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_params(config: Vec<(String, String)>, params: &ParamSet, rng: RngState) -> Self {
        Checkpoint {
            config,
            tensors: params
                .iter()
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
            rng,
        }
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        let echo: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        write_u32(&mut w, echo.len() as u32)?;
        w.write_all(echo.as_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        write_u32(&mut w, self.tensors.len() as u32)?;
        for (name, m) in &self.tensors {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, m.rows as u32)?;
            write_u32(&mut w, m.cols as u32)?;
            for v in &m.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ContainerError::BadMagic {
                expected: "MTCK".into(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ContainerError::BadVersion(version));
        }
        let echo_len = read_u32(&mut r)? as usize;
        let mut echo = vec![0u8; echo_len];
        r.read_exact(&mut echo)?;
        let echo = String::from_utf8(echo)
            .map_err(|_| ContainerError::Malformed("config echo is not utf8".into()))?;
        let config = echo
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (k, v) = l
                    .split_once('=')
                    .ok_or_else(|| ContainerError::Malformed(format!("bad config line {l:?}")))?;
                Ok((k.to_string(), v.to_string()))
            })
            .collect::<Result<Vec<_>, ContainerError>>()?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        let rng = RngState {
            seed,
            word_pos: u128::from_le_bytes(wp),
        };
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| ContainerError::Malformed("tensor name is not utf8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut bytes = vec![0u8; rows * cols * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Mat::from_vec(rows, cols, data)));
        }
        Ok(Checkpoint {
            config,
            tensors,
            rng,
        })
    }
}
