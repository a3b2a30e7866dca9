//! Checkpoint container: run metadata plus named tensors in a small
//! self-describing binary format.
//!
//! Layout (all integers little-endian, strings length-prefixed UTF-8):
//!
//! ```text
//! magic    8 bytes  "CSMAECKP"
//! version  u32      1
//! config   u64 len + bytes   resolved training configuration, verbatim text
//! step     u64               completed optimizer steps
//! epoch    u64               completed epochs
//! seed     u64               run seed
//! count    u64               number of tensors
//! tensor*  name (u64 len + bytes), rows u64, cols u64, rows·cols f64 values
//! ```
//!
//! Values travel as raw IEEE-754 bit patterns, so a load after a save
//! reproduces every tensor bit-exactly. Writes go to a sibling temporary file
//! first and replace the destination atomically.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::backbone::NamedTensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSMAECKP";
const VERSION: u32 = 1;
/// Upper bound on rows·cols per tensor, guarding allocation on corrupt input.
const MAX_TENSOR_ELEMS: u64 = 1 << 33;

/// A saved training state: metadata plus model parameters and optimizer
/// moments as named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Verbatim text of the configuration the run was started with.
    pub config_toml: String,
    /// Completed optimizer steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Run seed.
    pub seed: u64,
    /// Model parameters in canonical order, then optimizer moments
    /// (`opt.m.<name>`, `opt.v.<name>`).
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Write to `path` atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            write_string(&mut w, &self.config_toml)?;
            w.write_all(&self.step.to_le_bytes())?;
            w.write_all(&self.epoch.to_le_bytes())?;
            w.write_all(&self.seed.to_le_bytes())?;
            w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
            for t in &self.tensors {
                write_string(&mut w, &t.name)?;
                let (rows, cols) = t.value.dim();
                w.write_all(&(rows as u64).to_le_bytes())?;
                w.write_all(&(cols as u64).to_le_bytes())?;
                for v in t.value.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Read and fully validate a checkpoint file.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::data(format!(
                "checkpoint version {version} unsupported (expected {VERSION})"
            )));
        }
        let config_toml = read_string(&mut r)?;
        let step = read_u64(&mut r)?;
        let epoch = read_u64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let count = read_u64(&mut r)?;
        let mut tensors = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rows = read_u64(&mut r)?;
            let cols = read_u64(&mut r)?;
            let elems = rows
                .checked_mul(cols)
                .filter(|&e| e <= MAX_TENSOR_ELEMS)
                .ok_or_else(|| {
                    Error::data(format!(
                        "checkpoint tensor '{name}' claims implausible shape {rows}x{cols}"
                    ))
                })?;
            let mut data = Vec::with_capacity(elems as usize);
            let mut buf = [0u8; 8];
            for _ in 0..elems {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let value = Array2::from_shape_vec((rows as usize, cols as usize), data)
                .expect("shape matches data length by construction");
            tensors.push(NamedTensor { name, value });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::data("checkpoint has trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { config_toml, step, epoch, seed, tensors })
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::data("checkpoint truncated")
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u64(r)?;
    if len > MAX_TENSOR_ELEMS {
        return Err(Error::data("checkpoint string length is implausible"));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::data("checkpoint string is not UTF-8"))
}
