//! Binary checkpoint, all little-endian:
//!
//! ```text
//! magic      4 bytes  "CIGN"
//! version    u16      1
//! flags      u16      bit 0 throughput head trained, bit 1 pairwise head trained
//! in_dim     u32
//! hidden     u32
//! v_min      f64      normalizer
//! v_max      f64
//! blocks     u32      count, then per block:
//!   name_len u16, name (UTF-8), len u32, len x f64
//! ```
//!
//! Blocks appear in [`gin::BLOCKS`] order and must all be present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::gin::{self, block_sizes, Params};
use super::{ModelMeta, PredictorError, PredictorModel, MAX_HIDDEN};
use crate::sysgraph::Normalizer;

pub const MAGIC: &[u8; 4] = b"CIGN";
pub const VERSION: u16 = 1;
const FLAG_THROUGHPUT: u16 = 1;
const FLAG_RELATIVE: u16 = 2;

fn bad(msg: impl Into<String>) -> PredictorError {
    PredictorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &PredictorModel, mut w: W) -> Result<(), PredictorError> {
    let p = &model.params;
    let mut flags = 0;
    if model.meta.throughput_trained {
        flags |= FLAG_THROUGHPUT;
    }
    if model.meta.relative_trained {
        flags |= FLAG_RELATIVE;
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(p.input as u32).to_le_bytes())?;
    w.write_all(&(p.hidden as u32).to_le_bytes())?;
    w.write_all(&model.normalizer.v_min.to_le_bytes())?;
    w.write_all(&model.normalizer.v_max.to_le_bytes())?;
    w.write_all(&(gin::BLOCKS.len() as u32).to_le_bytes())?;
    let mut offset = 0;
    for (name, size) in gin::BLOCKS.iter().zip(block_sizes(p.input, p.hidden)) {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(size as u32).to_le_bytes())?;
        for x in &p.data[offset..offset + size] {
            w.write_all(&x.to_le_bytes())?;
        }
        offset += size;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], PredictorError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad("truncated"),
        _ => PredictorError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PredictorModel, PredictorError> {
    if &take::<4>(&mut r)? != MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = u16::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let flags = u16::from_le_bytes(take(&mut r)?);
    let input = u32::from_le_bytes(take(&mut r)?) as usize;
    let hidden = u32::from_le_bytes(take(&mut r)?) as usize;
    if input == 0 || input > 1024 || hidden == 0 || hidden > MAX_HIDDEN {
        return Err(bad(format!("implausible dimensions {input}x{hidden}")));
    }
    let v_min = f64::from_le_bytes(take(&mut r)?);
    let v_max = f64::from_le_bytes(take(&mut r)?);
    let normalizer = Normalizer::new(v_min, v_max).map_err(|e| bad(e.to_string()))?;
    let count = u32::from_le_bytes(take(&mut r)?) as usize;
    if count != gin::BLOCKS.len() {
        return Err(bad(format!("expected {} blocks, found {count}", gin::BLOCKS.len())));
    }
    let mut data = Vec::new();
    for (name, size) in gin::BLOCKS.iter().zip(block_sizes(input, hidden)) {
        let len = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut got = vec![0u8; len];
        r.read_exact(&mut got).map_err(|_| bad("truncated"))?;
        if got != name.as_bytes() {
            return Err(bad(format!(
                "expected block {name:?}, found {:?}",
                String::from_utf8_lossy(&got)
            )));
        }
        let n = u32::from_le_bytes(take(&mut r)?) as usize;
        if n != size {
            return Err(bad(format!("block {name:?} has {n} values, expected {size}")));
        }
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut r)?));
        }
    }
    let params = Params::from_data(input, hidden, data).ok_or_else(|| bad("size mismatch"))?;
    Ok(PredictorModel {
        params,
        normalizer,
        meta: ModelMeta {
            throughput_trained: flags & FLAG_THROUGHPUT != 0,
            relative_trained: flags & FLAG_RELATIVE != 0,
        },
    })
}

pub fn save_checkpoint(model: &PredictorModel, path: &Path) -> Result<(), PredictorError> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<PredictorModel, PredictorError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
