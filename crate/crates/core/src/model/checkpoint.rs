//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BLTD"                      magic
//! u32                         format version (1)
//! u32                         number of header entries
//!   u16 len, bytes            key   (UTF-8)
//!   u16 len, bytes            value (UTF-8)
//! u32                         number of tensors
//!   u16 len, bytes            name (UTF-8), in declaration order
//!   u32                       rank
//!   u64 * rank                extents
//!   f32 * numel               values
//! "PTCH"                      patcher section
//!   f64                       entropy threshold (nats)
//!   u32                       maximum patch length
//!   u32                       n-gram order
//!   f64                       smoothing
//!   u64 * 260                 unigram counts
//!   u64                       number of contexts, then per context in key order:
//!     u64                     packed context (9 bits per symbol, oldest first)
//!     u32                     number of entries
//!     (u16 symbol, u64 count) sorted by symbol
//! ```
//!
//! The header holds the model configuration as `key = value` pairs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::patching::{read_f64, read_u32, read_u64, EntropyModel, Patcher};
use crate::tensor::Real;

use super::{HierarchicalModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"BLTD";
pub const PATCHER_MAGIC: &[u8; 4] = b"PTCH";
pub const VERSION: u32 = 1;

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let len: u16 = s
        .len()
        .try_into()
        .map_err(|_| Error::Format(format!("string of {} bytes too long", s.len())))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    let mut buf = vec![0u8; u16::from_le_bytes(b) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("header string is not UTF-8".into()))
}

pub fn write_checkpoint(w: &mut impl Write, model: &HierarchicalModel, patcher: &Patcher) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let kv = model.config.to_kv();
    w.write_all(&(kv.len() as u32).to_le_bytes())?;
    for (k, v) in &kv {
        write_str(w, k)?;
        write_str(w, v)?;
    }
    w.write_all(&(model.num_tensors() as u32).to_le_bytes())?;
    for (name, t) in model.names().iter().zip(model.tensors()) {
        write_str(w, name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.write_all(PATCHER_MAGIC)?;
    w.write_all(&(patcher.threshold as f64).to_le_bytes())?;
    w.write_all(&(patcher.max_patch as u32).to_le_bytes())?;
    patcher.model.write_to(w)?;
    Ok(())
}

/// Reads only the magic, version and configuration header.
pub fn read_header(r: &mut impl Read) -> Result<Vec<(String, String)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("missing BLTD magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32(r)?;
    (0..n).map(|_| Ok((read_str(r)?, read_str(r)?))).collect()
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(HierarchicalModel, Patcher)> {
    let header = read_header(r)?;
    let config = ModelConfig::from_kv(&header)?;
    let mut model = HierarchicalModel::new(config, 0)?;
    let n = read_u32(r)? as usize;
    if n != model.num_tensors() {
        return Err(Error::Format(format!(
            "{n} tensors stored, configuration declares {}",
            model.num_tensors()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for id in 0..n {
        let name = read_str(r)?;
        if name != model.name(id) {
            return Err(Error::Format(format!(
                "tensor {id} is `{name}`, expected `{}`",
                model.name(id)
            )));
        }
        let rank = read_u32(r)? as usize;
        let dims = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != model.tensor(id).shape() {
            return Err(Error::Format(format!("tensor `{name}` has shape {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        values.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                .collect(),
        );
    }
    model.load_values(&values)?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PATCHER_MAGIC {
        return Err(Error::Format("missing patcher section".into()));
    }
    let threshold = read_f64(r)? as Real;
    let max_patch = read_u32(r)? as usize;
    let entropy = EntropyModel::read_from(r)?;
    let patcher = Patcher::new(entropy, threshold, max_patch)?;
    Ok((model, patcher))
}

pub fn save(path: &Path, model: &HierarchicalModel, patcher: &Patcher) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, patcher)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(HierarchicalModel, Patcher)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

/// Rounds every parameter through `f32`, the storage precision of checkpoints.
pub fn round_to_storage(model: &mut HierarchicalModel) {
    for t in model.tensors_mut() {
        for x in t.data_mut() {
            *x = (*x as f32) as Real;
        }
    }
}
