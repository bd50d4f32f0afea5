//! Model checkpoints.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "LFCK" | version u32 | backbone tag u8 | config JSON (u32 len + bytes)
//! | global step u64 | param count u32
//! | per param: name (u32 len + bytes) | rank u32 | dims u32...
//!              | value f64... | adam m f64... | adam v f64...
//! ```
//!
//! Floats are written with `to_le_bytes`, so a save/load round trip is
//! bit-exact, including optimizer moments mid-training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::array::NumArray;
use super::model::{Backbone, ModelConfig, ModelError, VelocityModel};
use super::params::{ParamEntry, ParamStore};
use crate::Real;

const MAGIC: &[u8; 4] = b"LFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("config block is not valid JSON: {0}")]
    BadConfig(#[from] serde_json::Error),
    #[error("backbone tag byte {0} is unknown")]
    BadBackboneTag(u8),
    #[error("backbone tag disagrees with the stored config")]
    TagMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("parameter {index}: stored {got:?}, model built from config has {expected:?}")]
    ParamMismatch {
        index: usize,
        got: String,
        expected: String,
    },
    #[error("parameter count {got} does not match model {expected}")]
    ParamCount { got: usize, expected: usize },
    #[error("stored length {0} is implausibly large")]
    LengthOverflow(u64),
}

fn backbone_tag(backbone: Backbone) -> u8 {
    match backbone {
        Backbone::Mlp => 0,
        Backbone::Attn => 1,
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_floats<W: Write>(w: &mut W, values: &[Real]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_floats<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<Real>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(Real::from_le_bytes(buf));
    }
    Ok(out)
}

/// Guard against allocating from a corrupt length field.
fn checked_len(v: u64) -> Result<usize, CheckpointError> {
    const MAX: u64 = 1 << 32;
    if v > MAX {
        return Err(CheckpointError::LengthOverflow(v));
    }
    Ok(v as usize)
}

pub fn save_model<W: Write>(w: &mut W, model: &VelocityModel) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    w.write_all(&[backbone_tag(model.config().backbone)])?;
    let config = serde_json::to_vec(model.config())?;
    write_u32(w, config.len() as u32)?;
    w.write_all(&config)?;
    let store = model.store();
    write_u64(w, store.step())?;
    write_u32(w, store.num_params() as u32)?;
    for entry in store.entries() {
        write_u32(w, entry.name.len() as u32)?;
        w.write_all(entry.name.as_bytes())?;
        write_u32(w, entry.value.shape().len() as u32)?;
        for &d in entry.value.shape() {
            write_u32(w, d as u32)?;
        }
        write_floats(w, entry.value.as_slice())?;
        write_floats(w, entry.m.as_slice())?;
        write_floats(w, entry.v.as_slice())?;
    }
    Ok(())
}

pub fn load_model<R: Read>(r: &mut R) -> Result<VelocityModel, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let tag_backbone = match tag[0] {
        0 => Backbone::Mlp,
        1 => Backbone::Attn,
        other => return Err(CheckpointError::BadBackboneTag(other)),
    };
    let config_len = checked_len(read_u32(r)? as u64)?;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)?;
    if config.backbone != tag_backbone {
        return Err(CheckpointError::TagMismatch);
    }
    let step = read_u64(r)?;
    let count = read_u32(r)? as usize;

    // Rebuild the architecture from the config; the random init is
    // immediately replaced by the stored values.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = VelocityModel::new(config, &mut rng)?;
    if count != model.store().num_params() {
        return Err(CheckpointError::ParamCount {
            got: count,
            expected: model.store().num_params(),
        });
    }
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let name_len = checked_len(read_u32(r)? as u64)?;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::BadMagic)?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = checked_len(read_u32(r)? as u64)?;
            len = len.saturating_mul(d);
            shape.push(d);
        }
        checked_len(len as u64)?;
        let expected = model.store().entries().get(index).map(|e| {
            format!("{} {:?}", e.name, e.value.shape())
        });
        let got = format!("{name} {shape:?}");
        match expected {
            Some(e) if e == got => {}
            other => {
                return Err(CheckpointError::ParamMismatch {
                    index,
                    got,
                    expected: other.unwrap_or_else(|| "<none>".into()),
                });
            }
        }
        let value = NumArray::from_vec(&shape, read_floats(r, len)?).expect("shape checked");
        let m = NumArray::from_vec(&shape, read_floats(r, len)?).expect("shape checked");
        let v = NumArray::from_vec(&shape, read_floats(r, len)?).expect("shape checked");
        entries.push(ParamEntry {
            name,
            grad: NumArray::zeros(&shape),
            value,
            m,
            v,
        });
    }
    model.replace_store(ParamStore::restore(entries, step));
    Ok(model)
}

pub fn save_model_file(path: &Path, model: &VelocityModel) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    save_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model_file(path: &Path) -> Result<VelocityModel, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    load_model(&mut r)
}
