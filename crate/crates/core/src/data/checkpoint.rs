//! Binary checkpoint format, bitwise-reproducible.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic    4 bytes  "PSG1"
//! version  u32      (currently 1)
//! seed     u64      model init seed
//! step     u64      optimizer step counter
//! cfg_len  u32      followed by that many bytes of config text
//! n        u32      tensor count
//! n x { name_len u32, name bytes, dtype u8 (0 = f32),
//!       ndim u32, ndim x dim u32, numel x f32 payload }
//! ```
//! Tensors appear in parameter-store order, which makes files byte-identical
//! for identical model state.

use std::io::{Read, Write};
use std::path::Path;

use crate::model::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PSG1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct CheckpointMeta {
    pub version: u32,
    pub seed: u64,
    pub step: u64,
    pub config_text: String,
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&model.step.to_le_bytes());
    let cfg = super::config::format_model_config(&model.config);
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, entry) in model.store.iter() {
        let name = entry.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(0u8); // dtype f32
        let shape = entry.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in entry.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read the raw contents: metadata plus the named tensor table.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let seed = r.u64()?;
    let step = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::CorruptCheckpoint("config text not utf-8".into()))?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name not utf-8".into()))?;
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(Error::CorruptCheckpoint(format!(
                "unknown dtype tag {dtype} for `{name}`"
            )));
        }
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::CorruptCheckpoint(format!(
                "implausible rank {ndim} for `{name}`"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != r.data.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            r.data.len() - r.pos
        )));
    }
    Ok((
        CheckpointMeta {
            version,
            seed,
            step,
            config_text,
        },
        tensors,
    ))
}

/// Load a checkpoint into an existing model, validating every tensor's
/// shape against the model's parameter table. The first mismatch is
/// reported by name.
pub fn load_checkpoint_into(path: &Path, model: &mut Model) -> Result<CheckpointMeta> {
    let (meta, tensors) = read_checkpoint(path)?;
    if tensors.len() != model.store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            model.store.len()
        )));
    }
    // Validate everything before mutating.
    for (name, tensor) in &tensors {
        let id = model.store.by_name(name).ok_or_else(|| Error::CheckpointShape {
            name: name.clone(),
            expected: vec![],
            found: tensor.shape().to_vec(),
        })?;
        let expected = model.store.get(id).shape();
        if expected != tensor.shape() {
            return Err(Error::CheckpointShape {
                name: name.clone(),
                expected: expected.to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
    }
    for (name, tensor) in tensors {
        let id = model.store.by_name(&name).expect("validated above");
        model.store.set(id, tensor)?;
    }
    model.seed = meta.seed;
    model.step = meta.step;
    Ok(meta)
}

/// Build a model directly from a checkpoint's embedded config.
pub fn load_model(path: &Path) -> Result<Model> {
    let (meta, _) = read_checkpoint(path)?;
    let cfg = super::config::parse_config_text(&meta.config_text)?.model;
    let mut model = Model::new(cfg, meta.seed)?;
    load_checkpoint_into(path, &mut model)?;
    Ok(model)
}
