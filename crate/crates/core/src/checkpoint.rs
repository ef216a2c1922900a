//! Model checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        8 bytes "EENEDCK1"
//! config_len   u32, then config_len bytes of canonical `key = value` text
//! tensor_count u32
//! per tensor, in parameter order:
//!   name_len u32, name (UTF-8)
//!   rank     u8, then rank × u32 extents
//!   payload  product(extents) × f32
//! ```
//!
//! Parameters are kept f32-representable in memory, so save/load is
//! bitwise lossless.

use std::fs;
use std::path::Path;

use crate::codec::{put_f32s, Reader};
use crate::error::{FormatError, Result};
use crate::model::{EenedModel, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EENEDCK1";

pub fn encode(model: &EenedModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let config = model.config.to_text();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, value) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(value.rank() as u8);
        for &e in value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        put_f32s(&mut out, value.data());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<EenedModel> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let config_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|e| FormatError::Config(e.to_string()))?;
    let config = ModelConfig::from_text(text).map_err(|e| FormatError::Config(e.to_string()))?;
    config
        .validate()
        .map_err(|e| FormatError::Config(e.to_string()))?;
    let mut model = EenedModel::init(config)?;

    let count = r.u32("tensor count")? as usize;
    if count != model.store.len() {
        return Err(FormatError::Table(format!(
            "file has {count} tensors, config implies {}",
            model.store.len()
        ))
        .into());
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| FormatError::Table(e.to_string()))?
            .to_string();
        if name != model.store.name(id) {
            return Err(FormatError::Table(format!(
                "expected tensor `{}`, found `{name}`",
                model.store.name(id)
            ))
            .into());
        }
        let rank = r.u8("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("tensor extent").map(|e| e as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let expected = model.store.get(id).shape().to_vec();
        if shape != expected {
            return Err(FormatError::ShapeMismatch {
                name,
                expected,
                found: shape,
            }
            .into());
        }
        let data = r.f32s(shape.iter().product(), &name)?;
        model.store.set(id, Tensor::new(&shape, data)?)?;
    }
    if r.remaining() != 0 {
        return Err(FormatError::Trailing(r.remaining()).into());
    }
    Ok(model)
}

pub fn save_checkpoint(model: &EenedModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EenedModel> {
    decode(&fs::read(path)?)
}
