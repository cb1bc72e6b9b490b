//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes  "UNIASMCK"
//! version    u32
//! config     6 x u64  layers, heads, hidden, intermediate, max_seq_len, vocab_size
//! count      u32      number of tensors
//! tensor     u32 name length, name (UTF-8), u32 rank, rank x u32 dims,
//!            prod(dims) x f32
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Model, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNIASMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.params.num_params() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = &model.config;
    for v in [c.layers, c.heads, c.hidden, c.intermediate, c.max_seq_len, c.vocab_size] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.bad("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.bad(&format!("unsupported version {version}")));
    }
    let mut f = || r.u64().map(|v| v as usize);
    let config = ModelConfig {
        layers: f()?,
        heads: f()?,
        hidden: f()?,
        intermediate: f()?,
        max_seq_len: f()?,
        vocab_size: f()?,
    };
    config.validate()?;
    let mut params = Parameters::<f32>::zeros(&config);
    let count = r.u32()? as usize;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s.to_vec()))
        .collect();
    if count != expected.len() {
        return Err(r.bad(&format!("expected {} tensors, found {count}", expected.len())));
    }
    for ((name, slot), (_, shape)) in params.tensors_mut().into_iter().zip(&expected) {
        let name_len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.bad("tensor name not UTF-8"))?;
        if got != name {
            return Err(r.bad(&format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(r.bad(&format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        slot.copy_from_slice(&r.f32s(slot.len())?);
    }
    if !r.is_empty() {
        return Err(r.bad("trailing bytes"));
    }
    Ok(Model { config, params })
}

pub fn write_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    let bytes = encode_checkpoint(model);
    crate::io::write_atomic(path, |w| w.write_all(&bytes))
}

pub fn read_checkpoint(path: &Path) -> Result<Model<f32>> {
    decode_checkpoint(&crate::io::read_bytes(path)?).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            line: 0,
            field: path.display().to_string(),
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f32> {
        Model::init(
            ModelConfig {
                layers: 2,
                heads: 2,
                hidden: 8,
                intermediate: 12,
                max_seq_len: 16,
                vocab_size: 20,
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        write_checkpoint(&path, &m).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), m);
    }
}
