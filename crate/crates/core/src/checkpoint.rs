//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SFXM" | u32 version | u32 len | JSON ModelConfig
//! u32 tensor count
//! per tensor: u32 name len | name | u32 ndim | u64 dims... | f64 data...
//! optional trailer: "SFXS" | u32 len | JSON TrainState
//! ```
//!
//! Tensors are written in declaration order, so save→load is bit-exact.

use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SFXM";
pub const TRAILER_MAGIC: &[u8; 4] = b"SFXS";
pub const VERSION: u32 = 1;

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch (1-based) of the saved weights.
    pub epoch: usize,
    pub best_val_f1: f64,
}

pub fn encode(model: &ModelParams, state: Option<&TrainState>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let tensors = model.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(s) = state {
        let js = serde_json::to_vec(s).expect("state serializes");
        buf.extend_from_slice(TRAILER_MAGIC);
        buf.extend_from_slice(&(js.len() as u32).to_le_bytes());
        buf.extend_from_slice(&js);
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, Option<TrainState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let mut model = ModelParams::init(&config)?.zeros_like();
    let count = r.u32()? as usize;
    {
        let mut slots = model.named_tensors_mut();
        if count != slots.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {count} tensors, config implies {}",
                slots.len()
            )));
        }
        for (name, tensor) in slots.iter_mut() {
            let n = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            if got != name {
                return Err(Error::Data(format!("expected tensor {name}, found {got}")));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            if shape != tensor.shape() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    tensor.shape()
                )));
            }
            for v in tensor.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
    }
    // LayerNorm eps is a config value, not a tensor; zeros_like left it at 0.
    let eps = config.layer_norm_eps;
    model.final_ln.eps = eps;
    for b in &mut model.blocks {
        b.ln1.eps = eps;
        b.ln2.eps = eps;
    }
    let state = if r.remaining() == 0 {
        None
    } else {
        if r.take(4)? != TRAILER_MAGIC {
            return Err(Error::Data("unexpected bytes after tensors".into()));
        }
        let n = r.u32()? as usize;
        let s = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Data(format!("checkpoint trailer: {e}")))?;
        if r.remaining() != 0 {
            return Err(Error::Data(
                "trailing bytes after checkpoint trailer".into(),
            ));
        }
        Some(s)
    };
    Ok((model, state))
}

pub fn save(path: &Path, model: &ModelParams, state: Option<&TrainState>) -> Result<()> {
    let bytes = encode(model, state);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, Option<TrainState>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BlockVariant;

    fn small() -> ModelParams {
        ModelParams::init(&ModelConfig {
            d_model: 16,
            n_heads: 2,
            block_variant: BlockVariant::PostNorm,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = small();
        let state = TrainState {
            epoch: 7,
            best_val_f1: 0.91,
        };
        let bytes = encode(&m, Some(&state));
        assert_eq!(&bytes[..4], b"SFXM");
        let (back, st) = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(st, Some(state));
        assert_eq!(encode(&back, st.as_ref()), bytes);

        let (plain, none) = decode(&encode(&m, None)).unwrap();
        assert_eq!(plain, m);
        assert!(none.is_none());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&small(), None);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.extend_from_slice(b"junk");
        assert!(decode(&extra).is_err());
    }
}
