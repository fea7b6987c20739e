//! `.moem` checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MOEM" | version: u8
//! num_layers, num_experts, top_k, d_model, d_ff, vocab_size, max_seq_len: u32 each
//! use_shared_expert: u8 (0 or 1)
//! every tensor from `MoEModel::tensors()` in order, as raw f64 values
//! ```
//!
//! Tensor shapes are implied by the config, so none are stored.

use std::fs;
use std::path::Path;

use super::{ModelConfig, MoEModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MOEM";
pub const CHECKPOINT_VERSION: u8 = 1;

impl MoEModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(34 + 8 * self.param_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        for v in [
            c.num_layers,
            c.num_experts,
            c.top_k,
            c.d_model,
            c.d_ff,
            c.vocab_size,
            c.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(u8::from(c.use_shared_expert));
        for t in self.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |what: &str| Error::Format(format!("checkpoint: {what}"));
        if bytes.len() < 5 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(fail(&format!("unsupported version {}", bytes[4])));
        }
        let mut pos = 5;
        let mut read_u32 = || -> Result<usize> {
            let b = bytes.get(pos..pos + 4).ok_or_else(|| fail("truncated config"))?;
            pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let dims = [
            read_u32()?,
            read_u32()?,
            read_u32()?,
            read_u32()?,
            read_u32()?,
            read_u32()?,
            read_u32()?,
        ];
        let shared = match bytes.get(pos) {
            Some(0) => false,
            Some(1) => true,
            Some(_) => return Err(fail("shared-expert flag must be 0 or 1")),
            None => return Err(fail("truncated config")),
        };
        pos += 1;
        let config = ModelConfig {
            num_layers: dims[0],
            num_experts: dims[1],
            top_k: dims[2],
            d_model: dims[3],
            d_ff: dims[4],
            vocab_size: dims[5],
            max_seq_len: dims[6],
            use_shared_expert: shared,
        };
        config
            .validate()
            .map_err(|e| fail(&format!("invalid config: {e}")))?;

        let mut model = MoEModel::init(config, 0)?;
        let expected = 8 * model.param_count();
        if bytes.len() - pos != expected {
            return Err(fail(&format!(
                "expected {expected} tensor bytes, found {}",
                bytes.len() - pos
            )));
        }
        let mut values = bytes[pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in model.tensors_mut() {
            for slot in t.data_mut() {
                *slot = values.next().expect("length checked");
            }
        }
        if !model.is_finite() {
            return Err(fail("non-finite parameter"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = ModelConfig {
            use_shared_expert: true,
            num_layers: 2,
            ..ModelConfig::default()
        };
        let m = MoEModel::init(config, 5).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"MOEM");
        assert_eq!(bytes.len(), 34 + 8 * m.param_count());
        let back = MoEModel::from_bytes(&bytes).unwrap();
        assert!(m.bit_eq(&back));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = MoEModel::init(ModelConfig::default(), 1).unwrap();
        let mut bytes = m.to_bytes();
        assert!(MoEModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(MoEModel::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
