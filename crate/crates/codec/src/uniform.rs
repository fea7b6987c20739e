//! Affine min-max quantization at a fixed bit width.
//!
//! Serialized layout: `"MEUQ" | bits: u8 | count: u64 | min: f64 | max: f64 | codes`,
//! codes packed LSB-first into bytes.

use crate::error::{CodecError, Result};
use crate::EncodedSize;

pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];
const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    bits: u8,
    len: usize,
    min: f64,
    max: f64,
    packed: Vec<u8>,
}

impl QuantizedBlock {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> (f64, f64) {
        (self.min, self.max)
    }

    fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Worst-case reconstruction error: half a quantization step.
    pub fn max_error(&self) -> f64 {
        (self.max - self.min) / (2.0 * f64::from(self.levels()))
    }

    pub fn code(&self, i: usize) -> u32 {
        let bits = usize::from(self.bits);
        let mut value = 0u32;
        for b in 0..bits {
            let pos = i * bits + b;
            let bit = (self.packed[pos / 8] >> (pos % 8)) & 1;
            value |= u32::from(bit) << b;
        }
        value
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(b"MEUQ");
        out.push(self.bits);
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        out.extend_from_slice(&self.min.to_le_bytes());
        out.extend_from_slice(&self.max.to_le_bytes());
        out.extend_from_slice(&self.packed);
        out
    }
}

impl EncodedSize for QuantizedBlock {
    fn encoded_len(&self) -> usize {
        HEADER_LEN + self.packed.len()
    }
}

pub fn quantize_uniform(data: &[f64], bits: u8) -> Result<QuantizedBlock> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(CodecError::Domain(format!(
            "unsupported bit width {bits}, expected one of {SUPPORTED_BITS:?}"
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(CodecError::Input("non-finite value".into()));
    }
    let (min, max) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let (min, max) = if data.is_empty() { (0.0, 0.0) } else { (min, max) };
    let levels = (1u32 << bits) - 1;
    let span = max - min;

    let width = usize::from(bits);
    let mut packed = vec![0u8; (data.len() * width).div_ceil(8)];
    for (i, &x) in data.iter().enumerate() {
        let code = if span > 0.0 {
            (((x - min) / span) * f64::from(levels))
                .round()
                .clamp(0.0, f64::from(levels)) as u32
        } else {
            0
        };
        for b in 0..width {
            if (code >> b) & 1 == 1 {
                let pos = i * width + b;
                packed[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    Ok(QuantizedBlock {
        bits,
        len: data.len(),
        min,
        max,
        packed,
    })
}

pub fn dequantize_uniform(block: &QuantizedBlock) -> Vec<f64> {
    let levels = f64::from(block.levels());
    (0..block.len)
        .map(|i| {
            let t = f64::from(block.code(i)) / levels;
            // lerp form is exact at both endpoints
            (block.min * (1.0 - t) + block.max * t).clamp(block.min, block.max)
        })
        .collect()
}
