//! Error-bounded lossy compression for `f64` parameter streams.
//!
//! Two codecs live here:
//!
//! * [`compress_eb`] / [`decompress_eb`]: an SZ-style predict-quantize-encode
//!   pipeline. Every element is predicted from the previously *reconstructed*
//!   element (order-1 Lorenzo), the residual is quantized into bins of width
//!   `2·ê`, and the bin indices are entropy coded with a canonical prefix code.
//!   Elements that cannot be represented within the bound are stored raw. The
//!   reconstruction satisfies `|x - x̂| <= ê` for every element, unconditionally.
//! * [`quantize_uniform`] / [`dequantize_uniform`]: per-tensor affine min-max
//!   quantization at a fixed bit width. Its error is bounded only relative to the
//!   tensor's range, which is the baseline the error-bounded codec is compared to.
//!
//! The `.melc` container layout is fixed and little-endian; see [`CompressedBlock`].

mod bits;
mod error;
mod huffman;
mod lorenzo;
mod uniform;

pub use error::{CodecError, Result};
pub use lorenzo::{
    compress_eb, decompress_bytes, decompress_eb, CompressedBlock, Predictor, FORMAT_VERSION,
    MAGIC, MAX_QUANT_CODE,
};
pub use uniform::{dequantize_uniform, quantize_uniform, QuantizedBlock, SUPPORTED_BITS};

/// Anything with a well-defined serialized size in bytes.
pub trait EncodedSize {
    fn encoded_len(&self) -> usize;
}

/// Compression ratio: bytes of `original` stored as 64-bit floats divided by the
/// serialized size of `block`.
pub fn ratio<B: EncodedSize + ?Sized>(block: &B, original: &[f64]) -> f64 {
    let raw = std::mem::size_of_val(original) as f64;
    raw / block.encoded_len() as f64
}
