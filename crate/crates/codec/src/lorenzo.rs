//! Order-1 Lorenzo predict-quantize-encode codec and the `.melc` container.
//!
//! Container layout (all integers and floats little-endian):
//!
//! ```text
//! header   "MELC" | version: u8 | element count: u64 | error bound ê: f64 | predictor id: u8
//! table    symbol count: u32 | (symbol: u32, code length: u8) * count, ascending by symbol
//! stream   bit length: u64 | ceil(bits / 8) bytes of MSB-first canonical prefix codes
//! outliers count: u64 | element index: u64 * count | raw value: f64 * count
//! ```
//!
//! Stream symbols: `0` escapes to the next raw outlier, `1..=65535` carry a
//! quantization code `q` as `q + 32768`, and `65536 + k` (`k` in `1..=40`) is a
//! run of `2^k + extra` zero codes where `extra` follows as `k` raw bits.

use std::collections::BTreeMap;

use crate::bits::{checked_count, BitReader, BitWriter, ByteCursor};
use crate::error::{CodecError, Result};
use crate::huffman::{self, Decoder, Encoder};
use crate::EncodedSize;

pub const MAGIC: [u8; 4] = *b"MELC";
pub const FORMAT_VERSION: u8 = 1;
/// Largest quantization code magnitude; codes live in a 16-bit range.
pub const MAX_QUANT_CODE: i32 = 32_767;

const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 1;
const ESCAPE: u32 = 0;
const CODE_OFFSET: i64 = 32_768;
const RUN_BASE: u32 = 65_536;
const MAX_RUN_EXP: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Predictor {
    /// Previous reconstructed element; the first element is predicted as 0.
    Lorenzo1 = 1,
}

impl Predictor {
    fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Predictor::Lorenzo1),
            other => Err(CodecError::format(
                "predictor",
                format!("unknown predictor id {other}"),
            )),
        }
    }
}

/// A parsed `.melc` block.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock {
    len: u64,
    error_bound: f64,
    predictor: Predictor,
    table: Vec<(u32, u8)>,
    stream: Vec<u8>,
    stream_bits: u64,
    outlier_indices: Vec<u64>,
    outlier_values: Vec<f64>,
}

impl CompressedBlock {
    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn error_bound(&self) -> f64 {
        self.error_bound
    }

    pub fn predictor(&self) -> Predictor {
        self.predictor
    }

    /// Number of elements stored raw because they could not be quantized in range.
    pub fn outlier_count(&self) -> usize {
        self.outlier_indices.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&self.len.to_le_bytes());
        out.extend_from_slice(&self.error_bound.to_le_bytes());
        out.push(self.predictor as u8);
        out.extend_from_slice(&(self.table.len() as u32).to_le_bytes());
        for &(symbol, len) in &self.table {
            out.extend_from_slice(&symbol.to_le_bytes());
            out.push(len);
        }
        out.extend_from_slice(&self.stream_bits.to_le_bytes());
        out.extend_from_slice(&self.stream);
        out.extend_from_slice(&(self.outlier_indices.len() as u64).to_le_bytes());
        for &i in &self.outlier_indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for &v in &self.outlier_values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a serialized block. Every structural problem is reported as a
    /// [`CodecError::Format`] naming the field.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = ByteCursor::new(bytes);
        if c.take(4, "magic")? != MAGIC {
            return Err(CodecError::format("magic", "expected \"MELC\""));
        }
        let version = c.u8("version")?;
        if version != FORMAT_VERSION {
            return Err(CodecError::format(
                "version",
                format!("unsupported version {version}"),
            ));
        }
        let len = c.u64("element count")?;
        let error_bound = c.f64("error bound")?;
        if !(error_bound.is_finite() && error_bound > 0.0) {
            return Err(CodecError::format("error bound", "must be finite and > 0"));
        }
        let predictor = Predictor::from_id(c.u8("predictor")?)?;

        let table_len = c.u32("code table")?;
        let table_len = checked_count(u64::from(table_len), 5, bytes.len(), "code table")?;
        let mut table = Vec::with_capacity(table_len);
        for _ in 0..table_len {
            let symbol = c.u32("code table")?;
            let code_len = c.u8("code table")?;
            table.push((symbol, code_len));
        }
        if table.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(CodecError::format("code table", "symbols not strictly ascending"));
        }

        let stream_bits = c.u64("stream")?;
        let stream_bytes = stream_bits.div_ceil(8);
        let stream_bytes = checked_count(stream_bytes, 1, bytes.len(), "stream")?;
        let stream = c.take(stream_bytes, "stream")?.to_vec();

        let n_out = c.u64("outliers")?;
        let n_out = checked_count(n_out, 16, bytes.len(), "outliers")?;
        let mut outlier_indices = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            outlier_indices.push(c.u64("outlier indices")?);
        }
        let mut outlier_values = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            outlier_values.push(c.f64("outlier values")?);
        }
        if !c.is_empty() {
            return Err(CodecError::format("trailer", "unexpected trailing bytes"));
        }
        Ok(Self {
            len,
            error_bound,
            predictor,
            table,
            stream,
            stream_bits,
            outlier_indices,
            outlier_values,
        })
    }
}

impl EncodedSize for CompressedBlock {
    fn encoded_len(&self) -> usize {
        HEADER_LEN
            + 4
            + 5 * self.table.len()
            + 8
            + self.stream.len()
            + 8
            + 16 * self.outlier_indices.len()
    }
}

/// Shared by encoder and decoder so both sides produce bitwise-identical values.
#[inline]
fn reconstruct(pred: f64, bin_width: f64, code: i32) -> f64 {
    pred + bin_width * f64::from(code)
}

enum Token {
    Code(i32),
    Escape,
}

/// Compresses `data` so that every reconstructed element is within `error_bound`
/// of the original.
pub fn compress_eb(data: &[f64], error_bound: f64) -> Result<CompressedBlock> {
    if !(error_bound > 0.0 && error_bound.is_finite()) {
        return Err(CodecError::Domain(format!(
            "error bound must be finite and > 0, got {error_bound}"
        )));
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(CodecError::Input(format!(
            "non-finite value {} at index {i}",
            data[i]
        )));
    }

    let bin_width = 2.0 * error_bound;
    let mut tokens = Vec::with_capacity(data.len());
    let mut outlier_indices = Vec::new();
    let mut outlier_values = Vec::new();
    let mut pred = 0.0f64;
    for (i, &x) in data.iter().enumerate() {
        let q = ((x - pred) / bin_width).round();
        if q.abs() <= f64::from(MAX_QUANT_CODE) {
            let code = q as i32;
            let recon = reconstruct(pred, bin_width, code);
            // Rounding in `pred + w*q` can exceed the bound for large magnitudes.
            if (recon - x).abs() <= error_bound {
                tokens.push(Token::Code(code));
                pred = recon;
                continue;
            }
        }
        tokens.push(Token::Escape);
        outlier_indices.push(i as u64);
        outlier_values.push(x);
        pred = x;
    }

    let symbols = run_length_symbols(&tokens);
    let mut freqs: BTreeMap<u32, u64> = BTreeMap::new();
    for &(sym, _) in &symbols {
        *freqs.entry(sym).or_default() += 1;
    }
    let table = huffman::code_lengths(&freqs);
    let encoder = Encoder::new(&table);
    let mut w = BitWriter::new();
    for &(sym, extra) in &symbols {
        encoder.put(&mut w, sym);
        if sym > RUN_BASE {
            w.write(extra, sym - RUN_BASE);
        }
    }
    let (stream, stream_bits) = w.finish();

    Ok(CompressedBlock {
        len: data.len() as u64,
        error_bound,
        predictor: Predictor::Lorenzo1,
        table,
        stream,
        stream_bits,
        outlier_indices,
        outlier_values,
    })
}

/// Turns tokens into (symbol, extra bits) pairs, folding runs of zero codes.
fn run_length_symbols(tokens: &[Token]) -> Vec<(u32, u64)> {
    let zero = (CODE_OFFSET) as u32;
    let mut out = Vec::new();
    let mut run = 0u64;
    let flush = |run: &mut u64, out: &mut Vec<(u32, u64)>| {
        while *run > 0 {
            if *run == 1 {
                out.push((zero, 0));
                *run = 0;
            } else {
                let k = (63 - run.leading_zeros()).min(MAX_RUN_EXP);
                let chunk = (*run).min((1u64 << (k + 1)) - 1);
                out.push((RUN_BASE + k, chunk - (1u64 << k)));
                *run -= chunk;
            }
        }
    };
    for t in tokens {
        match *t {
            Token::Code(0) => run += 1,
            Token::Code(q) => {
                flush(&mut run, &mut out);
                out.push(((i64::from(q) + CODE_OFFSET) as u32, 0));
            }
            Token::Escape => {
                flush(&mut run, &mut out);
                out.push((ESCAPE, 0));
            }
        }
    }
    flush(&mut run, &mut out);
    out
}

pub fn decompress_eb(block: &CompressedBlock) -> Result<Vec<f64>> {
    let n = usize::try_from(block.len)
        .map_err(|_| CodecError::format("element count", "count overflows"))?;
    if block.outlier_indices.len() != block.outlier_values.len() {
        return Err(CodecError::format("outliers", "index/value count mismatch"));
    }
    let decoder = Decoder::new(&block.table)?;
    let mut reader = BitReader::new(&block.stream, block.stream_bits);
    let bin_width = 2.0 * block.error_bound;
    let mut outliers = block
        .outlier_indices
        .iter()
        .zip(&block.outlier_values)
        .peekable();

    let mut out = Vec::with_capacity(n.min(1 << 24));
    let mut pred = 0.0f64;
    while out.len() < n {
        let sym = decoder.get(&mut reader)?;
        match sym {
            ESCAPE => {
                let (&idx, &value) = outliers
                    .next()
                    .ok_or_else(|| CodecError::format("outliers", "missing outlier value"))?;
                if idx != out.len() as u64 {
                    return Err(CodecError::format(
                        "outlier indices",
                        format!("expected index {}, found {idx}", out.len()),
                    ));
                }
                pred = value;
                out.push(value);
            }
            s if s < RUN_BASE => {
                let code = (i64::from(s) - CODE_OFFSET) as i32;
                pred = reconstruct(pred, bin_width, code);
                out.push(pred);
            }
            s if s - RUN_BASE >= 1 && s - RUN_BASE <= MAX_RUN_EXP => {
                let k = s - RUN_BASE;
                let run = (1u64 << k) + reader.read(k)?;
                if run > (n - out.len()) as u64 {
                    return Err(CodecError::format("stream", "zero run exceeds element count"));
                }
                for _ in 0..run {
                    pred = reconstruct(pred, bin_width, 0);
                    out.push(pred);
                }
            }
            other => {
                return Err(CodecError::format(
                    "code table",
                    format!("unknown symbol {other}"),
                ))
            }
        }
    }
    if outliers.next().is_some() {
        return Err(CodecError::format("outliers", "unused outlier values"));
    }
    if reader.remaining() != 0 {
        return Err(CodecError::format("stream", "unconsumed code stream"));
    }
    Ok(out)
}

/// Parses and decompresses a serialized `.melc` block. Nothing is returned
/// unless the whole block is valid.
pub fn decompress_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    decompress_eb(&CompressedBlock::from_bytes(bytes)?)
}
