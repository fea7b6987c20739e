//! MSB-first bit packing and little-endian byte cursors.

use crate::error::{CodecError, Result};

#[derive(Debug, Default)]
pub(crate) struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub(crate) fn write(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        for shift in (0..width).rev() {
            let bit = (value >> shift) & 1;
            let offset = (self.bit_len % 8) as u32;
            if offset == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                let last = self.bytes.len() - 1;
                self.bytes[last] |= 0x80 >> offset;
            }
            self.bit_len += 1;
        }
    }

    pub(crate) fn finish(self) -> (Vec<u8>, u64) {
        (self.bytes, self.bit_len)
    }
}

pub(crate) struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: u64,
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], bit_len: u64) -> Self {
        Self {
            bytes,
            bit_len,
            pos: 0,
        }
    }

    pub(crate) fn read_bit(&mut self) -> Result<u32> {
        if self.pos >= self.bit_len {
            return Err(CodecError::format("stream", "code stream exhausted"));
        }
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = (byte >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Ok(u32::from(bit))
    }

    pub(crate) fn read(&mut self, width: u32) -> Result<u64> {
        let mut value = 0u64;
        for _ in 0..width {
            value = (value << 1) | u64::from(self.read_bit()?);
        }
        Ok(value)
    }

    pub(crate) fn remaining(&self) -> u64 {
        self.bit_len - self.pos
    }
}

/// Sequential little-endian reader that reports which field ran out of bytes.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| CodecError::format(field, "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, field: &'static str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(field)?))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Converts a serialized count to `usize`, rejecting counts that cannot possibly
/// fit in the remaining input (`min_bytes_each` per item).
pub(crate) fn checked_count(
    count: u64,
    min_bytes_each: usize,
    available: usize,
    field: &'static str,
) -> Result<usize> {
    let n = usize::try_from(count).map_err(|_| CodecError::format(field, "count overflows"))?;
    if n.saturating_mul(min_bytes_each) > available {
        return Err(CodecError::format(field, "truncated"));
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_round_trip() {
        let mut w = BitWriter::new();
        w.write(0b101, 3);
        w.write(0xdead_beef, 32);
        w.write(1, 1);
        let (bytes, len) = w.finish();
        assert_eq!(len, 36);
        assert_eq!(bytes.len(), 5);
        let mut r = BitReader::new(&bytes, len);
        assert_eq!(r.read(3).unwrap(), 0b101);
        assert_eq!(r.read(32).unwrap(), 0xdead_beef);
        assert_eq!(r.read(1).unwrap(), 1);
        assert!(r.read_bit().is_err());
    }

    #[test]
    fn cursor_names_truncated_field() {
        let mut c = ByteCursor::new(&[1, 2, 3]);
        assert_eq!(c.u8("a").unwrap(), 1);
        let err = c.u32("count").unwrap_err();
        assert_eq!(
            err,
            CodecError::Format {
                field: "count",
                reason: "truncated".into()
            }
        );
    }
}
