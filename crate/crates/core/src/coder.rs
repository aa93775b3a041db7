//! Byte-oriented range coder over 16-bit cumulative frequency tables.
//!
//! 64-bit `low` with a one-byte carry cache, 32-bit `range`, renormalized a
//! byte at a time whenever `range` drops below 2²⁴.

use crate::entropy::{CdfTable, FREQ_TOTAL, SYMBOL_LIMIT};
use crate::error::{Error, FormatError, Result};

const TOP: u32 = 1 << 24;
const FREQ_BITS: u32 = 16;

#[derive(Debug, Default)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the interval `[start, start + freq)` out of 2¹⁶.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= FREQ_TOTAL);
        let r = self.range >> FREQ_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `bits` raw bits (at most 16) with uniform probability.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= FREQ_BITS && value < 1 << bits);
        let shift = FREQ_BITS - bits;
        self.encode(value << shift, 1 << shift);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self, FormatError> {
        let mut d = RangeDecoder { code: 0, range: u32::MAX, input, pos: 0 };
        if d.next_byte()? != 0 {
            return Err(FormatError::CorruptPayload("range coder stream must start with a zero byte".into()));
        }
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, FormatError> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or(FormatError::Truncated { need: self.pos + 1, have: self.input.len() })?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative target for the next symbol; pass it to a table lookup and
    /// then call [`RangeDecoder::consume`].
    pub fn target(&mut self) -> Result<(u32, u32), FormatError> {
        let r = self.range >> FREQ_BITS;
        let t = self.code / r;
        if t >= FREQ_TOTAL {
            return Err(FormatError::CorruptPayload(format!("cumulative target {t} out of range")));
        }
        Ok((t, r))
    }

    pub fn consume(&mut self, r: u32, start: u32, freq: u32) -> Result<(), FormatError> {
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32, FormatError> {
        let shift = FREQ_BITS - bits;
        let (t, r) = self.target()?;
        let v = t >> shift;
        self.consume(r, v << shift, 1 << shift)?;
        Ok(v)
    }

    /// Bytes read so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Encodes `symbols[i]` with `tables[channels[i]]`; values outside a
/// table's support are written as the escape slot plus 16 raw bits.
pub fn encode_symbols(symbols: &[i32], channels: &[usize], tables: &[CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != channels.len() {
        return Err(Error::Data(format!("{} symbols but {} channel ids", symbols.len(), channels.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&v, &c) in symbols.iter().zip(channels) {
        let table = tables.get(c).ok_or_else(|| Error::Data(format!("no table for channel {c}")))?;
        match table.slot_of(v) {
            Some(slot) => {
                let (start, freq) = table.range(slot);
                enc.encode(start, freq);
            }
            None => {
                if !(-SYMBOL_LIMIT..SYMBOL_LIMIT).contains(&v) {
                    return Err(Error::SymbolRange { value: v });
                }
                let (start, freq) = table.range(table.escape_slot());
                enc.encode(start, freq);
                enc.encode_bits((v as i16 as u16) as u32, 16);
            }
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_symbols`]. Fails on truncated or inconsistent input.
pub fn decode_symbols(bytes: &[u8], channels: &[usize], tables: &[CdfTable]) -> Result<Vec<i32>, FormatError> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        let table = tables.get(c).ok_or_else(|| FormatError::CorruptPayload(format!("no table for channel {c}")))?;
        let (t, r) = dec.target()?;
        let slot = table.find(t).ok_or_else(|| FormatError::CorruptPayload("cumulative lookup failed".into()))?;
        let (start, freq) = table.range(slot);
        dec.consume(r, start, freq)?;
        if slot == table.escape_slot() {
            let raw = dec.decode_bits(16)? as u16 as i16 as i32;
            if table.slot_of(raw).is_some() {
                return Err(FormatError::CorruptPayload(format!("escaped value {raw} lies inside the table support")));
            }
            out.push(raw);
        } else {
            out.push(table.value_of(slot));
        }
    }
    Ok(out)
}

/// Ideal code length of a sequence in bits, `Σ −log₂(freq / 2¹⁶)`,
/// counting 16 raw bits per escape.
pub fn ideal_bits(symbols: &[i32], channels: &[usize], tables: &[CdfTable]) -> f64 {
    symbols
        .iter()
        .zip(channels)
        .map(|(&v, &c)| {
            let t = &tables[c];
            match t.slot_of(v) {
                Some(s) => t.cost_bits(s),
                None => t.cost_bits(t.escape_slot()) + 16.0,
            }
        })
        .sum()
}
