//! Binary range coder with 16-bit probabilities and carry propagation.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
const PROB_ONE: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// Maps `P(+1)` onto the coder's 16-bit scale, keeping both symbols codable.
#[inline]
pub fn quantize_prob(p: f64) -> u16 {
    (p * PROB_ONE as f64).round().clamp(1.0, (PROB_ONE - 1) as f64) as u16
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes `plus` (the +1 symbol when true) with `p16 / 65536 = P(+1)`.
    #[inline]
    pub fn encode(&mut self, plus: bool, p16: u16) {
        let bound = ((self.range as u64 * p16 as u64) >> PROB_BITS) as u32;
        if plus {
            self.range = bound;
        } else {
            self.low += bound as u64;
            self.range -= bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
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
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 5 {
            return Err(Error::Truncated);
        }
        let code = u32::from_be_bytes([data[1], data[2], data[3], data[4]]);
        Ok(RangeDecoder {
            data,
            pos: 5,
            code,
            range: u32::MAX,
        })
    }

    #[inline]
    pub fn decode(&mut self, p16: u16) -> Result<bool> {
        let bound = ((self.range as u64 * p16 as u64) >> PROB_BITS) as u32;
        let plus = if self.code < bound {
            self.range = bound;
            true
        } else {
            self.code -= bound;
            self.range -= bound;
            false
        };
        while self.range < TOP {
            let b = *self.data.get(self.pos).ok_or(Error::Truncated)?;
            self.pos += 1;
            self.range <<= 8;
            self.code = (self.code << 8) | b as u32;
        }
        Ok(plus)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Codes a ±1 sequence with per-symbol probabilities of +1.
pub fn encode_signs(signs: &[i8], probs: &[u16]) -> Vec<u8> {
    assert_eq!(signs.len(), probs.len());
    if signs.is_empty() {
        return Vec::new();
    }
    let mut enc = RangeEncoder::new();
    for (&s, &p) in signs.iter().zip(probs) {
        enc.encode(s > 0, p);
    }
    enc.finish()
}

pub fn decode_signs(data: &[u8], probs: &[u16]) -> Result<Vec<i8>> {
    if probs.is_empty() {
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(data)?;
    probs
        .iter()
        .map(|&p| dec.decode(p).map(|plus| if plus { 1 } else { -1 }))
        .collect()
}
