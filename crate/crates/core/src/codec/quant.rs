//! Uniform min/max quantization of network parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy::{pack_bits, unpack_bits};

pub const DEFAULT_MLP_BITS: u8 = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMlp {
    pub min: f32,
    pub max: f32,
    pub bits: u8,
    pub codes: Vec<u32>,
}

fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

pub fn quantize_mlp(params: &[f32], bits: u8) -> Result<QuantizedMlp> {
    if !(1..=24).contains(&bits) {
        return Err(Error::Config(format!("quantization depth must be in 1..=24, got {bits}")));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("network parameters"));
    }
    let min = params.iter().copied().fold(f32::INFINITY, f32::min);
    let max = params.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if params.is_empty() {
        return Ok(QuantizedMlp { min: 0.0, max: 0.0, bits, codes: Vec::new() });
    }
    let top = levels(bits);
    let span = max as f64 - min as f64;
    let codes = params
        .iter()
        .map(|&w| {
            if span == 0.0 {
                0
            } else {
                // the maximum lands exactly on the top edge; clamp it into the last bin
                (((w as f64 - min as f64) * top as f64 / span).floor() as u32).min(top)
            }
        })
        .collect();
    Ok(QuantizedMlp { min, max, bits, codes })
}

impl QuantizedMlp {
    pub fn step(&self) -> f64 {
        (self.max as f64 - self.min as f64) / levels(self.bits) as f64
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let step = self.step();
        self.codes
            .iter()
            .map(|&c| (self.min as f64 + c as f64 * step) as f32)
            .collect()
    }

    /// Codes packed least-significant bit first.
    pub fn packed(&self) -> Vec<u8> {
        let bits: Vec<bool> = self
            .codes
            .iter()
            .flat_map(|&c| (0..self.bits).map(move |b| (c >> b) & 1 == 1))
            .collect();
        pack_bits(&bits)
    }

    pub fn from_packed(min: f32, max: f32, bits: u8, count: usize, bytes: &[u8]) -> Result<Self> {
        if !(1..=24).contains(&bits) {
            return Err(Error::Corrupt(format!("quantization depth {bits}")));
        }
        let nbits = count * bits as usize;
        if bytes.len() != nbits.div_ceil(8) {
            return Err(Error::Truncated);
        }
        let flat = unpack_bits(bytes, nbits);
        let codes = flat
            .chunks(bits as usize)
            .map(|c| c.iter().enumerate().fold(0u32, |acc, (i, &b)| acc | ((b as u32) << i)))
            .collect();
        Ok(QuantizedMlp { min, max, bits, codes })
    }
}

pub fn dequantize_mlp(q: &QuantizedMlp) -> Vec<f32> {
    q.dequantize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_codes() {
        let q = quantize_mlp(&[-1.0, 0.0, 1.0, 0.5], 2).unwrap();
        // three steps of 2/3 over [-1, 1]
        assert_eq!(q.codes, vec![0, 1, 3, 2]);
        let d = q.dequantize();
        assert_eq!(d[0], -1.0);
        assert_eq!(d[2], 1.0);
        assert!((d[1] + 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_weights() {
        let q = quantize_mlp(&[0.25; 10], 13).unwrap();
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(q.dequantize(), vec![0.25; 10]);
        assert!(quantize_mlp(&[f32::NAN], 13).is_err());
        assert!(quantize_mlp(&[1.0], 0).is_err());
    }

    #[test]
    fn packing_round_trip() {
        let params: Vec<f32> = (0..101).map(|i| ((i * 37) % 101) as f32 / 7.0 - 3.0).collect();
        let q = quantize_mlp(&params, 13).unwrap();
        let bytes = q.packed();
        assert_eq!(bytes.len(), (101usize * 13).div_ceil(8));
        let back = QuantizedMlp::from_packed(q.min, q.max, 13, 101, &bytes).unwrap();
        assert_eq!(back, q);
        assert!(QuantizedMlp::from_packed(q.min, q.max, 13, 101, &bytes[1..]).is_err());
    }

    proptest! {
        #[test]
        fn error_within_one_step(params in proptest::collection::vec(-50f32..50.0, 1..400), bits in 4u8..16) {
            let q = quantize_mlp(&params, bits).unwrap();
            let step = q.step();
            for (&w, &d) in params.iter().zip(&q.dequantize()) {
                prop_assert!((w as f64 - d as f64).abs() <= step * (1.0 + 1e-6) + 1e-6);
                prop_assert!(d as f64 <= w as f64 + 1e-5);
            }
            prop_assert!(q.codes.iter().all(|&c| c < (1 << bits)));
        }
    }
}
