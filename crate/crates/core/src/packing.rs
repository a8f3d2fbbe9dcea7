//! Fixed-point weight packing: many shifted, quantized weights per big
//! integer, with enough headroom per slot that summing up to
//! `max_addends` packed vectors never carries across slot boundaries.

use num_bigint::BigUint;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackingError {
    #[error("weight {index} ({value}) is outside the representable range")]
    WeightOutOfRange { index: usize, value: f64 },
    #[error("slot overflow: {0}")]
    OverflowDetected(String),
    #[error("invalid packing config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingConfig {
    pub frac_bits: u32,
    pub slot_bits: u32,
    pub shift: u64,
    pub max_addends: u32,
}

impl Default for PackingConfig {
    /// 2^-16 resolution, 16 addends, 42 slots per 2046-bit plaintext.
    fn default() -> Self {
        Self { frac_bits: 16, slot_bits: 48, shift: 1 << 31, max_addends: 16 }
    }
}

fn ceil_log2(x: u128) -> u32 {
    if x <= 1 {
        0
    } else {
        128 - (x - 1).leading_zeros()
    }
}

impl PackingConfig {
    /// Bits needed for one shifted quantized value, which lives in `[0, 2*shift)`.
    pub fn value_bits(&self) -> u32 {
        ceil_log2(2 * self.shift as u128)
    }

    /// Largest shifted quantized value a single weight may take.
    pub fn max_value(&self) -> u128 {
        2 * self.shift as u128 - 1
    }

    pub fn validate(&self) -> Result<(), PackingError> {
        if self.shift == 0 {
            return Err(PackingError::InvalidConfig("shift must be positive".into()));
        }
        if self.max_addends == 0 {
            return Err(PackingError::InvalidConfig("max_addends must be positive".into()));
        }
        if self.slot_bits == 0 || self.slot_bits > 64 {
            return Err(PackingError::InvalidConfig(format!("slot_bits {} not in 1..=64", self.slot_bits)));
        }
        if self.frac_bits > 52 {
            return Err(PackingError::InvalidConfig(format!("frac_bits {} exceeds f64 precision", self.frac_bits)));
        }
        let needed = self.value_bits() + ceil_log2(self.max_addends as u128) + 1;
        if self.slot_bits < needed {
            return Err(PackingError::InvalidConfig(format!(
                "slot_bits {} < {needed} required for {} addends",
                self.slot_bits, self.max_addends
            )));
        }
        Ok(())
    }

    /// Slots per integer for a given plaintext width.
    pub fn slots_per_integer(&self, plaintext_bits: u64) -> usize {
        (plaintext_bits / self.slot_bits as u64) as usize
    }

    /// Round half away from zero, then shift into the non-negative range.
    pub fn quantize(&self, w: f64) -> Option<u64> {
        if !w.is_finite() {
            return None;
        }
        let q = (w * (1u64 << self.frac_bits) as f64).round();
        let shifted = q + self.shift as f64;
        (shifted >= 0.0 && shifted <= self.max_value() as f64).then_some(shifted as u64)
    }
}

/// Plaintext width that stays strictly below a Paillier modulus `n`.
pub fn plaintext_bits_for(n: &BigUint) -> u64 {
    n.bits().saturating_sub(2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedWeights {
    #[serde(with = "hexint::vec")]
    pub integers: Vec<BigUint>,
    pub count: usize,
    pub config: PackingConfig,
    pub slots_per_integer: usize,
}

pub fn pack(weights: &[f64], config: &PackingConfig, plaintext_bits: u64) -> Result<PackedWeights, PackingError> {
    config.validate()?;
    let per = config.slots_per_integer(plaintext_bits);
    if per == 0 {
        return Err(PackingError::InvalidConfig(format!(
            "{plaintext_bits}-bit plaintext cannot hold a {}-bit slot",
            config.slot_bits
        )));
    }
    let quantized: Vec<u64> = weights
        .iter()
        .enumerate()
        .map(|(index, &value)| config.quantize(value).ok_or(PackingError::WeightOutOfRange { index, value }))
        .collect::<Result<_, _>>()?;
    let integers = quantized.chunks(per).map(|chunk| assemble(chunk, config.slot_bits)).collect();
    Ok(PackedWeights { integers, count: weights.len(), config: *config, slots_per_integer: per })
}

fn assemble(fields: &[u64], slot_bits: u32) -> BigUint {
    // little-slot-first: slot 0 occupies the lowest bits
    let mut acc = BigUint::zero();
    for &f in fields.iter().rev() {
        acc <<= slot_bits as usize;
        acc += f;
    }
    acc
}

fn extract(digits: &[u64], offset: u64, width: u32) -> u64 {
    let word = (offset / 64) as usize;
    let bit = (offset % 64) as u32;
    let lo = digits.get(word).copied().unwrap_or(0) as u128;
    let hi = digits.get(word + 1).copied().unwrap_or(0) as u128;
    let joined = (hi << 64 | lo) >> bit;
    let mask = if width == 64 { u64::MAX as u128 } else { (1u128 << width) - 1 };
    (joined & mask) as u64
}

impl PackedWeights {
    /// Rewrap integers recovered from decryption.
    pub fn from_integers(integers: Vec<BigUint>, count: usize, config: PackingConfig, plaintext_bits: u64) -> Self {
        let slots_per_integer = config.slots_per_integer(plaintext_bits);
        Self { integers, count, config, slots_per_integer }
    }

    /// Plaintext slotwise sum, the cleartext image of ciphertext addition.
    pub fn add(&self, other: &PackedWeights) -> Result<PackedWeights, PackingError> {
        if self.config != other.config || self.count != other.count || self.slots_per_integer != other.slots_per_integer {
            return Err(PackingError::InvalidConfig("packed vectors have different shapes".into()));
        }
        let integers = self.integers.iter().zip(&other.integers).map(|(a, b)| a + b).collect();
        Ok(PackedWeights { integers, ..self.clone() })
    }

    /// Raw slot fields, without any decoding.
    pub fn fields(&self) -> Vec<u64> {
        let width = self.config.slot_bits;
        let mut out = Vec::with_capacity(self.count);
        for (i, int) in self.integers.iter().enumerate() {
            let digits = int.to_u64_digits();
            let in_this = (self.count - i * self.slots_per_integer).min(self.slots_per_integer);
            for s in 0..in_this {
                out.push(extract(&digits, s as u64 * width as u64, width));
            }
        }
        out
    }
}

/// Decode the slotwise sum of `addends` packed vectors into their average.
pub fn unpack_sum(packed_sum: &PackedWeights, addends: u32) -> Result<Vec<f64>, PackingError> {
    let config = &packed_sum.config;
    config.validate()?;
    if addends == 0 {
        return Err(PackingError::InvalidConfig("addend count must be positive".into()));
    }
    if addends > config.max_addends {
        return Err(PackingError::OverflowDetected(format!(
            "{addends} addends exceed the packing limit of {}",
            config.max_addends
        )));
    }
    let expected_ints = packed_sum.count.div_ceil(packed_sum.slots_per_integer.max(1));
    if packed_sum.integers.len() != expected_ints {
        return Err(PackingError::InvalidConfig(format!(
            "{} integers for {} weights",
            packed_sum.integers.len(),
            packed_sum.count
        )));
    }
    let width = config.slot_bits as u64;
    for (i, int) in packed_sum.integers.iter().enumerate() {
        let used = (packed_sum.count - i * packed_sum.slots_per_integer).min(packed_sum.slots_per_integer) as u64;
        if int.bits() > used * width {
            return Err(PackingError::OverflowDetected(format!("integer {i} carries past its last slot")));
        }
    }
    let k = addends as u128;
    let bound = k * config.max_value();
    let offset = k * config.shift as u128;
    let denom = addends as f64 * (1u64 << config.frac_bits) as f64;
    packed_sum
        .fields()
        .into_iter()
        .enumerate()
        .map(|(idx, field)| {
            let field = field as u128;
            if field > bound {
                return Err(PackingError::OverflowDetected(format!("slot {idx} holds {field} > {bound}")));
            }
            Ok((field as i128 - offset as i128) as f64 / denom)
        })
        .collect()
}
