use serde::{Deserialize, Serialize};

use super::HeError;

/// Fixed-size bitset over slot indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotSet {
    len: usize,
    words: Vec<u64>,
}

impl SlotSet {
    pub fn empty(len: usize) -> Self {
        Self { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn full(len: usize) -> Self {
        Self::range(len, 0, len)
    }

    /// Slots `start..end`, clipped to `len`.
    pub fn range(len: usize, start: usize, end: usize) -> Self {
        let mut s = Self::empty(len);
        for i in start..end.min(len) {
            s.insert(i);
        }
        s
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(len);
        s.extend(indices);
        s
    }

    /// Positions of the nonzero entries of `values`.
    pub fn nonzero(len: usize, values: &[f64]) -> Self {
        Self::from_indices(len, values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len, "slot {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn extend(&mut self, indices: impl IntoIterator<Item = usize>) {
        for i in indices {
            self.insert(i);
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.contains(i))
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Self {
        assert_eq!(self.len, other.len, "slot sets of different sizes");
        let words = self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect();
        Self { len: self.len, words }
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a & !b)
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.difference(other).is_empty()
    }

    /// Index mapping of a cyclic left shift: slot `i` moves to `i - k`.
    pub fn rotated_left(&self, k: usize) -> Self {
        let n = self.len;
        Self::from_indices(n, self.iter().map(|i| (i + n - k % n) % n))
    }

    /// One past the highest member below `limit`.
    pub fn extent_below(&self, limit: usize) -> usize {
        (0..limit.min(self.len)).rev().find(|&i| self.contains(i)).map_or(0, |i| i + 1)
    }
}

/// Compile-time-known bookkeeping carried beside each ciphertext.
///
/// `valid` holds slots with meaningful values. `support` over-approximates
/// the slots that may be nonzero; anything in `support` but not in `valid`
/// is garbage that the next plaintext multiplication must zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotLayout {
    pub valid: SlotSet,
    pub support: SlotSet,
    /// Multiplier the logical values still owe (deferred averaging divisor).
    pub pending_scale: f64,
}

impl SlotLayout {
    /// Slots `0..len` valid, nothing else nonzero.
    pub fn dense(slots: usize, len: usize) -> Self {
        let valid = SlotSet::range(slots, 0, len);
        Self { support: valid.clone(), valid, pending_scale: 1.0 }
    }

    pub fn pending_mask(&self) -> bool {
        !self.support.is_subset(&self.valid)
    }

    pub fn garbage(&self) -> SlotSet {
        self.support.difference(&self.valid)
    }

    pub fn rotated_left(&self, k: usize) -> Self {
        Self {
            valid: self.valid.rotated_left(k),
            support: self.support.rotated_left(k),
            pending_scale: self.pending_scale,
        }
    }

    /// Layout of a slotwise sum. A slot stays meaningful only if neither
    /// operand contributes garbage to it.
    pub fn sum(&self, other: &Self) -> Result<Self, HeError> {
        if self.pending_scale != other.pending_scale {
            return Err(HeError::LayoutMismatch(format!(
                "adding vectors with pending scales {} and {}",
                self.pending_scale, other.pending_scale
            )));
        }
        if self.valid.len() != other.valid.len() {
            return Err(HeError::LayoutMismatch("slot counts differ".into()));
        }
        let valid = self.valid.union(&other.valid).difference(&self.garbage()).difference(&other.garbage());
        Ok(Self { valid, support: self.support.union(&other.support), pending_scale: self.pending_scale })
    }
}
