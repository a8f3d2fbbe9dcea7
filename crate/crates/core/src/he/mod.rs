//! Backend contract for slot-vector homomorphic encryption.
//!
//! Kernels are written against [`HeBackend`]. Each backend supplies raw
//! ciphertext operations; the default methods layer the level ledger and
//! slot-layout bookkeeping on top, so every backend fails at the same
//! point and tracks garbage slots identically.

mod layout;
pub mod sim;

pub use layout::{SlotLayout, SlotSet};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeError {
    #[error("{got} values do not fit in {slots} slots")]
    TooManyValues { got: usize, slots: usize },
    #[error("multiplicative budget exhausted in {op}")]
    BudgetExhausted { op: String },
    #[error("squaring would apply a deferred scale of {0} quadratically")]
    DeferredScalePresent(f64),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("rotation by {step} is out of range for {slots} slots")]
    InvalidRotation { step: i64, slots: usize },
    #[error("no rotation key for step {0}")]
    MissingRotationKey(usize),
    #[error("unsupported ring degree {0}")]
    UnsupportedDegree(usize),
    #[error("value {0} overflows the encoding scale")]
    ScaleOverflow(f64),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("ciphertext format: {0}")]
    Format(String),
}

impl HeError {
    pub(crate) fn budget(op: &str) -> Self {
        HeError::BudgetExhausted { op: op.to_string() }
    }
}

/// A ciphertext plus its remaining level budget and layout metadata.
#[derive(Debug, Clone)]
pub struct HeVector<C> {
    ct: C,
    level: usize,
    layout: SlotLayout,
}

impl<C> HeVector<C> {
    pub(crate) fn from_parts(ct: C, level: usize, layout: SlotLayout) -> Self {
        Self { ct, level, layout }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn layout(&self) -> &SlotLayout {
        &self.layout
    }

    pub fn slot_count(&self) -> usize {
        self.layout.valid.len()
    }

    pub fn ciphertext(&self) -> &C {
        &self.ct
    }

    pub fn into_parts(self) -> (C, usize, SlotLayout) {
        (self.ct, self.level, self.layout)
    }

    /// Reattach metadata to a deserialized ciphertext.
    pub fn assemble(ct: C, level: usize, layout: SlotLayout) -> Self {
        Self { ct, level, layout }
    }

    /// Replace the layout metadata; kernels use this to declare which
    /// slots carry meaning after a composite operation.
    pub(crate) fn with_layout(mut self, layout: SlotLayout) -> Self {
        self.layout = layout;
        self
    }
}

/// Raw ciphertext operations plus the layout-aware contract built on them.
pub trait HeBackend: Send + Sync {
    type Ciphertext: Clone + Send + Sync;
    type Plaintext: Send + Sync;
    /// Unrescaled sum of ciphertext-plaintext products.
    type Product: Send;

    fn slot_count(&self) -> usize;
    fn max_level(&self) -> usize;

    fn encrypt_raw(&self, values: &[f64]) -> Result<Self::Ciphertext, HeError>;
    /// Encode a multiplier for ciphertexts at `level`.
    fn encode_raw(&self, values: &[f64], level: usize) -> Result<Self::Plaintext, HeError>;
    fn add_raw(&self, a: &Self::Ciphertext, b: &Self::Ciphertext) -> Result<Self::Ciphertext, HeError>;
    fn add_plain_raw(&self, a: &Self::Ciphertext, values: &[f64]) -> Result<Self::Ciphertext, HeError>;
    /// Cyclic left shift by `steps` in `[0, slot_count)`.
    fn rotate_raw(&self, a: &Self::Ciphertext, steps: usize) -> Result<Self::Ciphertext, HeError>;
    fn square_raw(&self, a: &Self::Ciphertext) -> Result<Self::Ciphertext, HeError>;
    /// `acc += a * p`, starting a new accumulator when `acc` is empty.
    fn mul_acc_raw(
        &self,
        acc: &mut Option<Self::Product>,
        a: &Self::Ciphertext,
        p: &Self::Plaintext,
    ) -> Result<(), HeError>;
    /// Rescale an accumulated product into a ciphertext one level down.
    fn finish_raw(&self, acc: Self::Product) -> Result<Self::Ciphertext, HeError>;

    /// Several rotations of one ciphertext; backends may share work.
    fn rotate_many_raw(&self, a: &Self::Ciphertext, steps: &[usize]) -> Result<Vec<Self::Ciphertext>, HeError> {
        steps.iter().map(|&s| self.rotate_raw(a, s)).collect()
    }

    // ---- contract ----

    fn encrypt_vec(&self, values: &[f64]) -> Result<HeVector<Self::Ciphertext>, HeError> {
        let slots = self.slot_count();
        if values.len() > slots {
            return Err(HeError::TooManyValues { got: values.len(), slots });
        }
        let ct = self.encrypt_raw(values)?;
        Ok(HeVector::from_parts(ct, self.max_level(), SlotLayout::dense(slots, values.len())))
    }

    fn add(
        &self,
        a: &HeVector<Self::Ciphertext>,
        b: &HeVector<Self::Ciphertext>,
    ) -> Result<HeVector<Self::Ciphertext>, HeError> {
        let layout = a.layout.sum(&b.layout)?;
        let ct = self.add_raw(&a.ct, &b.ct)?;
        Ok(HeVector::from_parts(ct, a.level.min(b.level), layout))
    }

    /// Add cleartext values slotwise; no level consumed.
    fn add_plain(&self, a: &HeVector<Self::Ciphertext>, values: &[f64]) -> Result<HeVector<Self::Ciphertext>, HeError> {
        let slots = self.slot_count();
        if values.len() > slots {
            return Err(HeError::TooManyValues { got: values.len(), slots });
        }
        let ct = self.add_plain_raw(&a.ct, values)?;
        let mut layout = a.layout.clone();
        layout.support.extend(values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i));
        Ok(HeVector::from_parts(ct, a.level, layout))
    }

    fn mul_plain(&self, a: &HeVector<Self::Ciphertext>, plain: &[f64]) -> Result<HeVector<Self::Ciphertext>, HeError> {
        if a.level == 0 {
            return Err(HeError::budget("mul_plain"));
        }
        let slots = self.slot_count();
        if plain.len() > slots {
            return Err(HeError::TooManyValues { got: plain.len(), slots });
        }
        let p = self.encode_raw(plain, a.level)?;
        let mut acc = None;
        self.mul_acc_raw(&mut acc, &a.ct, &p)?;
        let ct = self.finish_raw(acc.expect("one product accumulated"))?;
        let nonzero = SlotSet::nonzero(slots, plain);
        let layout = SlotLayout {
            valid: a.layout.valid.clone(),
            support: a.layout.support.intersection(&nonzero),
            pending_scale: a.layout.pending_scale,
        };
        Ok(HeVector::from_parts(ct, a.level - 1, layout))
    }

    /// Multiply after folding the pending scale and garbage mask into `plain`.
    fn mul_plain_folded(
        &self,
        a: &HeVector<Self::Ciphertext>,
        plain: &[f64],
    ) -> Result<HeVector<Self::Ciphertext>, HeError> {
        let folded: Vec<f64> = plain
            .iter()
            .enumerate()
            .map(|(i, &v)| if a.layout.valid.contains(i) { v * a.layout.pending_scale } else { 0.0 })
            .collect();
        let out = self.mul_plain(a, &folded)?;
        let layout = SlotLayout {
            support: out.layout.support.intersection(&a.layout.valid),
            valid: a.layout.valid.clone(),
            pending_scale: 1.0,
        };
        Ok(out.with_layout(layout))
    }

    fn square(&self, a: &HeVector<Self::Ciphertext>) -> Result<HeVector<Self::Ciphertext>, HeError> {
        if a.layout.pending_scale != 1.0 {
            return Err(HeError::DeferredScalePresent(a.layout.pending_scale));
        }
        if a.level == 0 {
            return Err(HeError::budget("square"));
        }
        let ct = self.square_raw(&a.ct)?;
        Ok(HeVector::from_parts(ct, a.level - 1, a.layout.clone()))
    }

    /// Cyclic left shift by `k`; negative `k` shifts right.
    fn rotate(&self, a: &HeVector<Self::Ciphertext>, k: i64) -> Result<HeVector<Self::Ciphertext>, HeError> {
        let steps = self.rotation_steps(k)?;
        if steps == 0 {
            return Ok(a.clone());
        }
        let ct = self.rotate_raw(&a.ct, steps)?;
        Ok(HeVector::from_parts(ct, a.level, a.layout.rotated_left(steps)))
    }

    fn rotate_many(
        &self,
        a: &HeVector<Self::Ciphertext>,
        ks: &[i64],
    ) -> Result<Vec<HeVector<Self::Ciphertext>>, HeError> {
        let steps: Vec<usize> = ks.iter().map(|&k| self.rotation_steps(k)).collect::<Result<_, _>>()?;
        let nontrivial: Vec<usize> = steps.iter().copied().filter(|&s| s != 0).collect();
        let mut rotated = self.rotate_many_raw(&a.ct, &nontrivial)?.into_iter();
        Ok(steps
            .iter()
            .map(|&s| {
                if s == 0 {
                    a.clone()
                } else {
                    let ct = rotated.next().expect("one rotation per nonzero step");
                    HeVector::from_parts(ct, a.level, a.layout.rotated_left(s))
                }
            })
            .collect())
    }

    fn rotation_steps(&self, k: i64) -> Result<usize, HeError> {
        let slots = self.slot_count();
        if k.unsigned_abs() as usize >= slots {
            return Err(HeError::InvalidRotation { step: k, slots });
        }
        Ok(k.rem_euclid(slots as i64) as usize)
    }
}

/// Secret-holding side of a backend.
pub trait HeDecryptor<B: HeBackend + ?Sized> {
    fn decrypt_raw(&self, backend: &B, ct: &B::Ciphertext) -> Result<Vec<f64>, HeError>;

    fn decrypt_vec(&self, backend: &B, a: &HeVector<B::Ciphertext>) -> Result<Vec<f64>, HeError> {
        self.decrypt_raw(backend, &a.ct)
    }
}
