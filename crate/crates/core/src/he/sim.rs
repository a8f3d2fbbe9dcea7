//! Exact cleartext simulator: slot arithmetic in f64 with the same level
//! ledger and rotation semantics as a real backend, and no cryptography.

use super::{HeBackend, HeDecryptor, HeError};

pub const DEFAULT_SLOTS: usize = 4096;
pub const DEFAULT_LEVELS: usize = 6;

/// Opaque simulated ciphertext; only a decryptor can read it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCiphertext {
    slots: Vec<f64>,
}

impl SimCiphertext {
    /// For serialization only.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.slots.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8], slots: usize) -> Result<Self, HeError> {
        if bytes.len() != slots * 8 {
            return Err(HeError::Format(format!("expected {} bytes, got {}", slots * 8, bytes.len())));
        }
        let slots = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { slots })
    }
}

#[derive(Debug, Clone)]
pub struct SimBackend {
    slots: usize,
    levels: usize,
}

impl Default for SimBackend {
    fn default() -> Self {
        Self { slots: DEFAULT_SLOTS, levels: DEFAULT_LEVELS }
    }
}

impl SimBackend {
    pub fn new(slots: usize, levels: usize) -> Result<Self, HeError> {
        if !slots.is_power_of_two() || slots < 2 {
            return Err(HeError::InvalidParameters(format!("slot count {slots} is not a power of two")));
        }
        Ok(Self { slots, levels })
    }

    fn padded(&self, values: &[f64]) -> Result<Vec<f64>, HeError> {
        if values.len() > self.slots {
            return Err(HeError::TooManyValues { got: values.len(), slots: self.slots });
        }
        let mut v = values.to_vec();
        v.resize(self.slots, 0.0);
        Ok(v)
    }
}

/// The simulator has no secret; decryption just opens the payload.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimDecryptor;

impl HeDecryptor<SimBackend> for SimDecryptor {
    fn decrypt_raw(&self, _backend: &SimBackend, ct: &SimCiphertext) -> Result<Vec<f64>, HeError> {
        Ok(ct.slots.clone())
    }
}

impl HeBackend for SimBackend {
    type Ciphertext = SimCiphertext;
    type Plaintext = Vec<f64>;
    type Product = Vec<f64>;

    fn slot_count(&self) -> usize {
        self.slots
    }

    fn max_level(&self) -> usize {
        self.levels
    }

    fn encrypt_raw(&self, values: &[f64]) -> Result<SimCiphertext, HeError> {
        Ok(SimCiphertext { slots: self.padded(values)? })
    }

    fn encode_raw(&self, values: &[f64], _level: usize) -> Result<Vec<f64>, HeError> {
        self.padded(values)
    }

    fn add_raw(&self, a: &SimCiphertext, b: &SimCiphertext) -> Result<SimCiphertext, HeError> {
        Ok(SimCiphertext { slots: a.slots.iter().zip(&b.slots).map(|(x, y)| x + y).collect() })
    }

    fn add_plain_raw(&self, a: &SimCiphertext, values: &[f64]) -> Result<SimCiphertext, HeError> {
        let p = self.padded(values)?;
        Ok(SimCiphertext { slots: a.slots.iter().zip(&p).map(|(x, y)| x + y).collect() })
    }

    fn rotate_raw(&self, a: &SimCiphertext, steps: usize) -> Result<SimCiphertext, HeError> {
        let mut slots = a.slots.clone();
        slots.rotate_left(steps % self.slots);
        Ok(SimCiphertext { slots })
    }

    fn square_raw(&self, a: &SimCiphertext) -> Result<SimCiphertext, HeError> {
        Ok(SimCiphertext { slots: a.slots.iter().map(|x| x * x).collect() })
    }

    fn mul_acc_raw(&self, acc: &mut Option<Vec<f64>>, a: &SimCiphertext, p: &Vec<f64>) -> Result<(), HeError> {
        match acc {
            None => *acc = Some(a.slots.iter().zip(p).map(|(x, y)| x * y).collect()),
            Some(sum) => {
                for ((s, x), y) in sum.iter_mut().zip(&a.slots).zip(p) {
                    *s += x * y;
                }
            }
        }
        Ok(())
    }

    fn finish_raw(&self, acc: Vec<f64>) -> Result<SimCiphertext, HeError> {
        Ok(SimCiphertext { slots: acc })
    }
}
