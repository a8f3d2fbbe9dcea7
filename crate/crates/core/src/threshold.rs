//! Threshold Paillier: the decryption exponent `beta * n'` is Shamir-shared
//! among `l` parties, each of which contributes a partial decryption
//! `c^(2 * delta * sk_i)`. Combining all `l` partials with the integer
//! Lagrange weights `mu_j` recovers the plaintext; no single share can.

use std::collections::BTreeSet;

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_traits::{One, Signed, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexint;
use crate::numtheory::{self, NumTheoryError, StrongPrime};
use crate::paillier::{l_function, random_unit, PaillierCiphertext, PaillierError, PaillierPublicKey};

/// Attempts at resampling `(a, b, beta)` before the ceremony gives up.
const CEREMONY_RETRIES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ThresholdError {
    #[error("share set incomplete: {0}")]
    IncompleteShareSet(String),
    #[error("combining partial decryptions failed: {0}")]
    CombineFailed(String),
    #[error("key mismatch: {0}")]
    KeyMismatch(String),
    #[error("invalid ceremony parameters: {0}")]
    InvalidParameters(String),
    #[error("key ceremony self-test failed {0} times")]
    CeremonyFailed(usize),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    NumTheory(#[from] NumTheoryError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdPublicKey {
    paillier: PaillierPublicKey,
    theta: BigUint,
    parties: usize,
    delta: BigUint,
    ceremony_id: String,
    // (4 * delta^2 * theta)^-1 mod n
    combine_factor: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdKeyShare {
    pub ceremony_id: String,
    pub index: u64,
    #[serde(with = "hexint")]
    pub sk_i: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialDecryption {
    pub index: u64,
    #[serde(with = "hexint")]
    pub c_i: BigUint,
    pub key_id: u64,
}

#[derive(Serialize, Deserialize)]
struct PublicKeyJson {
    ceremony_id: String,
    #[serde(with = "hexint")]
    n: BigUint,
    #[serde(with = "hexint")]
    g: BigUint,
    #[serde(with = "hexint")]
    theta: BigUint,
    l: usize,
    #[serde(with = "hexint")]
    delta: BigUint,
}

impl ThresholdPublicKey {
    pub fn from_parts(
        n: BigUint,
        g: BigUint,
        theta: BigUint,
        parties: usize,
        ceremony_id: String,
    ) -> Result<Self, ThresholdError> {
        if parties < 2 {
            return Err(ThresholdError::InvalidParameters("need at least two parties".into()));
        }
        let paillier = PaillierPublicKey::from_parts(n, g)?;
        let delta = numtheory::factorial(parties as u64);
        let n = paillier.n();
        let denom = (BigUint::from(4u32) * &delta * &delta % n) * &theta % n;
        let combine_factor = numtheory::mod_inv(&denom, n)
            .map_err(|_| ThresholdError::InvalidParameters("theta is not invertible mod n".into()))?;
        Ok(Self { paillier, theta, parties, delta, ceremony_id, combine_factor })
    }

    pub fn paillier(&self) -> &PaillierPublicKey {
        &self.paillier
    }

    pub fn n(&self) -> &BigUint {
        self.paillier.n()
    }

    pub fn theta(&self) -> &BigUint {
        &self.theta
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub fn delta(&self) -> &BigUint {
        &self.delta
    }

    pub fn ceremony_id(&self) -> &str {
        &self.ceremony_id
    }

    pub fn fingerprint(&self) -> u64 {
        self.paillier.fingerprint()
    }

    /// Same as plain Paillier, with the ceremony's generator `g`.
    pub fn encrypt<R: RngCore + CryptoRng>(&self, m: &BigUint, rng: &mut R) -> Result<PaillierCiphertext, ThresholdError> {
        Ok(self.paillier.encrypt(m, rng)?)
    }

    pub fn add(&self, c1: &PaillierCiphertext, c2: &PaillierCiphertext) -> Result<PaillierCiphertext, ThresholdError> {
        Ok(self.paillier.add(c1, c2)?)
    }

    /// `m = L(prod c_j^(2 mu_j) mod n^2) * (4 delta^2 theta)^-1 mod n`.
    ///
    /// Requires exactly one partial from every index in `1..=l`. Negative
    /// `mu_j` are applied as a power of the inverse of `c_j`.
    pub fn combine(&self, partials: &[PartialDecryption]) -> Result<BigUint, ThresholdError> {
        let l = self.parties;
        if partials.len() != l {
            return Err(ThresholdError::IncompleteShareSet(format!("got {} of {l} partial decryptions", partials.len())));
        }
        let indices: BTreeSet<u64> = partials.iter().map(|p| p.index).collect();
        if indices.len() != l || indices.iter().any(|&i| i == 0 || i > l as u64) {
            return Err(ThresholdError::IncompleteShareSet(format!("indices {indices:?} do not cover 1..={l}")));
        }
        if let Some(p) = partials.iter().find(|p| p.key_id != self.fingerprint()) {
            return Err(ThresholdError::KeyMismatch(format!("partial {} was made under key {:016x}", p.index, p.key_id)));
        }
        let n2 = self.paillier.n_squared();
        let mut acc = BigUint::one();
        for p in partials {
            if p.c_i.is_zero() || &p.c_i >= n2 {
                return Err(ThresholdError::CombineFailed(format!("partial {} out of range", p.index)));
            }
            let mu = numtheory::lagrange_mu(p.index, l as u64);
            let exp = numtheory::abs_biguint(&(&mu * 2));
            let base = if mu.is_negative() {
                numtheory::mod_inv(&p.c_i, n2)
                    .map_err(|_| ThresholdError::CombineFailed(format!("partial {} is not a unit", p.index)))?
            } else {
                p.c_i.clone()
            };
            acc = acc * base.modpow(&exp, n2) % n2;
        }
        let l_value = l_function(&acc, self.n())
            .ok_or_else(|| ThresholdError::CombineFailed("L division is not exact; a partial is corrupted".into()))?;
        Ok(l_value * &self.combine_factor % self.n())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PublicKeyJson {
            ceremony_id: self.ceremony_id.clone(),
            n: self.n().clone(),
            g: self.paillier.g().clone(),
            theta: self.theta.clone(),
            l: self.parties,
            delta: self.delta.clone(),
        })
        .expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, ThresholdError> {
        let raw: PublicKeyJson =
            serde_json::from_str(s).map_err(|e| ThresholdError::InvalidParameters(e.to_string()))?;
        let key = Self::from_parts(raw.n, raw.g, raw.theta, raw.l, raw.ceremony_id)?;
        if key.delta != raw.delta {
            return Err(ThresholdError::InvalidParameters("delta is not l!".into()));
        }
        Ok(key)
    }
}

impl ThresholdKeyShare {
    /// `c_i = c^(2 * delta * sk_i) mod n^2`.
    pub fn partial_decrypt(
        &self,
        tpk: &ThresholdPublicKey,
        c: &PaillierCiphertext,
    ) -> Result<PartialDecryption, ThresholdError> {
        if self.ceremony_id != tpk.ceremony_id {
            return Err(ThresholdError::KeyMismatch(format!(
                "share belongs to ceremony {} not {}",
                self.ceremony_id, tpk.ceremony_id
            )));
        }
        if c.key_id != tpk.fingerprint() {
            return Err(ThresholdError::KeyMismatch(format!("ciphertext was made under key {:016x}", c.key_id)));
        }
        let exp = BigUint::from(2u32) * &tpk.delta * &self.sk_i;
        Ok(PartialDecryption { index: self.index, c_i: c.value.modpow(&exp, tpk.paillier.n_squared()), key_id: c.key_id })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, ThresholdError> {
        serde_json::from_str(s).map_err(|e| ThresholdError::InvalidParameters(e.to_string()))
    }
}

/// Run the key ceremony with fresh strong primes of `bits_per_prime` bits.
pub fn ceremony_keygen<R: RngCore + CryptoRng>(
    bits_per_prime: u64,
    parties: usize,
    rng: &mut R,
) -> Result<(ThresholdPublicKey, Vec<ThresholdKeyShare>), ThresholdError> {
    if bits_per_prime < 8 {
        return Err(ThresholdError::InvalidParameters(format!("{bits_per_prime}-bit primes are too small")));
    }
    if parties < 2 {
        return Err(ThresholdError::InvalidParameters("need at least two parties".into()));
    }
    let p = numtheory::gen_strong_prime(bits_per_prime, rng)?;
    let q = loop {
        let q = numtheory::gen_strong_prime(bits_per_prime, rng)?;
        if q.p != p.p {
            break q;
        }
    };
    ceremony_from_primes(&p, &q, parties, rng)
}

/// Ceremony over given strong primes. `g = (1+n)^a * b^n`, `theta =
/// L(g^(beta n'))`, and `beta * n'` is shared with a degree `l - 1`
/// polynomial modulo `n n'`. A round-trip self-test validates the draw of
/// `(a, b, beta)`; failures resample them.
pub fn ceremony_from_primes<R: RngCore + CryptoRng>(
    p: &StrongPrime,
    q: &StrongPrime,
    parties: usize,
    rng: &mut R,
) -> Result<(ThresholdPublicKey, Vec<ThresholdKeyShare>), ThresholdError> {
    if p.p == q.p {
        return Err(ThresholdError::InvalidParameters("p and q must differ".into()));
    }
    let n = &p.p * &q.p;
    let n2 = &n * &n;
    let n_prime = &p.p_half * &q.p_half;
    let share_modulus = &n * &n_prime;
    let mut id_bytes = [0u8; 8];
    rng.fill_bytes(&mut id_bytes);
    let ceremony_id = id_bytes.iter().map(|b| format!("{b:02x}")).collect::<String>();

    for _ in 0..CEREMONY_RETRIES {
        let a = random_unit(&n, rng);
        let b = random_unit(&n, rng);
        let beta = random_unit(&n, rng);
        let g = (BigUint::one() + &a * &n) % &n2 * b.modpow(&n, &n2) % &n2;
        let secret = &beta * &n_prime;
        let Some(theta) = l_function(&g.modpow(&secret, &n2), &n) else {
            continue;
        };
        let theta = theta % &n;
        let Ok(tpk) = ThresholdPublicKey::from_parts(n.clone(), g, theta, parties, ceremony_id.clone()) else {
            continue;
        };
        let set = numtheory::shamir_share(&secret, parties, &share_modulus, rng)?;
        let shares: Vec<ThresholdKeyShare> = set
            .shares
            .into_iter()
            .map(|(index, sk_i)| ThresholdKeyShare { ceremony_id: ceremony_id.clone(), index, sk_i })
            .collect();

        let probe = rng.gen_biguint_below(&n);
        let c = tpk.encrypt(&probe, rng)?;
        let partials: Result<Vec<_>, _> = shares.iter().map(|s| s.partial_decrypt(&tpk, &c)).collect();
        if matches!(partials.and_then(|ps| tpk.combine(&ps)), Ok(m) if m == probe) {
            return Ok((tpk, shares));
        }
    }
    Err(ThresholdError::CeremonyFailed(CEREMONY_RETRIES))
}

/// Signed helper for callers that need `mu_j` directly.
pub fn lagrange_weight(index: u64, parties: usize) -> BigInt {
    numtheory::lagrange_mu(index, parties as u64)
}
