//! Paillier's additively homomorphic cryptosystem over `Z_n`.
//!
//! Keys use `g = n + 1`, so `g^m mod n^2` collapses to `1 + m*n` and
//! encryption costs a single modular exponentiation (`x^n`).

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexint;
use crate::numtheory::{self, NumTheoryError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PaillierError {
    #[error("message is outside [0, n)")]
    MessageOutOfRange,
    #[error("ciphertext is not a valid encryption under this key")]
    InvalidCiphertext,
    #[error("ciphertexts were produced under different keys ({0:016x} vs {1:016x})")]
    KeyMismatch(u64, u64),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error(transparent)]
    NumTheory(#[from] NumTheoryError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    n: BigUint,
    g: BigUint,
    n_squared: BigUint,
    fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierSecretKey {
    lambda: BigUint,
    mu: BigUint,
}

/// A ciphertext in `[1, n^2)` tagged with the fingerprint of its key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PaillierCiphertext {
    #[serde(with = "hexint")]
    pub value: BigUint,
    pub key_id: u64,
}

#[derive(Serialize, Deserialize)]
struct PublicKeyJson {
    #[serde(with = "hexint")]
    n: BigUint,
    #[serde(with = "hexint")]
    g: BigUint,
}

#[derive(Serialize, Deserialize)]
struct SecretKeyJson {
    #[serde(with = "hexint")]
    lambda: BigUint,
}

/// `L(u) = (u - 1) / n`, `None` when the division is inexact.
pub(crate) fn l_function(u: &BigUint, n: &BigUint) -> Option<BigUint> {
    if u.is_zero() {
        return None;
    }
    let (q, r) = (u - 1u32).div_rem(n);
    r.is_zero().then_some(q)
}

/// Random unit of `Z_n`.
pub(crate) fn random_unit<R: RngCore + CryptoRng>(n: &BigUint, rng: &mut R) -> BigUint {
    loop {
        let x = rng.gen_biguint_range(&BigUint::one(), n);
        if x.gcd(n).is_one() {
            return x;
        }
    }
}

impl PaillierPublicKey {
    /// Public key with an arbitrary generator `g`.
    pub fn from_parts(n: BigUint, g: BigUint) -> Result<Self, PaillierError> {
        if n < BigUint::from(6u32) {
            return Err(PaillierError::InvalidKey("modulus too small".into()));
        }
        let n_squared = &n * &n;
        if g.is_zero() || g >= n_squared {
            return Err(PaillierError::InvalidKey("generator outside [1, n^2)".into()));
        }
        let fingerprint = hexint::fingerprint(&n);
        Ok(Self { n, g, n_squared, fingerprint })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// `c = g^m * x^n mod n^2` with fresh random `x` in `Z_n^*`.
    pub fn encrypt<R: RngCore + CryptoRng>(&self, m: &BigUint, rng: &mut R) -> Result<PaillierCiphertext, PaillierError> {
        if m >= &self.n {
            return Err(PaillierError::MessageOutOfRange);
        }
        let x = random_unit(&self.n, rng);
        let gm = if self.g == &self.n + 1u32 {
            (BigUint::one() + m * &self.n) % &self.n_squared
        } else {
            self.g.modpow(m, &self.n_squared)
        };
        let value = gm * x.modpow(&self.n, &self.n_squared) % &self.n_squared;
        Ok(PaillierCiphertext { value, key_id: self.fingerprint })
    }

    fn check(&self, c: &PaillierCiphertext) -> Result<(), PaillierError> {
        if c.key_id != self.fingerprint {
            return Err(PaillierError::KeyMismatch(self.fingerprint, c.key_id));
        }
        Ok(())
    }

    /// Homomorphic addition: `E(m1) * E(m2) = E(m1 + m2)`.
    pub fn add(&self, c1: &PaillierCiphertext, c2: &PaillierCiphertext) -> Result<PaillierCiphertext, PaillierError> {
        self.check(c1)?;
        self.check(c2)?;
        Ok(PaillierCiphertext { value: &c1.value * &c2.value % &self.n_squared, key_id: self.fingerprint })
    }

    /// Homomorphic scalar product: `E(m)^k = E(k * m)`.
    pub fn scalar_mul(&self, c: &PaillierCiphertext, k: &BigUint) -> Result<PaillierCiphertext, PaillierError> {
        self.check(c)?;
        Ok(PaillierCiphertext { value: c.value.modpow(k, &self.n_squared), key_id: self.fingerprint })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PublicKeyJson { n: self.n.clone(), g: self.g.clone() }).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, PaillierError> {
        let raw: PublicKeyJson = serde_json::from_str(s).map_err(|e| PaillierError::InvalidKey(e.to_string()))?;
        Self::from_parts(raw.n, raw.g)
    }
}

impl PaillierSecretKey {
    /// Rebuild the secret key from `lambda`, recomputing the cached factor
    /// `L(g^lambda mod n^2)^-1 mod n`.
    pub fn from_lambda(lambda: BigUint, pk: &PaillierPublicKey) -> Result<Self, PaillierError> {
        let u = pk.g.modpow(&lambda, &pk.n_squared);
        let l = l_function(&u, &pk.n).ok_or_else(|| PaillierError::InvalidKey("g^lambda is not 1 mod n".into()))?;
        let mu = numtheory::mod_inv(&l, &pk.n)?;
        Ok(Self { lambda, mu })
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    /// `m = L(c^lambda mod n^2) * mu mod n`.
    pub fn decrypt(&self, pk: &PaillierPublicKey, c: &PaillierCiphertext) -> Result<BigUint, PaillierError> {
        pk.check(c)?;
        if c.value.is_zero() || c.value >= pk.n_squared {
            return Err(PaillierError::InvalidCiphertext);
        }
        let u = c.value.modpow(&self.lambda, &pk.n_squared);
        let l = l_function(&u, &pk.n).ok_or(PaillierError::InvalidCiphertext)?;
        Ok(l * &self.mu % &pk.n)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SecretKeyJson { lambda: self.lambda.clone() }).expect("serializable")
    }

    pub fn from_json(s: &str, pk: &PaillierPublicKey) -> Result<Self, PaillierError> {
        let raw: SecretKeyJson = serde_json::from_str(s).map_err(|e| PaillierError::InvalidKey(e.to_string()))?;
        Self::from_lambda(raw.lambda, pk)
    }
}

/// Keypair from two distinct primes, with `g = n + 1`.
pub fn keypair_from_primes(p: &BigUint, q: &BigUint) -> Result<(PaillierPublicKey, PaillierSecretKey), PaillierError> {
    if p == q {
        return Err(PaillierError::InvalidKey("p and q must differ".into()));
    }
    let n = p * q;
    let lambda = (p - 1u32).lcm(&(q - 1u32));
    let pk = PaillierPublicKey::from_parts(n.clone(), &n + 1u32)?;
    let sk = PaillierSecretKey::from_lambda(lambda, &pk)?;
    Ok((pk, sk))
}

/// Fresh keypair with two `bits_per_prime`-bit primes.
pub fn keygen<R: RngCore + CryptoRng>(
    bits_per_prime: u64,
    rng: &mut R,
) -> Result<(PaillierPublicKey, PaillierSecretKey), PaillierError> {
    if bits_per_prime < 8 {
        return Err(PaillierError::InvalidKey(format!("{bits_per_prime}-bit primes are too small")));
    }
    loop {
        let p = numtheory::gen_prime(bits_per_prime, rng)?;
        let q = numtheory::gen_prime(bits_per_prime, rng)?;
        if p == q || !(&p * &q).gcd(&((&p - 1u32) * (&q - 1u32))).is_one() {
            continue;
        }
        return keypair_from_primes(&p, &q);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(bits: u64) -> (PaillierPublicKey, PaillierSecretKey, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (pk, sk) = keygen(bits, &mut rng).unwrap();
        (pk, sk, rng)
    }

    #[test]
    fn hand_sized_key() {
        let (pk, sk) = keypair_from_primes(&BigUint::from(5u32), &BigUint::from(7u32)).unwrap();
        assert_eq!(pk.n(), &BigUint::from(35u32));
        assert_eq!(sk.lambda(), &BigUint::from(12u32));
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for m in 0u32..35 {
            let c = pk.encrypt(&BigUint::from(m), &mut rng).unwrap();
            assert_eq!(sk.decrypt(&pk, &c).unwrap(), BigUint::from(m));
        }
    }

    #[test]
    fn keygen_shapes() {
        let (pk, _, _) = setup(8);
        assert!(pk.n().bits() >= 15);
        let (pk, _, _) = setup(128);
        assert!((255..=256).contains(&pk.n().bits()));
        assert_eq!(pk.g(), &(pk.n() + 1u32));
    }

    #[test]
    fn boundary_messages() {
        let (pk, sk, mut rng) = setup(64);
        let zero = pk.encrypt(&BigUint::zero(), &mut rng).unwrap();
        assert!(sk.decrypt(&pk, &zero).unwrap().is_zero());
        let top = pk.n() - 1u32;
        let c = pk.encrypt(&top, &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk, &c).unwrap(), top);
        assert_eq!(pk.encrypt(pk.n(), &mut rng), Err(PaillierError::MessageOutOfRange));
    }

    #[test]
    fn small_homomorphic_identities() {
        let (pk, sk, mut rng) = setup(64);
        let e = |m: u32, rng: &mut ChaCha20Rng| pk.encrypt(&BigUint::from(m), rng).unwrap();
        let sum = pk.add(&e(2, &mut rng), &e(3, &mut rng)).unwrap();
        assert_eq!(sk.decrypt(&pk, &sum).unwrap(), BigUint::from(5u32));
        let prod = pk.scalar_mul(&e(7, &mut rng), &BigUint::from(3u32)).unwrap();
        assert_eq!(sk.decrypt(&pk, &prod).unwrap(), BigUint::from(21u32));

        let x = rng.gen_biguint_below(pk.n());
        let c = pk.encrypt(&x, &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk, &pk.add(&e(0, &mut rng), &c).unwrap()).unwrap(), x);
        assert_eq!(sk.decrypt(&pk, &pk.scalar_mul(&c, &BigUint::one()).unwrap()).unwrap(), x);
        assert!(sk.decrypt(&pk, &pk.scalar_mul(&c, &BigUint::zero()).unwrap()).unwrap().is_zero());
        let k17 = pk.scalar_mul(&c, &BigUint::from(17u32)).unwrap();
        assert_eq!(sk.decrypt(&pk, &k17).unwrap(), x * 17u32 % pk.n());

        let wrap = pk.add(&pk.encrypt(&(pk.n() - 1u32), &mut rng).unwrap(), &e(1, &mut rng)).unwrap();
        assert!(sk.decrypt(&pk, &wrap).unwrap().is_zero());
    }

    #[test]
    fn three_way_sum_and_reordering() {
        let (pk, sk, mut rng) = setup(96);
        let ms: Vec<BigUint> = (0..3).map(|_| rng.gen_biguint_below(pk.n())).collect();
        let cs: Vec<_> = ms.iter().map(|m| pk.encrypt(m, &mut rng).unwrap()).collect();
        let expected = ms.iter().fold(BigUint::zero(), |a, m| a + m) % pk.n();
        let left = pk.add(&pk.add(&cs[0], &cs[1]).unwrap(), &cs[2]).unwrap();
        let right = pk.add(&cs[2], &pk.add(&cs[1], &cs[0]).unwrap()).unwrap();
        assert_eq!(sk.decrypt(&pk, &left).unwrap(), expected);
        assert_eq!(sk.decrypt(&pk, &right).unwrap(), expected);
    }

    #[test]
    fn encryption_is_probabilistic() {
        let (pk, sk, mut rng) = setup(64);
        let m = BigUint::from(42u32);
        let cts: std::collections::HashSet<_> = (0..100).map(|_| pk.encrypt(&m, &mut rng).unwrap().value).collect();
        assert_eq!(cts.len(), 100);
        for v in cts {
            let c = PaillierCiphertext { value: v, key_id: pk.fingerprint() };
            assert_eq!(sk.decrypt(&pk, &c).unwrap(), m);
        }
    }

    #[test]
    fn key_mismatch_and_invalid_ciphertexts() {
        let (pk, sk, mut rng) = setup(64);
        let (other, _, _) = {
            let mut r2 = ChaCha20Rng::seed_from_u64(99);
            let (a, b) = keygen(64, &mut r2).unwrap();
            (a, b, r2)
        };
        let c1 = pk.encrypt(&BigUint::from(1u32), &mut rng).unwrap();
        let c2 = other.encrypt(&BigUint::from(1u32), &mut rng).unwrap();
        assert!(matches!(pk.add(&c1, &c2), Err(PaillierError::KeyMismatch(..))));
        let zero = PaillierCiphertext { value: BigUint::zero(), key_id: pk.fingerprint() };
        assert_eq!(sk.decrypt(&pk, &zero), Err(PaillierError::InvalidCiphertext));
        // n itself shares a factor with n^2; c^lambda is not 1 mod n.
        let bad = PaillierCiphertext { value: pk.n().clone(), key_id: pk.fingerprint() };
        assert_eq!(sk.decrypt(&pk, &bad), Err(PaillierError::InvalidCiphertext));
    }

    #[test]
    fn json_roundtrip() {
        let (pk, sk, _) = setup(64);
        let pk_json = pk.to_json();
        let v: serde_json::Value = serde_json::from_str(&pk_json).unwrap();
        assert_eq!(v["n"].as_str().unwrap(), pk.n().to_str_radix(16));
        let pk2 = PaillierPublicKey::from_json(&pk_json).unwrap();
        assert_eq!(pk2, pk);
        let sk2 = PaillierSecretKey::from_json(&sk.to_json(), &pk2).unwrap();
        assert_eq!(sk2, sk);
    }

    fn shared_key() -> &'static (PaillierPublicKey, PaillierSecretKey) {
        static KEY: std::sync::OnceLock<(PaillierPublicKey, PaillierSecretKey)> = std::sync::OnceLock::new();
        KEY.get_or_init(|| keygen(72, &mut ChaCha20Rng::seed_from_u64(3)).unwrap())
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn additive_and_scalar_laws(a in proptest::prelude::any::<u64>(), b in proptest::prelude::any::<u64>(), k in 0u64..1_000_000) {
            let (pk, sk) = shared_key();
            let mut rng = ChaCha20Rng::seed_from_u64(a ^ b);
            let (m1, m2) = (BigUint::from(a), BigUint::from(b));
            let c1 = pk.encrypt(&m1, &mut rng).unwrap();
            let c2 = pk.encrypt(&m2, &mut rng).unwrap();
            proptest::prop_assert_eq!(sk.decrypt(&pk, &pk.add(&c1, &c2).unwrap()).unwrap(), (&m1 + &m2) % pk.n());
            let kk = BigUint::from(k);
            proptest::prop_assert_eq!(sk.decrypt(&pk, &pk.scalar_mul(&c1, &kk).unwrap()).unwrap(), &m1 * &kk % pk.n());
        }
    }
}
