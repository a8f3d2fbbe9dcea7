//! Arbitrary-precision number theory shared by the Paillier variants and
//! Shamir secret sharing.
//!
//! Nothing here is constant time. Callers supply the randomness source so
//! that tests can run against a seeded generator while production paths use
//! the operating system RNG.

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

/// Miller-Rabin rounds; 4^-40 = 2^-80 false-positive bound.
pub const MILLER_RABIN_ROUNDS: usize = 40;

/// Candidate budget for [`gen_strong_prime`] before giving up.
pub const DEFAULT_PRIME_ATTEMPTS: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NumTheoryError {
    #[error("{0} is not invertible modulo the given modulus")]
    NotInvertible(String),
    #[error("no strong prime of {bits} bits found within {attempts} candidates")]
    PrimeSearchTimeout { bits: u64, attempts: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A safe prime `p = 2 * p_half + 1` with `p_half` prime.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrongPrime {
    pub p: BigUint,
    pub p_half: BigUint,
}

/// A full Shamir share set over `Z_modulus`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShamirShareSet {
    pub shares: Vec<(u64, BigUint)>,
    pub degree: usize,
    pub modulus: BigUint,
}

// Odd primes below 2^14 for trial division and sieving.
fn small_primes() -> &'static [u32] {
    use std::sync::OnceLock;
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        const LIMIT: usize = 1 << 14;
        let mut composite = vec![false; LIMIT];
        let mut out = Vec::new();
        for i in 2..LIMIT {
            if !composite[i] {
                if i > 2 {
                    out.push(i as u32);
                }
                let mut j = i * i;
                while j < LIMIT {
                    composite[j] = true;
                    j += i;
                }
            }
        }
        out
    })
}

/// `base^exp mod modulus`.
pub fn mod_exp(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
    assert!(modulus > &BigUint::one(), "modulus must exceed 1");
    base.modpow(exp, modulus)
}

/// Inverse of `a` modulo `modulus`, via the extended Euclidean algorithm.
pub fn mod_inv(a: &BigUint, modulus: &BigUint) -> Result<BigUint, NumTheoryError> {
    if modulus.is_zero() {
        return Err(NumTheoryError::InvalidArgument("zero modulus".into()));
    }
    let m = BigInt::from_biguint(Sign::Plus, modulus.clone());
    let a = BigInt::from_biguint(Sign::Plus, a % modulus);
    let ext = a.extended_gcd(&m);
    if !ext.gcd.is_one() {
        return Err(NumTheoryError::NotInvertible(a.to_str_radix(16)));
    }
    Ok(ext.x.mod_floor(&m).to_biguint().expect("non-negative after mod_floor"))
}

/// Inverse of a possibly negative `a` modulo `modulus`.
pub fn mod_inv_signed(a: &BigInt, modulus: &BigUint) -> Result<BigUint, NumTheoryError> {
    let m = BigInt::from_biguint(Sign::Plus, modulus.clone());
    let reduced = a.mod_floor(&m).to_biguint().expect("non-negative after mod_floor");
    mod_inv(&reduced, modulus)
}

/// Reduce a signed integer into `[0, modulus)`.
pub fn reduce_signed(a: &BigInt, modulus: &BigUint) -> BigUint {
    let m = BigInt::from_biguint(Sign::Plus, modulus.clone());
    a.mod_floor(&m).to_biguint().expect("non-negative after mod_floor")
}

/// Probabilistic primality: trial division by small primes, then
/// `rounds` Miller-Rabin rounds with random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    if let Some(small) = n.to_u64() {
        if small < 2 {
            return false;
        }
        if small < 4 {
            return true;
        }
    }
    if n.is_even() {
        return false;
    }
    for &p in small_primes() {
        let p_big = BigUint::from(p);
        if *n == p_big {
            return true;
        }
        if (n % p).is_zero() {
            return false;
        }
    }
    // Every composite below 2^28 has a factor below 2^14.
    if n.bits() <= 28 {
        return true;
    }
    miller_rabin(n, rounds, rng)
}

fn miller_rabin<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let one = BigUint::one();
    let two = BigUint::from(2u32);
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;

    let witness_passes = |a: &BigUint| -> bool {
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            return true;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                return true;
            }
            if x == one {
                return false;
            }
        }
        false
    };

    // Base 2 first: it rejects almost every composite for free.
    if !witness_passes(&two) {
        return false;
    }
    let upper = n - &one;
    for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &upper);
        if !witness_passes(&a) {
            return false;
        }
    }
    true
}

/// Random prime with exactly `bits` bits. The top two bits are set so a
/// product of two such primes has exactly `2 * bits` bits.
pub fn gen_prime<R: RngCore + CryptoRng>(bits: u64, rng: &mut R) -> Result<BigUint, NumTheoryError> {
    if bits < 2 {
        return Err(NumTheoryError::InvalidArgument(format!("cannot generate a {bits}-bit prime")));
    }
    for _ in 0..DEFAULT_PRIME_ATTEMPTS {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        if bits > 2 {
            candidate.set_bit(bits - 2, true);
            candidate.set_bit(0, true);
        }
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return Ok(candidate);
        }
    }
    Err(NumTheoryError::PrimeSearchTimeout { bits, attempts: DEFAULT_PRIME_ATTEMPTS })
}

/// Safe prime `p` of exactly `bits` bits with `(p - 1) / 2` prime. From 17
/// bits up, the top two bits are set as in [`gen_prime`].
pub fn gen_strong_prime<R: RngCore + CryptoRng>(bits: u64, rng: &mut R) -> Result<StrongPrime, NumTheoryError> {
    gen_strong_prime_with_budget(bits, DEFAULT_PRIME_ATTEMPTS, rng)
}

/// [`gen_strong_prime`] with an explicit candidate budget.
///
/// Samples `p'` first and tests `2p' + 1`. Candidates walk upward in steps of
/// 6 from a random `p' = 5 (mod 6)` start while an incremental sieve rejects
/// any `p'` where either `p'` or `2p' + 1` has a small factor.
pub fn gen_strong_prime_with_budget<R: RngCore + CryptoRng>(
    bits: u64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<StrongPrime, NumTheoryError> {
    if bits < 3 {
        return Err(NumTheoryError::InvalidArgument(format!("no safe prime has {bits} bits")));
    }
    let half_bits = bits - 1;
    if half_bits < 16 {
        return small_strong_prime(bits, max_attempts, rng);
    }

    let sieve = small_primes();
    let mut attempts = 0usize;
    while attempts < max_attempts {
        let mut start = rng.gen_biguint(half_bits);
        start.set_bit(half_bits - 1, true);
        start.set_bit(half_bits - 2, true);
        // Align to 5 mod 6: odd, and 2p'+1 not divisible by 3.
        let r = (&start % 6u32).to_u32().expect("small");
        start += (5 + 6 - r) % 6;
        let mut residues: Vec<u32> = sieve.iter().map(|&p| (&start % p).to_u32().expect("small")).collect();
        let mut candidate = start;
        // Walk a window before resampling so the sieve pays off.
        for _ in 0..4096 {
            if attempts >= max_attempts {
                break;
            }
            if candidate.bits() != half_bits {
                break;
            }
            attempts += 1;
            let sieved = sieve.iter().zip(&residues).all(|(&p, &res)| {
                // p' divisible by p, or 2p'+1 divisible by p.
                res != 0 && (2 * res as u64 + 1) % p as u64 != 0
            });
            if sieved {
                let p = (&candidate << 1u32) + 1u32;
                // Cheap base-2 checks on both before the full rounds.
                if fermat_base2(&candidate)
                    && fermat_base2(&p)
                    && is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng)
                    && is_probable_prime(&p, MILLER_RABIN_ROUNDS, rng)
                {
                    return Ok(StrongPrime { p, p_half: candidate });
                }
            }
            candidate += 6u32;
            for (res, &p) in residues.iter_mut().zip(sieve) {
                *res = (*res + 6) % p;
            }
        }
    }
    Err(NumTheoryError::PrimeSearchTimeout { bits, attempts: max_attempts })
}

fn fermat_base2(n: &BigUint) -> bool {
    let two = BigUint::from(2u32);
    two.modpow(&(n - 1u32), n).is_one()
}

fn small_strong_prime<R: RngCore + CryptoRng>(
    bits: u64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<StrongPrime, NumTheoryError> {
    let lo = 1u64 << (bits - 2);
    let hi = 1u64 << (bits - 1);
    let candidates: Vec<u64> = (lo..hi)
        .filter(|&q| is_small_prime(q) && is_small_prime(2 * q + 1))
        .collect();
    if candidates.is_empty() || max_attempts == 0 {
        return Err(NumTheoryError::PrimeSearchTimeout { bits, attempts: max_attempts });
    }
    let q = candidates[(rng.next_u64() % candidates.len() as u64) as usize];
    Ok(StrongPrime { p: BigUint::from(2 * q + 1), p_half: BigUint::from(q) })
}

fn is_small_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// `l!` as an arbitrary-precision integer.
pub fn factorial(l: u64) -> BigUint {
    (1..=l).fold(BigUint::one(), |acc, k| acc * k)
}

/// Split `secret` into `count` shares of a random polynomial of degree
/// `count - 1` over `Z_modulus`.
pub fn shamir_share<R: RngCore + CryptoRng>(
    secret: &BigUint,
    count: usize,
    modulus: &BigUint,
    rng: &mut R,
) -> Result<ShamirShareSet, NumTheoryError> {
    if count < 2 {
        return Err(NumTheoryError::InvalidArgument("Shamir sharing needs at least 2 parties".into()));
    }
    shamir_share_with_degree(secret, count, count - 1, modulus, rng)
}

/// Shamir sharing with an explicit polynomial degree (`degree + 1` shares
/// reconstruct).
pub fn shamir_share_with_degree<R: RngCore + CryptoRng>(
    secret: &BigUint,
    count: usize,
    degree: usize,
    modulus: &BigUint,
    rng: &mut R,
) -> Result<ShamirShareSet, NumTheoryError> {
    if secret >= modulus {
        return Err(NumTheoryError::InvalidArgument("secret must be below the modulus".into()));
    }
    if degree >= count {
        return Err(NumTheoryError::InvalidArgument(format!(
            "degree {degree} needs at least {} shares, got {count}",
            degree + 1
        )));
    }
    let mut coeffs = Vec::with_capacity(degree + 1);
    coeffs.push(secret.clone());
    for _ in 0..degree {
        coeffs.push(rng.gen_biguint_below(modulus));
    }
    let shares = (1..=count as u64)
        .map(|i| {
            // Horner evaluation at x = i.
            let x = BigUint::from(i);
            let value = coeffs.iter().rev().fold(BigUint::zero(), |acc, c| (acc * &x + c) % modulus);
            (i, value)
        })
        .collect();
    Ok(ShamirShareSet { shares, degree, modulus: modulus.clone() })
}

/// Integer Lagrange coefficient at zero scaled by `l!`:
/// `l! * prod_{j' != j} j' / (j' - j)` over indices `1..=l`.
pub fn lagrange_mu(j: u64, l: u64) -> BigInt {
    assert!(j >= 1 && j <= l, "share index {j} outside 1..={l}");
    lagrange_mu_over(j, &(1..=l).collect::<Vec<_>>(), &BigInt::from_biguint(Sign::Plus, factorial(l)))
}

/// Integer Lagrange coefficient at zero for index `j` over an arbitrary index
/// set, scaled by `delta` (which must clear the denominator).
pub fn lagrange_mu_over(j: u64, indices: &[u64], delta: &BigInt) -> BigInt {
    let mut num = delta.clone();
    let mut den = BigInt::one();
    for &other in indices.iter().filter(|&&o| o != j) {
        num *= BigInt::from(other);
        den *= BigInt::from(other as i64 - j as i64);
    }
    let (q, r) = num.div_rem(&den);
    debug_assert!(r.is_zero(), "delta does not clear the Lagrange denominator");
    q
}

/// Recover `P(0)` from a share set: `sum mu_j * s_j = delta * P(0)`, then
/// divide by `delta` modulo the share modulus. Uses the first `degree + 1`
/// shares.
pub fn shamir_reconstruct(set: &ShamirShareSet) -> Result<BigUint, NumTheoryError> {
    let needed = set.degree + 1;
    if set.shares.len() < needed {
        return Err(NumTheoryError::InvalidArgument(format!(
            "{} shares cannot reconstruct a degree-{} polynomial",
            set.shares.len(),
            set.degree
        )));
    }
    let used = &set.shares[..needed];
    let indices: Vec<u64> = used.iter().map(|(i, _)| *i).collect();
    let max_index = indices.iter().copied().max().unwrap_or(1);
    let delta = BigInt::from_biguint(Sign::Plus, factorial(max_index));
    let modulus = BigInt::from_biguint(Sign::Plus, set.modulus.clone());
    let mut acc = BigInt::zero();
    for (i, value) in used {
        let mu = lagrange_mu_over(*i, &indices, &delta);
        acc += mu * BigInt::from_biguint(Sign::Plus, value.clone());
    }
    let scaled = reduce_signed(&acc, &set.modulus);
    let delta_inv = mod_inv_signed(&delta, &set.modulus)?;
    Ok((scaled * delta_inv) % modulus.magnitude())
}

/// `|x|` of a signed integer as unsigned.
pub fn abs_biguint(x: &BigInt) -> BigUint {
    x.abs().to_biguint().expect("absolute value is non-negative")
}
