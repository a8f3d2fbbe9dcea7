//! Parameters, the RNS modulus chain, and residue-polynomial helpers.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arith::{primes_around, primes_below, Modulus, NttTable};
use super::encoding::Encoder;
use crate::he::HeError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkksParams {
    pub ring_degree: usize,
    /// Rescaling primes, i.e. the multiplicative budget.
    pub levels: usize,
    pub scale_bits: u32,
    pub base_bits: u32,
    pub special_bits: u32,
    pub sigma: f64,
}

impl Default for CkksParams {
    fn default() -> Self {
        Self { ring_degree: 8192, levels: 5, scale_bits: 40, base_bits: 60, special_bits: 61, sigma: 3.2 }
    }
}

impl CkksParams {
    pub fn with_levels(levels: usize) -> Self {
        Self { levels, ..Self::default() }
    }

    pub fn slot_count(&self) -> usize {
        self.ring_degree / 2
    }

    pub fn validate(&self) -> Result<(), HeError> {
        if !self.ring_degree.is_power_of_two() || !(16..=65536).contains(&self.ring_degree) {
            return Err(HeError::UnsupportedDegree(self.ring_degree));
        }
        if self.levels == 0 || self.levels > 30 {
            return Err(HeError::InvalidParameters(format!("{} levels", self.levels)));
        }
        if !(20..=50).contains(&self.scale_bits)
            || self.base_bits <= self.scale_bits
            || self.base_bits > 61
            || !(self.base_bits..=61).contains(&self.special_bits)
        {
            return Err(HeError::InvalidParameters(format!(
                "bit sizes scale={} base={} special={}",
                self.scale_bits, self.base_bits, self.special_bits
            )));
        }
        if !(self.sigma > 0.0 && self.sigma < 100.0) {
            return Err(HeError::InvalidParameters(format!("sigma {}", self.sigma)));
        }
        Ok(())
    }
}

/// Residues of one polynomial, `res[i]` modulo the `i`-th active prime,
/// always in NTT (evaluation) form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Poly {
    pub res: Vec<Vec<u64>>,
}

impl Poly {
    pub fn level(&self) -> usize {
        self.res.len() - 1
    }

    pub fn truncated(&self, level: usize) -> Poly {
        Poly { res: self.res[..=level].to_vec() }
    }
}

/// Immutable per-parameter-set data shared by keys and ciphertexts.
#[derive(Debug)]
pub struct Context {
    pub params: CkksParams,
    pub n: usize,
    /// `q_0 .. q_L` followed by the special prime.
    pub tables: Vec<NttTable>,
    pub encoder: Encoder,
    /// `rescale_inv[l][i] = q_l^-1 mod q_i` for `i < l`.
    rescale_inv: Vec<Vec<u64>>,
    /// `P^-1 mod q_i`.
    special_inv: Vec<u64>,
    /// `P mod q_i`.
    special_mod: Vec<u64>,
    pub hash: u64,
}

impl Context {
    pub fn new(params: CkksParams) -> Result<Self, HeError> {
        params.validate()?;
        let n = params.ring_degree;
        let mut chain = primes_below(params.base_bits, n, 1, &[]);
        let rescale = primes_around(params.scale_bits, n, params.levels, &chain);
        chain.extend(rescale);
        let special = primes_below(params.special_bits, n, 1, &chain)[0];
        let mut all = chain.clone();
        all.push(special);
        let tables: Vec<NttTable> = all.iter().map(|&q| NttTable::new(q, n)).collect();
        let m = |i: usize| tables[i].modulus;
        let rescale_inv = (0..chain.len())
            .map(|l| (0..l).map(|i| m(i).inv(m(i).reduce(chain[l]))).collect())
            .collect();
        let special_mod: Vec<u64> = (0..chain.len()).map(|i| m(i).reduce(special)).collect();
        let special_inv = (0..chain.len()).map(|i| m(i).inv(special_mod[i])).collect();

        let mut h = Sha256::new();
        h.update(b"ckks-params");
        h.update((n as u64).to_le_bytes());
        h.update(params.scale_bits.to_le_bytes());
        for q in &all {
            h.update(q.to_le_bytes());
        }
        let digest = h.finalize();
        let hash = u64::from_be_bytes(digest[..8].try_into().expect("32-byte digest"));

        Ok(Self { encoder: Encoder::new(n), params, n, tables, rescale_inv, special_inv, special_mod, hash })
    }

    pub fn max_level(&self) -> usize {
        self.params.levels
    }

    /// Table index of the special prime.
    pub fn special(&self) -> usize {
        self.params.levels + 1
    }

    pub fn modulus(&self, i: usize) -> &Modulus {
        &self.tables[i].modulus
    }

    pub fn modulus_chain(&self) -> Vec<u64> {
        self.tables[..=self.max_level()].iter().map(|t| t.modulus.value()).collect()
    }

    pub fn default_scale(&self) -> f64 {
        2f64.powi(self.params.scale_bits as i32)
    }

    /// Signed small coefficients to NTT residues for the given table indices.
    pub fn ntt_signed(&self, coeffs: &[i64], primes: impl IntoIterator<Item = usize>) -> Vec<Vec<u64>> {
        primes
            .into_iter()
            .map(|i| {
                let t = &self.tables[i];
                let mut r: Vec<u64> = coeffs.iter().map(|&c| t.modulus.reduce_i64(c)).collect();
                t.forward(&mut r);
                r
            })
            .collect()
    }

    pub fn sample_uniform<R: RngCore + ?Sized>(&self, rng: &mut R, prime: usize) -> Vec<u64> {
        let q = self.tables[prime].modulus.value();
        (0..self.n).map(|_| rng.gen_range(0..q)).collect()
    }

    pub fn sample_ternary<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        (0..self.n).map(|_| rng.gen_range(-1i64..=1)).collect()
    }

    pub fn sample_error<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        let sigma = self.params.sigma;
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        let bound = 6.0 * sigma;
        (0..self.n)
            .map(|_| loop {
                let x: f64 = normal.sample(rng);
                if x.abs() <= bound {
                    break x.round() as i64;
                }
            })
            .collect()
    }

    pub fn add_into(&self, acc: &mut Poly, other: &Poly) {
        for (i, (a, b)) in acc.res.iter_mut().zip(&other.res).enumerate() {
            let m = self.modulus(i);
            for (x, &y) in a.iter_mut().zip(b) {
                *x = m.add(*x, y);
            }
        }
    }

    pub fn sub_into(&self, acc: &mut Poly, other: &Poly) {
        for (i, (a, b)) in acc.res.iter_mut().zip(&other.res).enumerate() {
            let m = self.modulus(i);
            for (x, &y) in a.iter_mut().zip(b) {
                *x = m.sub(*x, y);
            }
        }
    }

    pub fn negate(&self, p: &mut Poly) {
        for (i, r) in p.res.iter_mut().enumerate() {
            let m = self.modulus(i);
            for x in r.iter_mut() {
                *x = m.neg(*x);
            }
        }
    }

    pub fn mul(&self, a: &Poly, b: &Poly) -> Poly {
        let res = a
            .res
            .iter()
            .zip(&b.res)
            .enumerate()
            .map(|(i, (x, y))| {
                let m = self.modulus(i);
                x.iter().zip(y).map(|(&u, &v)| m.mul(u, v)).collect()
            })
            .collect();
        Poly { res }
    }

    /// `acc += a * b` over the common prefix of primes.
    pub fn mul_acc(&self, acc: &mut Poly, a: &Poly, b: &Poly) {
        for (i, ((s, x), y)) in acc.res.iter_mut().zip(&a.res).zip(&b.res).enumerate() {
            let m = self.modulus(i);
            for ((t, &u), &v) in s.iter_mut().zip(x).zip(y) {
                *t = m.add(*t, m.mul(u, v));
            }
        }
    }

    /// Apply an NTT-domain index map to every residue.
    pub fn permute(&self, p: &Poly, map: &[usize]) -> Poly {
        Poly { res: p.res.iter().map(|r| map.iter().map(|&j| r[j]).collect()).collect() }
    }

    /// Divide by the top prime with rounding and drop it.
    pub fn rescale(&self, p: &mut Poly) {
        let l = p.level();
        assert!(l > 0, "cannot rescale at level 0");
        let mut top = p.res.pop().expect("nonempty");
        let mt = *self.modulus(l);
        self.tables[l].inverse(&mut top);
        // rounding instead of flooring: add q_l / 2 before dividing
        let half = mt.value() / 2;
        for x in top.iter_mut() {
            *x = mt.add(*x, half);
        }
        for (i, r) in p.res.iter_mut().enumerate() {
            let m = *self.modulus(i);
            let half_i = m.reduce(half);
            let mut t: Vec<u64> = top.iter().map(|&x| m.sub(m.reduce(x), half_i)).collect();
            self.tables[i].forward(&mut t);
            let inv = self.rescale_inv[l][i];
            let inv_s = m.shoup(inv);
            for (x, &y) in r.iter_mut().zip(&t) {
                *x = m.mul_shoup(m.sub(*x, y), inv, inv_s);
            }
        }
    }

    /// Split a level-`l` polynomial into one digit per prime, each lifted
    /// to primes `0..=l` and the special prime (in that order).
    pub fn decompose(&self, p: &Poly) -> Vec<Vec<Vec<u64>>> {
        let l = p.level();
        let targets: Vec<usize> = (0..=l).chain(std::iter::once(self.special())).collect();
        (0..=l)
            .map(|j| {
                let mut coeffs = p.res[j].clone();
                self.tables[j].inverse(&mut coeffs);
                targets
                    .iter()
                    .map(|&t| {
                        if t == j {
                            p.res[j].clone()
                        } else {
                            let m = self.modulus(t);
                            let mut r: Vec<u64> = coeffs.iter().map(|&c| m.reduce(c)).collect();
                            self.tables[t].forward(&mut r);
                            r
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Inner product of (optionally permuted) digits with a key-switching
    /// key, then division by the special prime. Returns `(u_a, u_b)` with
    /// `u_b - u_a * s ≈ d * s'` where `d` is the decomposed polynomial.
    pub fn key_switch(&self, digits: &[Vec<Vec<u64>>], key: &KeySwitchMaterial, map: Option<&[usize]>) -> (Poly, Poly) {
        let l = digits.len() - 1;
        let special = self.special();
        let targets: Vec<usize> = (0..=l).chain(std::iter::once(special)).collect();
        let mut ua: Vec<Vec<u64>> = Vec::with_capacity(l + 2);
        let mut ub: Vec<Vec<u64>> = Vec::with_capacity(l + 2);
        // Products stay below 2^122 and there are at most a few dozen
        // digits, so sums fit in 128 bits and reduce once at the end.
        let mut acc_a = vec![0u128; self.n];
        let mut acc_b = vec![0u128; self.n];
        debug_assert!(digits.len() <= 32);
        for (pos, &t) in targets.iter().enumerate() {
            let m = *self.modulus(t);
            acc_a.fill(0);
            acc_b.fill(0);
            for (j, digit) in digits.iter().enumerate() {
                let d = &digit[pos];
                let ka = &key.a[j][t][..self.n];
                let kb = &key.b[j][t][..self.n];
                match map {
                    None => {
                        for k in 0..self.n {
                            let dv = d[k] as u128;
                            acc_a[k] += dv * ka[k] as u128;
                            acc_b[k] += dv * kb[k] as u128;
                        }
                    }
                    Some(map) => {
                        for k in 0..self.n {
                            let dv = d[map[k]] as u128;
                            acc_a[k] += dv * ka[k] as u128;
                            acc_b[k] += dv * kb[k] as u128;
                        }
                    }
                }
            }
            ua.push(acc_a.iter().map(|&z| m.reduce_u128(z)).collect());
            ub.push(acc_b.iter().map(|&z| m.reduce_u128(z)).collect());
        }
        (self.mod_down(ua), self.mod_down(ub))
    }

    /// Divide an extended polynomial (primes `0..=l` plus special, last)
    /// by the special prime.
    fn mod_down(&self, mut ext: Vec<Vec<u64>>) -> Poly {
        let mut top = ext.pop().expect("special residue");
        let special = self.special();
        let mp = *self.modulus(special);
        self.tables[special].inverse(&mut top);
        let half = mp.value() / 2;
        for x in top.iter_mut() {
            *x = mp.add(*x, half);
        }
        for (i, r) in ext.iter_mut().enumerate() {
            let m = *self.modulus(i);
            let half_i = m.reduce(half);
            let mut t: Vec<u64> = top.iter().map(|&x| m.sub(m.reduce(x), half_i)).collect();
            self.tables[i].forward(&mut t);
            let inv = self.special_inv[i];
            let inv_s = m.shoup(inv);
            for (x, &y) in r.iter_mut().zip(&t) {
                *x = m.mul_shoup(m.sub(*x, y), inv, inv_s);
            }
        }
        Poly { res: ext }
    }

    /// Key-switching material moving `s_from` (NTT residues over every
    /// prime including the special one) to the secret `s`.
    pub fn gen_key_switch<R: RngCore + ?Sized>(
        &self,
        s: &[Vec<u64>],
        s_from: &[Vec<u64>],
        seed: [u8; 32],
        rng: &mut R,
    ) -> KeySwitchMaterial {
        let a = self.expand_key_a(seed);
        let primes = self.special() + 1;
        let b = (0..=self.max_level())
            .map(|j| {
                let e = self.ntt_signed(&self.sample_error(rng), 0..primes);
                (0..primes)
                    .map(|t| {
                        let m = *self.modulus(t);
                        let pj = if t == j { Some(self.special_mod[j]) } else { None };
                        (0..self.n)
                            .map(|k| {
                                let mut v = m.add(m.mul(a[j][t][k], s[t][k]), e[t][k]);
                                if let Some(p) = pj {
                                    v = m.add(v, m.mul(p, s_from[t][k]));
                                }
                                v
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        KeySwitchMaterial { seed, a, b }
    }

    /// Uniform `a` components regenerated from a 32-byte seed.
    pub fn expand_key_a(&self, seed: [u8; 32]) -> Vec<Vec<Vec<u64>>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::from_seed(seed);
        let primes = self.special() + 1;
        (0..=self.max_level())
            .map(|_| (0..primes).map(|t| self.sample_uniform(&mut rng, t)).collect())
            .collect()
    }
}

/// One digit per chain prime; each digit has residues over every prime
/// (chain then special). `a` is reproducible from `seed`.
#[derive(Debug, Clone)]
pub struct KeySwitchMaterial {
    pub seed: [u8; 32],
    pub a: Vec<Vec<Vec<u64>>>,
    pub b: Vec<Vec<Vec<u64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Context {
        Context::new(CkksParams { ring_degree: 64, levels: 3, ..CkksParams::default() }).unwrap()
    }

    #[test]
    fn chain_shape() {
        let ctx = Context::new(CkksParams::default()).unwrap();
        let chain = ctx.modulus_chain();
        assert_eq!(chain.len(), 6);
        assert!(chain[0] > 1 << 59 && chain[0] < 1 << 60);
        for &q in &chain[1..] {
            assert!((q as f64 / 2f64.powi(40) - 1.0).abs() < 1e-3);
            assert_eq!(q % 16384, 1);
        }
        let p = ctx.modulus(ctx.special()).value();
        assert!(p > 1 << 60 && p < 1 << 61);
    }

    #[test]
    fn rejects_bad_degree() {
        let p = CkksParams { ring_degree: 1000, ..CkksParams::default() };
        assert_eq!(Context::new(p).unwrap_err(), HeError::UnsupportedDegree(1000));
    }

    #[test]
    fn rescale_divides_by_top_prime() {
        let ctx = small();
        let l = 2;
        let q_l = ctx.modulus(l).value() as i128;
        let coeffs: Vec<i64> = (0..64).map(|i| (i as i64 - 32) * (q_l as i64 / 7) * 3 + i as i64).collect();
        let mut p = Poly { res: ctx.ntt_signed(&coeffs, 0..=l) };
        ctx.rescale(&mut p);
        let mut r0 = p.res[0].clone();
        ctx.tables[0].inverse(&mut r0);
        for (k, &c) in coeffs.iter().enumerate() {
            let expect = (c as f64 / q_l as f64).round() as i64;
            assert!((ctx.modulus(0).center(r0[k]) - expect).abs() <= 1);
        }
    }

    #[test]
    fn key_switch_identity() {
        let ctx = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let all = ctx.special() + 1;
        let s = ctx.ntt_signed(&ctx.sample_ternary(&mut rng), 0..all);
        let s2 = ctx.ntt_signed(&ctx.sample_ternary(&mut rng), 0..all);
        let key = ctx.gen_key_switch(&s, &s2, [7; 32], &mut rng);
        assert_eq!(ctx.expand_key_a([7; 32]), key.a);
        let l = 2;
        let d = Poly { res: (0..=l).map(|t| ctx.sample_uniform(&mut rng, t)).collect() };
        let (ua, ub) = ctx.key_switch(&ctx.decompose(&d), &key, None);
        // ub - ua*s should be d*s2 up to small noise
        let s_l = Poly { res: s[..=l].to_vec() };
        let s2_l = Poly { res: s2[..=l].to_vec() };
        let mut diff = ub.clone();
        ctx.sub_into(&mut diff, &ctx.mul(&ua, &s_l));
        ctx.sub_into(&mut diff, &ctx.mul(&d, &s2_l));
        let mut r0 = diff.res[0].clone();
        ctx.tables[0].inverse(&mut r0);
        let worst = r0.iter().map(|&x| ctx.modulus(0).center(x).abs()).max().unwrap();
        assert!(worst < 1 << 20, "key switching noise {worst}");
    }
}
