//! Word-sized modular arithmetic, NTT-friendly prime search, and the
//! negacyclic number-theoretic transform.

/// A prime modulus below 2^62 with a precomputed Barrett constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modulus {
    q: u64,
    bits: u32,
    // floor(2^(2 * bits) / q)
    barrett: u64,
    // 2^64 mod q
    pow64: u64,
}

impl Modulus {
    pub fn new(q: u64) -> Self {
        assert!(q > 2 && q < 1 << 62, "modulus {q} out of range");
        let bits = 64 - q.leading_zeros();
        let barrett = ((1u128 << (2 * bits)) / q as u128) as u64;
        let pow64 = ((1u128 << 64) % q as u128) as u64;
        Self { q, bits, barrett, pow64 }
    }

    #[inline(always)]
    pub fn value(&self) -> u64 {
        self.q
    }

    /// Reduce any `z < 2^(2 * bits)`, in particular a product of residues.
    #[inline(always)]
    pub fn reduce_wide(&self, z: u128) -> u64 {
        let top = (z >> (self.bits - 1)) as u64;
        let est = ((top as u128 * self.barrett as u128) >> (self.bits + 1)) as u64;
        // The estimate is short by at most 2q; branch-free correction keeps
        // the NTT loops free of unpredictable jumps.
        let r = (z as u64).wrapping_sub(est.wrapping_mul(self.q));
        let r = r.min(r.wrapping_sub(self.q));
        r.min(r.wrapping_sub(self.q))
    }

    /// Reduce an arbitrary 128-bit value, e.g. a lazily accumulated sum
    /// of products.
    #[inline(always)]
    pub fn reduce_u128(&self, z: u128) -> u64 {
        let hi = self.reduce((z >> 64) as u64);
        self.add(self.mul(hi, self.pow64), self.reduce(z as u64))
    }

    #[inline(always)]
    pub fn reduce(&self, x: u64) -> u64 {
        if self.bits >= 32 {
            self.reduce_wide(x as u128)
        } else {
            x % self.q
        }
    }

    #[inline(always)]
    pub fn reduce_i64(&self, x: i64) -> u64 {
        let r = self.reduce(x.unsigned_abs());
        if x < 0 && r != 0 {
            self.q - r
        } else {
            r
        }
    }

    pub fn reduce_i128(&self, x: i128) -> u64 {
        let r = (x.unsigned_abs() % self.q as u128) as u64;
        if x < 0 && r != 0 {
            self.q - r
        } else {
            r
        }
    }

    #[inline(always)]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        s.min(s.wrapping_sub(self.q))
    }

    #[inline(always)]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        (a + self.q - b).min(a.wrapping_sub(b))
    }

    #[inline(always)]
    pub fn neg(&self, a: u64) -> u64 {
        let r = self.q - a;
        r.min(r.wrapping_sub(self.q))
    }

    #[inline(always)]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce_wide(a as u128 * b as u128)
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1;
        base %= self.q;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse via Fermat; `q` is prime.
    pub fn inv(&self, a: u64) -> u64 {
        assert!(a % self.q != 0, "zero has no inverse");
        self.pow(a, self.q - 2)
    }

    /// Precomputed `floor(w * 2^64 / q)` for repeated multiplication by `w`.
    #[inline(always)]
    pub fn shoup(&self, w: u64) -> u64 {
        (((w as u128) << 64) / self.q as u128) as u64
    }

    #[inline(always)]
    pub fn mul_shoup(&self, a: u64, w: u64, w_shoup: u64) -> u64 {
        mul_shoup_raw(a, w, w_shoup, self.q)
    }

    /// Map a residue to its centered representative in `(-q/2, q/2]`.
    #[inline(always)]
    pub fn center(&self, a: u64) -> i64 {
        if a > self.q / 2 {
            a as i64 - self.q as i64
        } else {
            a as i64
        }
    }
}

fn mul_mod_u64(a: u64, b: u64, m: u64) -> u64 {
    (a as u128 * b as u128 % m as u128) as u64
}

fn pow_mod_u64(mut b: u64, mut e: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    b %= m;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul_mod_u64(acc, b, m);
        }
        b = mul_mod_u64(b, b, m);
        e >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin for all 64-bit inputs.
pub fn is_prime_u64(n: u64) -> bool {
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &p in &BASES {
        if n % p == 0 {
            return n == p;
        }
    }
    let s = (n - 1).trailing_zeros();
    let d = (n - 1) >> s;
    'witness: for &a in &BASES {
        let mut x = pow_mod_u64(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod_u64(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Largest primes `≡ 1 mod 2n` strictly below `2^bits`, skipping `exclude`.
pub fn primes_below(bits: u32, n: usize, count: usize, exclude: &[u64]) -> Vec<u64> {
    let step = 2 * n as u64;
    let mut c = ((1u64 << bits) - 1) / step * step + 1;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        assert!(c > step, "ran out of NTT primes below 2^{bits}");
        if is_prime_u64(c) && !exclude.contains(&c) {
            out.push(c);
        }
        c -= step;
    }
    out
}

/// Primes `≡ 1 mod 2n` nearest to `2^bits`, alternating above and below so
/// successive rescalings keep the scale close to `2^bits`.
pub fn primes_around(bits: u32, n: usize, count: usize, exclude: &[u64]) -> Vec<u64> {
    let step = 2 * n as u64;
    let center = 1u64 << bits;
    let mut up = center + 1;
    let mut down = center + 1 - step;
    let mut out = Vec::with_capacity(count);
    let mut take_up = true;
    while out.len() < count {
        let cand = loop {
            let c = if take_up {
                let c = up;
                up += step;
                c
            } else {
                let c = down;
                down -= step;
                c
            };
            if is_prime_u64(c) && !exclude.contains(&c) {
                break c;
            }
        };
        out.push(cand);
        take_up = !take_up;
    }
    out
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// Twiddle tables for a size-`n` negacyclic NTT modulo one prime.
#[derive(Debug, Clone)]
pub struct NttTable {
    pub modulus: Modulus,
    n: usize,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

impl NttTable {
    pub fn new(q: u64, n: usize) -> Self {
        assert!(n.is_power_of_two() && n >= 2);
        let m = Modulus::new(q);
        assert_eq!((q - 1) % (2 * n as u64), 0, "{q} is not 1 mod 2n");
        let psi = primitive_root(&m, 2 * n as u64);
        let psi_inv = m.inv(psi);
        let log_n = n.trailing_zeros();
        let mut psi_rev = vec![0; n];
        let mut psi_inv_rev = vec![0; n];
        let (mut p, mut pi) = (1u64, 1u64);
        for i in 0..n {
            let r = bit_reverse(i, log_n);
            psi_rev[r] = p;
            psi_inv_rev[r] = pi;
            p = m.mul(p, psi);
            pi = m.mul(pi, psi_inv);
        }
        let psi_rev_shoup = psi_rev.iter().map(|&w| m.shoup(w)).collect();
        let psi_inv_rev_shoup = psi_inv_rev.iter().map(|&w| m.shoup(w)).collect();
        let n_inv = m.inv(n as u64);
        Self {
            modulus: m,
            n,
            psi_rev,
            psi_rev_shoup,
            psi_inv_rev,
            psi_inv_rev_shoup,
            n_inv,
            n_inv_shoup: m.shoup(n_inv),
        }
    }

    /// In place; output is bit-reversed evaluation order.
    pub fn forward(&self, a: &mut [u64]) {
        assert_eq!(a.len(), self.n);
        let q = self.modulus.value();
        let mut t = self.n;
        let mut groups = 1;
        while groups < self.n {
            t >>= 1;
            let ws = &self.psi_rev[groups..2 * groups];
            let wss = &self.psi_rev_shoup[groups..2 * groups];
            for ((block, &w), &w_shoup) in a.chunks_exact_mut(2 * t).zip(ws).zip(wss) {
                let (lo, hi) = block.split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = mul_shoup_raw(*y, w, w_shoup, q);
                    let s = u + v;
                    *x = s.min(s.wrapping_sub(q));
                    *y = (u + q - v).min(u.wrapping_sub(v));
                }
            }
            groups <<= 1;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        assert_eq!(a.len(), self.n);
        let q = self.modulus.value();
        let mut t = 1;
        let mut groups = self.n;
        while groups > 1 {
            let half = groups >> 1;
            let ws = &self.psi_inv_rev[half..groups];
            let wss = &self.psi_inv_rev_shoup[half..groups];
            for ((block, &w), &w_shoup) in a.chunks_exact_mut(2 * t).zip(ws).zip(wss) {
                let (lo, hi) = block.split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = *y;
                    let s = u + v;
                    *x = s.min(s.wrapping_sub(q));
                    *y = mul_shoup_raw((u + q - v).min(u.wrapping_sub(v)), w, w_shoup, q);
                }
            }
            t <<= 1;
            groups = half;
        }
        let (n_inv, n_inv_shoup) = (self.n_inv, self.n_inv_shoup);
        for x in a.iter_mut() {
            *x = mul_shoup_raw(*x, n_inv, n_inv_shoup, q);
        }
    }
}

#[inline(always)]
fn mul_shoup_raw(a: u64, w: u64, w_shoup: u64, q: u64) -> u64 {
    let hi = ((a as u128 * w_shoup as u128) >> 64) as u64;
    let r = a.wrapping_mul(w).wrapping_sub(hi.wrapping_mul(q));
    r.min(r.wrapping_sub(q))
}

/// A primitive `order`-th root of unity; deterministic for a given `q`.
fn primitive_root(m: &Modulus, order: u64) -> u64 {
    let q = m.value();
    let cofactor = (q - 1) / order;
    for g in 2..q {
        let x = m.pow(g, cofactor);
        if m.pow(x, order / 2) == q - 1 {
            return x;
        }
    }
    unreachable!("every prime 1 mod order has a primitive root")
}

/// Index map of the automorphism `X -> X^galois` acting on bit-reversed
/// NTT evaluations: `out[i] = in[map[i]]`.
pub fn automorphism_ntt_map(n: usize, galois: usize) -> Vec<usize> {
    let log_n = n.trailing_zeros();
    let two_n = 2 * n;
    (0..n)
        .map(|i| {
            let e = 2 * bit_reverse(i, log_n) + 1;
            let image = e * galois % two_n;
            bit_reverse((image - 1) / 2, log_n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schoolbook_negacyclic(a: &[u64], b: &[u64], m: &Modulus) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0u64; n];
        for i in 0..n {
            for j in 0..n {
                let p = m.mul(a[i], b[j]);
                let k = i + j;
                if k < n {
                    out[k] = m.add(out[k], p);
                } else {
                    out[k - n] = m.sub(out[k - n], p);
                }
            }
        }
        out
    }

    #[test]
    fn barrett_matches_u128_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for q in [17u64, 65537, (1 << 40) + 0x6001, primes_below(61, 8192, 1, &[])[0]] {
            let m = Modulus::new(q);
            for _ in 0..2000 {
                let a = rng.gen_range(0..q);
                let b = rng.gen_range(0..q);
                assert_eq!(m.mul(a, b), (a as u128 * b as u128 % q as u128) as u64);
                let w = rng.gen_range(0..q);
                assert_eq!(m.mul_shoup(a, w, m.shoup(w)), m.mul(a, w));
                let x: u64 = rng.gen();
                assert_eq!(m.reduce(x), x % q);
                let y: i64 = rng.gen();
                assert_eq!(m.reduce_i64(y) as i128, (y as i128).rem_euclid(q as i128));
            }
        }
    }

    #[test]
    fn miller_rabin_agrees_with_trial_division() {
        let trial = |n: u64| n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0);
        for n in 0..5000u64 {
            assert_eq!(is_prime_u64(n), trial(n), "{n}");
        }
        assert!(!is_prime_u64(561));
        assert!(is_prime_u64((1 << 61) - 1));
    }

    #[test]
    fn prime_search_shapes() {
        let n = 8192;
        let big = primes_below(60, n, 1, &[]);
        assert!(big[0] < 1 << 60 && big[0] > 1 << 59);
        let around = primes_around(40, n, 6, &[]);
        assert_eq!(around.len(), 6);
        for (i, &p) in around.iter().enumerate() {
            assert_eq!(p % (2 * n as u64), 1);
            assert_eq!(p > 1 << 40, i % 2 == 0);
        }
    }

    #[test]
    fn ntt_roundtrip_and_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [8usize, 32, 64] {
            let q = primes_below(50, n, 1, &[])[0];
            let t = NttTable::new(q, n);
            let m = t.modulus;
            let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
            let b: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
            let mut fa = a.clone();
            t.forward(&mut fa);
            let mut back = fa.clone();
            t.inverse(&mut back);
            assert_eq!(back, a);
            let mut fb = b.clone();
            t.forward(&mut fb);
            let mut prod: Vec<u64> = fa.iter().zip(&fb).map(|(&x, &y)| m.mul(x, y)).collect();
            t.inverse(&mut prod);
            assert_eq!(prod, schoolbook_negacyclic(&a, &b, &m));
        }
    }

    #[test]
    fn ntt_domain_automorphism_matches_coefficient_map() {
        let n = 64;
        let q = primes_below(50, n, 1, &[])[0];
        let t = NttTable::new(q, n);
        let m = t.modulus;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
        for galois in [5usize, 25, 2 * n - 1] {
            let mut direct = vec![0u64; n];
            for (i, &c) in a.iter().enumerate() {
                let e = i * galois % (2 * n);
                if e < n {
                    direct[e] = c;
                } else {
                    direct[e - n] = m.neg(c);
                }
            }
            t.forward(&mut direct);
            let mut fa = a.clone();
            t.forward(&mut fa);
            let map = automorphism_ntt_map(n, galois);
            let permuted: Vec<u64> = map.iter().map(|&j| fa[j]).collect();
            assert_eq!(permuted, direct, "galois {galois}");
        }
    }
}
