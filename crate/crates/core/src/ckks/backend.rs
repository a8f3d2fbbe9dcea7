use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::arith::automorphism_ntt_map;
use super::context::{CkksParams, Context, KeySwitchMaterial, Poly};
use crate::he::{HeBackend, HeDecryptor, HeError};

/// Relative tolerance when checking that two operands share a scale.
const SCALE_TOLERANCE: f64 = 1e-9;

/// Decryption is `b - a * s` at the base prime.
#[derive(Debug, Clone)]
pub struct CkksCiphertext {
    pub(crate) a: Poly,
    pub(crate) b: Poly,
    pub(crate) scale: f64,
}

impl CkksCiphertext {
    pub fn level(&self) -> usize {
        self.a.level()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

#[derive(Debug, Clone)]
pub struct CkksPlaintext {
    poly: Poly,
    scale: f64,
}

/// Unrescaled sum of ciphertext-plaintext products.
#[derive(Debug)]
pub struct CkksProduct {
    a: Poly,
    b: Poly,
    ct_scale: f64,
    pt_scale: f64,
}

#[derive(Debug, Clone)]
pub struct PublicKey {
    pub(crate) a: Poly,
    pub(crate) b: Poly,
}

#[derive(Debug)]
pub(crate) struct GaloisKey {
    pub(crate) key: KeySwitchMaterial,
    map: Vec<usize>,
}

/// Evaluation side: public key, relinearization key, rotation keys.
#[derive(Debug)]
pub struct CkksBackend {
    ctx: Arc<Context>,
    pub(crate) public: PublicKey,
    pub(crate) relin: KeySwitchMaterial,
    pub(crate) galois: BTreeMap<usize, GaloisKey>,
    rng: Mutex<ChaCha20Rng>,
}

/// Secret side: the ternary secret in coefficient and NTT form.
#[derive(Debug, Clone)]
pub struct CkksSecretKey {
    pub(crate) coeffs: Vec<i64>,
    ntt: Vec<Vec<u64>>,
    ctx: Arc<Context>,
}

impl CkksSecretKey {
    pub(crate) fn from_coeffs(ctx: Arc<Context>, coeffs: Vec<i64>) -> Self {
        let ntt = ctx.ntt_signed(&coeffs, 0..=ctx.special());
        Self { coeffs, ntt, ctx }
    }

    pub fn context(&self) -> &Arc<Context> {
        &self.ctx
    }

    /// Evaluation keys for the given left-rotation steps.
    pub fn gen_backend<R: RngCore + CryptoRng>(
        &self,
        rotation_steps: &[usize],
        rng: &mut R,
    ) -> Result<CkksBackend, HeError> {
        let ctx = &self.ctx;
        let chain = 0..=ctx.max_level();
        let a = Poly { res: chain.clone().map(|t| ctx.sample_uniform(rng, t)).collect() };
        let e = Poly { res: ctx.ntt_signed(&ctx.sample_error(rng), chain.clone()) };
        let s = Poly { res: self.ntt[..=ctx.max_level()].to_vec() };
        let mut b = ctx.mul(&a, &s);
        ctx.add_into(&mut b, &e);
        let public = PublicKey { a, b };

        let s_sq: Vec<Vec<u64>> = self
            .ntt
            .iter()
            .enumerate()
            .map(|(t, r)| {
                let m = ctx.modulus(t);
                r.iter().map(|&x| m.mul(x, x)).collect()
            })
            .collect();
        let relin = ctx.gen_key_switch(&self.ntt, &s_sq, rng.gen(), rng);

        let mut backend = CkksBackend {
            ctx: ctx.clone(),
            public,
            relin,
            galois: BTreeMap::new(),
            rng: Mutex::new(ChaCha20Rng::from_seed(rng.gen())),
        };
        for &step in rotation_steps {
            let step = step % ctx.params.slot_count();
            if step == 0 || backend.galois.contains_key(&step) {
                continue;
            }
            let (key, map) = self.galois_key(step, rng.gen(), rng);
            backend.galois.insert(step, GaloisKey { key, map });
        }
        Ok(backend)
    }

    pub(crate) fn galois_key<R: RngCore + ?Sized>(
        &self,
        step: usize,
        seed: [u8; 32],
        rng: &mut R,
    ) -> (KeySwitchMaterial, Vec<usize>) {
        let ctx = &self.ctx;
        let map = automorphism_ntt_map(ctx.n, ctx.encoder.galois_element(step));
        let rotated: Vec<Vec<u64>> = self.ntt.iter().map(|r| map.iter().map(|&j| r[j]).collect()).collect();
        (ctx.gen_key_switch(&self.ntt, &rotated, seed, rng), map)
    }
}

impl CkksBackend {
    /// Fresh secret plus evaluation keys for every listed rotation step.
    pub fn setup<R: RngCore + CryptoRng>(
        params: CkksParams,
        rotation_steps: &[usize],
        rng: &mut R,
    ) -> Result<(CkksBackend, CkksSecretKey), HeError> {
        let ctx = Arc::new(Context::new(params)?);
        let secret = CkksSecretKey::from_coeffs(ctx.clone(), ctx.sample_ternary(rng));
        let backend = secret.gen_backend(rotation_steps, rng)?;
        Ok((backend, secret))
    }

    pub(crate) fn from_parts(
        ctx: Arc<Context>,
        public: PublicKey,
        relin: KeySwitchMaterial,
        galois: Vec<(usize, KeySwitchMaterial)>,
        rng_seed: [u8; 32],
    ) -> Self {
        let galois = galois
            .into_iter()
            .map(|(step, key)| {
                let map = automorphism_ntt_map(ctx.n, ctx.encoder.galois_element(step));
                (step, GaloisKey { key, map })
            })
            .collect();
        Self { ctx, public, relin, galois, rng: Mutex::new(ChaCha20Rng::from_seed(rng_seed)) }
    }

    pub fn context(&self) -> &Arc<Context> {
        &self.ctx
    }

    pub fn params(&self) -> &CkksParams {
        &self.ctx.params
    }

    pub fn rotation_keys(&self) -> Vec<usize> {
        self.galois.keys().copied().collect()
    }

    fn check_scales(a: f64, b: f64) -> Result<(), HeError> {
        if ((a - b) / a).abs() > SCALE_TOLERANCE {
            return Err(HeError::LayoutMismatch(format!("ciphertext scales {a} and {b} differ")));
        }
        Ok(())
    }

    fn encode_at(&self, values: &[f64], scale: f64, level: usize) -> Result<Poly, HeError> {
        let coeffs = self.ctx.encoder.encode(values, scale)?;
        Ok(Poly { res: self.ctx.ntt_signed(&coeffs, 0..=level) })
    }

    fn galois(&self, step: usize) -> Result<&GaloisKey, HeError> {
        self.galois.get(&step).ok_or(HeError::MissingRotationKey(step))
    }
}

impl HeBackend for CkksBackend {
    type Ciphertext = CkksCiphertext;
    type Plaintext = CkksPlaintext;
    type Product = CkksProduct;

    fn slot_count(&self) -> usize {
        self.ctx.params.slot_count()
    }

    fn max_level(&self) -> usize {
        self.ctx.max_level()
    }

    fn encrypt_raw(&self, values: &[f64]) -> Result<CkksCiphertext, HeError> {
        let ctx = &self.ctx;
        let scale = ctx.default_scale();
        let m = self.encode_at(values, scale, ctx.max_level())?;
        let (v, e0, e1) = {
            let mut rng = self.rng.lock().expect("rng lock");
            (ctx.sample_ternary(&mut *rng), ctx.sample_error(&mut *rng), ctx.sample_error(&mut *rng))
        };
        let chain = 0..=ctx.max_level();
        let v = Poly { res: ctx.ntt_signed(&v, chain.clone()) };
        let mut a = ctx.mul(&v, &self.public.a);
        ctx.add_into(&mut a, &Poly { res: ctx.ntt_signed(&e0, chain.clone()) });
        let mut b = ctx.mul(&v, &self.public.b);
        ctx.add_into(&mut b, &Poly { res: ctx.ntt_signed(&e1, chain) });
        ctx.add_into(&mut b, &m);
        Ok(CkksCiphertext { a, b, scale })
    }

    /// Multipliers are encoded at the scale of the prime that the
    /// following rescale removes, so products keep their input scale.
    fn encode_raw(&self, values: &[f64], level: usize) -> Result<CkksPlaintext, HeError> {
        if level == 0 || level > self.ctx.max_level() {
            return Err(HeError::budget("encode"));
        }
        let scale = self.ctx.modulus(level).value() as f64;
        Ok(CkksPlaintext { poly: self.encode_at(values, scale, level)?, scale })
    }

    fn add_raw(&self, x: &CkksCiphertext, y: &CkksCiphertext) -> Result<CkksCiphertext, HeError> {
        Self::check_scales(x.scale, y.scale)?;
        let level = x.level().min(y.level());
        let mut a = x.a.truncated(level);
        let mut b = x.b.truncated(level);
        self.ctx.add_into(&mut a, &y.a);
        self.ctx.add_into(&mut b, &y.b);
        Ok(CkksCiphertext { a, b, scale: x.scale })
    }

    fn add_plain_raw(&self, x: &CkksCiphertext, values: &[f64]) -> Result<CkksCiphertext, HeError> {
        let p = self.encode_at(values, x.scale, x.level())?;
        let mut out = x.clone();
        self.ctx.add_into(&mut out.b, &p);
        Ok(out)
    }

    fn rotate_raw(&self, x: &CkksCiphertext, steps: usize) -> Result<CkksCiphertext, HeError> {
        Ok(self.rotate_many_raw(x, &[steps])?.pop().expect("one rotation"))
    }

    /// Hoisted: the digit decomposition of `a` is shared by every step.
    fn rotate_many_raw(&self, x: &CkksCiphertext, steps: &[usize]) -> Result<Vec<CkksCiphertext>, HeError> {
        let keys: Vec<&GaloisKey> = steps.iter().map(|&s| self.galois(s)).collect::<Result<_, _>>()?;
        if keys.is_empty() {
            return Ok(Vec::new());
        }
        let ctx = &self.ctx;
        let digits = ctx.decompose(&x.a);
        Ok(keys
            .into_iter()
            .map(|gk| {
                let (mut ua, ub) = ctx.key_switch(&digits, &gk.key, Some(&gk.map));
                let mut b = ctx.permute(&x.b, &gk.map);
                ctx.sub_into(&mut b, &ub);
                ctx.negate(&mut ua);
                CkksCiphertext { a: ua, b, scale: x.scale }
            })
            .collect())
    }

    fn square_raw(&self, x: &CkksCiphertext) -> Result<CkksCiphertext, HeError> {
        if x.level() == 0 {
            return Err(HeError::budget("square"));
        }
        let ctx = &self.ctx;
        let mut d0 = ctx.mul(&x.b, &x.b);
        let mut d1 = ctx.mul(&x.a, &x.b);
        let d1c = d1.clone();
        ctx.add_into(&mut d1, &d1c);
        let d2 = ctx.mul(&x.a, &x.a);
        let (ua, ub) = ctx.key_switch(&ctx.decompose(&d2), &self.relin, None);
        ctx.add_into(&mut d0, &ub);
        ctx.add_into(&mut d1, &ua);
        let q = ctx.modulus(x.level()).value() as f64;
        ctx.rescale(&mut d0);
        ctx.rescale(&mut d1);
        Ok(CkksCiphertext { a: d1, b: d0, scale: x.scale * x.scale / q })
    }

    fn mul_acc_raw(
        &self,
        acc: &mut Option<CkksProduct>,
        x: &CkksCiphertext,
        p: &CkksPlaintext,
    ) -> Result<(), HeError> {
        let level = p.poly.level();
        if x.level() < level {
            return Err(HeError::LayoutMismatch(format!(
                "plaintext at level {level} for a level-{} ciphertext",
                x.level()
            )));
        }
        let ctx = &self.ctx;
        let xa = if x.level() == level { None } else { Some(x.a.truncated(level)) };
        let xb = if x.level() == level { None } else { Some(x.b.truncated(level)) };
        let (xa, xb) = (xa.as_ref().unwrap_or(&x.a), xb.as_ref().unwrap_or(&x.b));
        match acc {
            None => {
                *acc = Some(CkksProduct {
                    a: ctx.mul(xa, &p.poly),
                    b: ctx.mul(xb, &p.poly),
                    ct_scale: x.scale,
                    pt_scale: p.scale,
                })
            }
            Some(prod) => {
                Self::check_scales(prod.ct_scale, x.scale)?;
                if prod.a.level() != level || prod.pt_scale != p.scale {
                    return Err(HeError::LayoutMismatch("accumulating products at different levels".into()));
                }
                ctx.mul_acc(&mut prod.a, xa, &p.poly);
                ctx.mul_acc(&mut prod.b, xb, &p.poly);
            }
        }
        Ok(())
    }

    fn finish_raw(&self, prod: CkksProduct) -> Result<CkksCiphertext, HeError> {
        let CkksProduct { mut a, mut b, ct_scale, pt_scale } = prod;
        let q = self.ctx.modulus(a.level()).value() as f64;
        self.ctx.rescale(&mut a);
        self.ctx.rescale(&mut b);
        Ok(CkksCiphertext { a, b, scale: ct_scale * (pt_scale / q) })
    }
}

impl HeDecryptor<CkksBackend> for CkksSecretKey {
    fn decrypt_raw(&self, backend: &CkksBackend, x: &CkksCiphertext) -> Result<Vec<f64>, HeError> {
        if backend.ctx.hash != self.ctx.hash {
            return Err(HeError::Format("secret key belongs to different parameters".into()));
        }
        self.decrypt(x)
    }
}

impl CkksSecretKey {
    /// Decode all slots; needs no evaluation keys.
    pub fn decrypt(&self, x: &CkksCiphertext) -> Result<Vec<f64>, HeError> {
        let ctx = &self.ctx;
        let m0 = ctx.modulus(0);
        let mut r: Vec<u64> =
            x.b.res[0].iter().zip(&x.a.res[0]).zip(&self.ntt[0]).map(|((&b, &a), &s)| m0.sub(b, m0.mul(a, s))).collect();
        ctx.tables[0].inverse(&mut r);
        let coeffs: Vec<f64> = r.iter().map(|&c| m0.center(c) as f64).collect();
        Ok(ctx.encoder.decode(&coeffs, x.scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::sim::{SimBackend, SimDecryptor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn setup(levels: usize, steps: &[usize]) -> (CkksBackend, CkksSecretKey) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        CkksBackend::setup(CkksParams { ring_degree: 2048, levels, ..CkksParams::default() }, steps, &mut rng).unwrap()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn encrypt_decrypt_add() {
        let (be, sk) = setup(2, &[]);
        let v = random(1024, 1);
        let w = random(1024, 2);
        let x = be.encrypt_vec(&v).unwrap();
        let y = be.encrypt_vec(&w).unwrap();
        assert!(max_err(&sk.decrypt_vec(&be, &x).unwrap(), &v) < 1e-6);
        let s = be.add(&x, &y).unwrap();
        let expect: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + b).collect();
        assert!(max_err(&sk.decrypt_vec(&be, &s).unwrap(), &expect) < 1e-4);
    }

    #[test]
    fn mul_plain_keeps_scale_and_drops_level() {
        let (be, sk) = setup(3, &[]);
        let v = random(1024, 3);
        let p = random(1024, 4);
        let x = be.encrypt_vec(&v).unwrap();
        let y = be.mul_plain(&x, &p).unwrap();
        assert_eq!(y.level(), 2);
        assert_eq!(y.ciphertext().level(), 2);
        assert_eq!(y.ciphertext().scale(), x.ciphertext().scale());
        let expect: Vec<f64> = v.iter().zip(&p).map(|(a, b)| a * b).collect();
        assert!(max_err(&sk.decrypt_vec(&be, &y).unwrap(), &expect) < 1e-5);
        // adding across levels drops the higher operand's extra primes
        let s = be.add(&x, &y).unwrap();
        let expect2: Vec<f64> = v.iter().zip(&expect).map(|(a, b)| a + b).collect();
        assert!(max_err(&sk.decrypt_vec(&be, &s).unwrap(), &expect2) < 1e-5);
    }

    #[test]
    fn rotations_match_simulator() {
        let (be, sk) = setup(1, &[1, 5, 1023]);
        let v = random(1024, 5);
        let sim = SimBackend::new(1024, 1).unwrap();
        let x = be.encrypt_vec(&v).unwrap();
        let xs = sim.encrypt_vec(&v).unwrap();
        for k in [1i64, 5, -1] {
            let got = sk.decrypt_vec(&be, &be.rotate(&x, k).unwrap()).unwrap();
            let want = SimDecryptor.decrypt_vec(&sim, &sim.rotate(&xs, k).unwrap()).unwrap();
            assert!(max_err(&got, &want) < 1e-4, "k={k}");
        }
        let many = be.rotate_many(&x, &[0, 1, 5]).unwrap();
        assert!(max_err(&sk.decrypt_vec(&be, &many[0]).unwrap(), &v) < 1e-6);
        assert!(matches!(be.rotate(&x, 2), Err(HeError::MissingRotationKey(2))));
    }

    #[test]
    fn squares_and_budget() {
        let (be, sk) = setup(3, &[]);
        let v = random(1024, 6);
        let mut x = be.encrypt_vec(&v).unwrap();
        let mut expect = v.clone();
        let mut last_err = 0.0;
        for level in (0..3).rev() {
            x = be.square(&x).unwrap();
            expect.iter_mut().for_each(|e| *e *= *e);
            assert_eq!(x.level(), level);
            let err = max_err(&sk.decrypt_vec(&be, &x).unwrap(), &expect);
            assert!(err < 1e-3, "level {level} error {err}");
            assert!(err >= last_err * 0.5);
            last_err = err;
        }
        assert!(matches!(be.square(&x), Err(HeError::BudgetExhausted { .. })));
        assert!(matches!(be.mul_plain(&x, &[1.0]), Err(HeError::BudgetExhausted { .. })));
    }

    #[test]
    fn mismatched_secret_rejected() {
        let (be, _) = setup(1, &[]);
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let (_, other) =
            CkksBackend::setup(CkksParams { ring_degree: 1024, levels: 1, ..CkksParams::default() }, &[], &mut rng)
                .unwrap();
        let x = be.encrypt_vec(&[1.0]).unwrap();
        assert!(other.decrypt_vec(&be, &x).is_err());
    }
}
