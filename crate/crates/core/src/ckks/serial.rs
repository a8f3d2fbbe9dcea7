//! Binary formats. Every file starts with a 4-byte magic, a version, and
//! the parameter hash; integers and residues are little-endian.
//!
//! Ciphertext: `HECT | u16 version | u64 params hash | u32 level |
//! u8 domain | f64 scale | residues of a | residues of b`.

use std::sync::Arc;

use super::backend::{CkksBackend, CkksCiphertext, CkksSecretKey, PublicKey};
use super::context::{CkksParams, Context, KeySwitchMaterial, Poly};
use crate::he::HeError;

const VERSION: u16 = 1;
const DOMAIN_NTT: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn header(magic: &[u8; 4], hash: u64) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u64(hash);
        w
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn words(&mut self, r: &[u64]) {
        for &x in r {
            self.u64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn fmt_err(msg: impl Into<String>) -> HeError {
    HeError::Format(msg.into())
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4]) -> Result<(Self, u64), HeError> {
        if buf.len() < 14 || &buf[..4] != magic {
            return Err(fmt_err(format!("missing {} magic", String::from_utf8_lossy(magic))));
        }
        let mut r = Reader { buf, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let hash = r.u64()?;
        Ok((r, hash))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], HeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, HeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, HeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, HeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, HeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8], HeError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn seed(&mut self) -> Result<[u8; 32], HeError> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }
    /// `n` residues, each checked against the modulus `q`.
    fn residues(&mut self, n: usize, q: u64) -> Result<Vec<u64>, HeError> {
        let raw = self.take(n * 8)?;
        raw.chunks_exact(8)
            .map(|c| {
                let x = u64::from_le_bytes(c.try_into().expect("8 bytes"));
                if x < q {
                    Ok(x)
                } else {
                    Err(fmt_err("residue out of range"))
                }
            })
            .collect()
    }
    fn finish(self) -> Result<(), HeError> {
        if self.pos != self.buf.len() {
            return Err(fmt_err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_poly(r: &mut Reader, ctx: &Context, primes: impl IntoIterator<Item = usize>) -> Result<Vec<Vec<u64>>, HeError> {
    primes.into_iter().map(|t| r.residues(ctx.n, ctx.modulus(t).value())).collect()
}

fn read_params(r: &mut Reader, hash: u64) -> Result<Arc<Context>, HeError> {
    let params: CkksParams = serde_json::from_slice(r.bytes()?).map_err(|e| fmt_err(e.to_string()))?;
    let ctx = Context::new(params)?;
    if ctx.hash != hash {
        return Err(fmt_err("parameter hash does not match the embedded parameters"));
    }
    Ok(Arc::new(ctx))
}

fn params_json(ctx: &Context) -> Vec<u8> {
    serde_json::to_vec(&ctx.params).expect("params serialize")
}

impl CkksCiphertext {
    pub fn to_bytes(&self, ctx: &Context) -> Vec<u8> {
        let mut w = Writer::header(b"HECT", ctx.hash);
        w.u32(self.level() as u32);
        w.u8(DOMAIN_NTT);
        w.f64(self.scale);
        for p in [&self.a, &self.b] {
            for r in &p.res {
                w.words(r);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], ctx: &Context) -> Result<Self, HeError> {
        let (mut r, hash) = Reader::open(bytes, b"HECT")?;
        if hash != ctx.hash {
            return Err(fmt_err(format!("ciphertext made under parameters {hash:016x}, not {:016x}", ctx.hash)));
        }
        let level = r.u32()? as usize;
        if level > ctx.max_level() {
            return Err(fmt_err(format!("level {level} above the chain length")));
        }
        if r.u8()? != DOMAIN_NTT {
            return Err(fmt_err("unknown domain flag"));
        }
        let scale = r.f64()?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(fmt_err("invalid scale"));
        }
        let a = Poly { res: read_poly(&mut r, ctx, 0..=level)? };
        let b = Poly { res: read_poly(&mut r, ctx, 0..=level)? };
        r.finish()?;
        Ok(Self { a, b, scale })
    }
}

impl CkksSecretKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        let ctx = self.context();
        let mut w = Writer::header(b"HESK", ctx.hash);
        w.bytes(&params_json(ctx));
        w.0.extend(self.coeffs.iter().map(|&c| c as i8 as u8));
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HeError> {
        let (mut r, hash) = Reader::open(bytes, b"HESK")?;
        let ctx = read_params(&mut r, hash)?;
        let raw = r.take(ctx.n)?;
        let coeffs: Vec<i64> = raw.iter().map(|&b| b as i8 as i64).collect();
        if coeffs.iter().any(|c| c.abs() > 1) {
            return Err(fmt_err("secret is not ternary"));
        }
        r.finish()?;
        Ok(Self::from_coeffs(ctx, coeffs))
    }
}

fn write_ksk(w: &mut Writer, k: &KeySwitchMaterial) {
    w.0.extend_from_slice(&k.seed);
    for digit in &k.b {
        for r in digit {
            w.words(r);
        }
    }
}

fn read_ksk(r: &mut Reader, ctx: &Context) -> Result<KeySwitchMaterial, HeError> {
    let seed = r.seed()?;
    let b = (0..=ctx.max_level()).map(|_| read_poly(r, ctx, 0..=ctx.special())).collect::<Result<_, _>>()?;
    Ok(KeySwitchMaterial { seed, a: ctx.expand_key_a(seed), b })
}

impl CkksBackend {
    /// Evaluation keys only; the uniform halves of key-switching keys are
    /// stored as seeds.
    pub fn to_bytes(&self) -> Vec<u8> {
        let ctx = self.context();
        let mut w = Writer::header(b"HEEK", ctx.hash);
        w.bytes(&params_json(ctx));
        for p in [&self.public.a, &self.public.b] {
            for r in &p.res {
                w.words(r);
            }
        }
        write_ksk(&mut w, &self.relin);
        w.u32(self.galois.len() as u32);
        for (&step, gk) in &self.galois {
            w.u32(step as u32);
            write_ksk(&mut w, &gk.key);
        }
        w.0
    }

    /// `rng_seed` drives encryption randomness of the loaded backend.
    pub fn from_bytes(bytes: &[u8], rng_seed: [u8; 32]) -> Result<Self, HeError> {
        let (mut r, hash) = Reader::open(bytes, b"HEEK")?;
        let ctx = read_params(&mut r, hash)?;
        let a = Poly { res: read_poly(&mut r, &ctx, 0..=ctx.max_level())? };
        let b = Poly { res: read_poly(&mut r, &ctx, 0..=ctx.max_level())? };
        let relin = read_ksk(&mut r, &ctx)?;
        let count = r.u32()? as usize;
        let mut galois = Vec::with_capacity(count);
        for _ in 0..count {
            let step = r.u32()? as usize;
            if step == 0 || step >= ctx.params.slot_count() {
                return Err(fmt_err(format!("rotation step {step} out of range")));
            }
            galois.push((step, read_ksk(&mut r, &ctx)?));
        }
        r.finish()?;
        Ok(Self::from_parts(ctx, PublicKey { a, b }, relin, galois, rng_seed))
    }
}
