//! Self-check suites behind `hegemony verify`: each check runs the real
//! code path against a direct computation and reports pass/fail.

use std::sync::Arc;
use std::time::Instant;

use num_bigint::RandBigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::ckks::{CkksBackend, CkksParams};
use crate::enc_tensor::{self, ConvFilters, Image};
use crate::fedsim::{self, FailureKind, FaultPlan, FedConfig, FedError, StubProvider, UpdateProvider};
use crate::he::sim::{SimBackend, SimDecryptor};
use crate::he::{HeBackend, HeDecryptor};
use crate::model::{self, Architecture};
use crate::packing::PackingConfig;
use crate::paillier;
use crate::threshold::{self, ThresholdError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Paillier,
    Threshold,
    Ckks,
    Kernels,
    Fedavg,
    All,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Fewer trials and a smaller ring, for smoke tests.
    pub quick: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

fn timed(suite: &'static str, name: &str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let t = Instant::now();
    let r = f();
    let secs = t.elapsed().as_secs_f64();
    let (passed, detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check { suite, name: name.to_string(), passed, detail, secs }
}

pub fn run(suite: Suite, opts: VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Paillier {
        out.extend(paillier_suite(opts));
    }
    if all || suite == Suite::Threshold {
        out.extend(threshold_suite(opts));
    }
    if all || suite == Suite::Kernels {
        out.extend(kernel_suite(opts));
    }
    if all || suite == Suite::Ckks {
        out.extend(ckks_suite(opts));
    }
    if all || suite == Suite::Fedavg {
        out.extend(fedavg_suite(opts));
    }
    out
}

pub fn to_table(checks: &[Check]) -> String {
    let mut s = format!("{:<10} {:<34} {:<6} {:>8}  {}\n", "suite", "check", "result", "secs", "detail");
    for c in checks {
        s.push_str(&format!(
            "{:<10} {:<34} {:<6} {:>8.2}  {}\n",
            c.suite,
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.secs,
            c.detail
        ));
    }
    s
}

fn paillier_suite(opts: VerifyOptions) -> Vec<Check> {
    let trials = if opts.quick { 50 } else { 1000 };
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let keys = paillier::keygen(256, &mut rng);
    let Ok((pk, sk)) = keys else {
        return vec![timed("paillier", "keygen", || Err(format!("{:?}", keys.err())))];
    };
    let n = pk.n().clone();
    let add = timed("paillier", "E(a)*E(b) opens to a+b", || {
        for i in 0..trials {
            let (a, b) = (rng.gen_biguint_below(&n), rng.gen_biguint_below(&n));
            let c = pk
                .add(&pk.encrypt(&a, &mut rng).map_err(|e| e.to_string())?, &pk.encrypt(&b, &mut rng).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            if sk.decrypt(&pk, &c).map_err(|e| e.to_string())? != (&a + &b) % &n {
                return Err(format!("trial {i} mismatched"));
            }
        }
        Ok(format!("{trials} trials at 512-bit n"))
    });
    let scalar = timed("paillier", "E(m)^k opens to k*m", || {
        for i in 0..trials {
            let (m, k) = (rng.gen_biguint_below(&n), rng.gen_biguint_below(&n));
            let c = pk.scalar_mul(&pk.encrypt(&m, &mut rng).map_err(|e| e.to_string())?, &k).map_err(|e| e.to_string())?;
            if sk.decrypt(&pk, &c).map_err(|e| e.to_string())? != (&m * &k) % &n {
                return Err(format!("trial {i} mismatched"));
            }
        }
        Ok(format!("{trials} trials"))
    });
    vec![add, scalar]
}

fn threshold_suite(opts: VerifyOptions) -> Vec<Check> {
    let trials = if opts.quick { 10 } else { 100 };
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 1);
    let ceremony = threshold::ceremony_keygen(256, 3, &mut rng);
    let Ok((tpk, shares)) = ceremony else {
        return vec![timed("threshold", "ceremony", || Err(format!("{:?}", ceremony.err())))];
    };
    let n = tpk.n().clone();
    let mut cts = Vec::new();
    let roundtrip = timed("threshold", "3-of-3 combine roundtrip", || {
        for i in 0..trials {
            let m = rng.gen_biguint_below(&n);
            let c = tpk.encrypt(&m, &mut rng).map_err(|e| e.to_string())?;
            let partials: Vec<_> =
                shares.iter().map(|s| s.partial_decrypt(&tpk, &c)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
            if tpk.combine(&partials).map_err(|e| e.to_string())? != m {
                return Err(format!("message {i} mismatched"));
            }
            cts.push(partials);
        }
        Ok(format!("{trials} messages, l=3"))
    });
    let subsets = timed("threshold", "2-of-3 subsets refused", || {
        let partials = cts.first().ok_or("no partials from the roundtrip check")?;
        for skip in 0..3 {
            let subset: Vec<_> = partials.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, p)| p.clone()).collect();
            match tpk.combine(&subset) {
                Err(ThresholdError::IncompleteShareSet(_)) => {}
                other => return Err(format!("subset without share {} gave {other:?}", skip + 1)),
            }
        }
        Ok("all three pairs".into())
    });
    vec![roundtrip, subsets]
}

// ---- direct computations ----

fn dyadic(rng: &mut impl Rng) -> f64 {
    rng.gen_range(-256i32..=256) as f64 / 256.0
}

fn matvec_direct(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum()).collect()
}

fn conv_direct(img: &Image, f: &ConvFilters) -> Image {
    let (oh, ow) = ((img.height - f.height) / f.stride + 1, (img.width - f.width) / f.stride + 1);
    let mut out = Image::zeros(oh, ow, f.out_channels);
    for i in 0..oh {
        for x in 0..ow {
            for k in 0..f.out_channels {
                let mut s = f.bias[k];
                for dy in 0..f.height {
                    for dx in 0..f.width {
                        for ci in 0..f.in_channels {
                            s += f.weight(dy, dx, ci, k) * img.get(i * f.stride + dy, x * f.stride + dx, ci);
                        }
                    }
                }
                out.set(i, x, k, s);
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn kernel_suite(opts: VerifyOptions) -> Vec<Check> {
    let instances = if opts.quick { 5 } else { 25 };
    let be = SimBackend::new(4096, 8).expect("valid simulator");
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 2);
    let matvec = timed("kernels", "diagonal matvec = nested loops", || {
        for i in 0..instances {
            let (r, c) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
            let a: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| dyadic(&mut rng)).collect()).collect();
            let x: Vec<f64> = (0..c).map(|_| dyadic(&mut rng)).collect();
            let d = enc_tensor::diagonalize(&a);
            let y = enc_tensor::matvec(&be, &d, &be.encrypt_vec(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let got = SimDecryptor.decrypt_vec(&be, &y).map_err(|e| e.to_string())?;
            if got[..r] != matvec_direct(&a, &x)[..] {
                return Err(format!("instance {i} ({r}x{c}) differs"));
            }
        }
        Ok(format!("{instances} instances, exact"))
    });
    let conv = timed("kernels", "conv2d = sliding window", || {
        for i in 0..instances {
            let (h, w, c) = (rng.gen_range(5..=16), rng.gen_range(5..=16), rng.gen_range(1..=3));
            let img = Image::new(h, w, c, (0..h * w * c).map(|_| dyadic(&mut rng)).collect()).map_err(|e| e.to_string())?;
            let (k, stride, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=2), rng.gen_range(1..=3));
            let mut f = ConvFilters::zeros(k, k, c, cout, stride);
            f.weights.iter_mut().for_each(|v| *v = dyadic(&mut rng));
            f.bias.iter_mut().for_each(|v| *v = dyadic(&mut rng));
            let enc = enc_tensor::encrypt_image(&be, &img).map_err(|e| e.to_string())?;
            let out = enc_tensor::conv2d(&be, &f, &enc).map_err(|e| e.to_string())?;
            let got = enc_tensor::decrypt_image(&SimDecryptor, &be, &out).map_err(|e| e.to_string())?;
            if got.data != conv_direct(&img, &f).data {
                return Err(format!("instance {i} ({h}x{w}x{c}, k={k}, s={stride}) differs"));
            }
        }
        Ok(format!("{instances} instances, exact"))
    });
    let pool = timed("kernels", "pool + dense = channel means", || {
        for i in 0..instances {
            // power-of-two areas keep the folded divisor exact
            let (h, w, c) = (1usize << rng.gen_range(0..=4), 1usize << rng.gen_range(0..=4), rng.gen_range(1..=3));
            let img = Image::new(h, w, c, (0..h * w * c).map(|_| dyadic(&mut rng)).collect()).map_err(|e| e.to_string())?;
            let classes = rng.gen_range(1..=10);
            let wts: Vec<Vec<f64>> = (0..classes).map(|_| (0..c).map(|_| dyadic(&mut rng)).collect()).collect();
            let bias: Vec<f64> = (0..classes).map(|_| dyadic(&mut rng)).collect();
            let spec = model::ModelSpec {
                input_shape: (h, w, c),
                layers: vec![model::Layer::GlobalAvgPool, model::Layer::Dense { weights: wts, bias }],
            };
            let want = spec.infer_plain(&img).map_err(|e| e.to_string())?;
            let mut means = vec![0.0; c];
            for y in 0..h {
                for x in 0..w {
                    for (k, m) in means.iter_mut().enumerate() {
                        *m += img.get(y, x, k) / (h * w) as f64;
                    }
                }
            }
            let Some(model::Layer::Dense { weights, bias }) = spec.layers.last() else { unreachable!() };
            let direct: Vec<f64> = matvec_direct(weights, &means).iter().zip(bias).map(|(a, b)| a + b).collect();
            let enc = spec.encode_image_rows(&img, &be).map_err(|e| e.to_string())?;
            let y = spec.infer_encrypted(&enc, &be).map_err(|e| e.to_string())?;
            let got = SimDecryptor.decrypt_vec(&be, &y).map_err(|e| e.to_string())?;
            if got[..classes] != direct[..] || max_diff(&want, &direct) > 1e-12 {
                return Err(format!("instance {i} ({h}x{w}x{c}) differs"));
            }
        }
        Ok(format!("{instances} instances, exact"))
    });
    vec![matvec, conv, pool]
}

fn ckks_suite(opts: VerifyOptions) -> Vec<Check> {
    let ring_degree = if opts.quick { 2048 } else { 8192 };
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 3);
    let spec = Architecture::standard(2, 16).random_spec(opts.seed);
    let img = model::random_image(spec.input_shape, opts.seed ^ 4);
    let params = CkksParams { ring_degree, levels: spec.depth_required(), ..CkksParams::default() };
    let slots = params.slot_count();
    let a: Vec<Vec<f64>> = (0..64).map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d = enc_tensor::diagonalize(&a);
    let mut steps = match spec.rotation_steps(slots) {
        Ok(s) => s,
        Err(e) => return vec![timed("ckks", "rotation plan", || Err(e.to_string()))],
    };
    steps.extend(enc_tensor::matvec_rotations(&d, slots));
    let steps: Vec<usize> = steps.into_iter().collect();
    let setup = CkksBackend::setup(params.clone(), &steps, &mut rng);
    let Ok((ckks, sk)) = setup else {
        return vec![timed("ckks", "key setup", || Err(format!("{:?}", setup.err())))];
    };
    let sim = SimBackend::new(slots, params.levels).expect("valid simulator");
    let mv = timed("ckks", "matvec 64x64 vs simulator", || {
        let ys = enc_tensor::matvec(&sim, &d, &sim.encrypt_vec(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let want = SimDecryptor.decrypt_vec(&sim, &ys).map_err(|e| e.to_string())?;
        let y = enc_tensor::matvec(&ckks, &d, &ckks.encrypt_vec(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let got = sk.decrypt_vec(&ckks, &y).map_err(|e| e.to_string())?;
        let err = max_diff(&got[..64], &want[..64]);
        if err <= 1e-3 {
            Ok(format!("max error {err:.2e}, N={ring_degree}"))
        } else {
            Err(format!("max error {err:.2e} exceeds 1e-3"))
        }
    });
    let net = timed("ckks", "2-conv network vs simulator", || {
        let classes = spec.validate().map_err(|e| e.to_string())?;
        let ys = spec.infer_encrypted(&spec.encode_image_rows(&img, &sim).map_err(|e| e.to_string())?, &sim).map_err(|e| e.to_string())?;
        let want = SimDecryptor.decrypt_vec(&sim, &ys).map_err(|e| e.to_string())?;
        let yc = spec.infer_encrypted(&spec.encode_image_rows(&img, &ckks).map_err(|e| e.to_string())?, &ckks).map_err(|e| e.to_string())?;
        let got = sk.decrypt_vec(&ckks, &yc).map_err(|e| e.to_string())?;
        let err = max_diff(&got[..classes], &want[..classes]);
        if err <= 1e-3 {
            Ok(format!("max logit error {err:.2e}, 16x16 input"))
        } else {
            Err(format!("max logit error {err:.2e} exceeds 1e-3"))
        }
    });
    vec![mv, net]
}

fn fedavg_suite(opts: VerifyOptions) -> Vec<Check> {
    let weights = if opts.quick { 500 } else { 10_000 };
    let base = FedConfig { clients: 3, rounds: 2, weights, seed: Some(opts.seed), ..FedConfig::default() };
    let keys = fedsim::run_ceremony(&base);
    let Ok((tpk, shares)) = keys else {
        return vec![timed("fedavg", "ceremony", || Err(format!("{:?}", keys.err())))];
    };
    let equal = timed("fedavg", "encrypted average = plaintext mean", || {
        let provider = StubProvider::new(&base);
        let res = fedsim::run_with_keys(&base, Arc::new(provider.clone()), &tpk, shares.clone()).map_err(|e| e.to_string())?;
        let quantum = 1.0 / (1u64 << base.packing.frac_bits) as f64;
        let mut global = provider.initial_weights().map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for (r, rec) in res.transcript.rounds.iter().enumerate() {
            let ups: Vec<Vec<f64>> = rec
                .participants
                .iter()
                .map(|&c| provider.client_update(c, rec.round, &global))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let mean: Vec<f64> = (0..weights).map(|i| ups.iter().map(|u| u[i]).sum::<f64>() / ups.len() as f64).collect();
            for c in &res.clients {
                worst = worst.max(max_diff(&c.history[r], &mean));
            }
            global = res.clients[0].history[r].clone();
        }
        if worst <= quantum {
            Ok(format!("K=3, T=2, {weights} weights, max error {worst:.2e}"))
        } else {
            Err(format!("max error {worst:.2e} exceeds {quantum:.2e}"))
        }
    });
    let mut faults = Vec::new();
    let cases = [
        ("corrupted partial aborts", FaultPlan { corrupt_partial_from: Some(2), ..FaultPlan::default() }, PackingConfig::default(), FailureKind::CombineFailed),
        ("over-K aggregate aborts", FaultPlan::default(), PackingConfig { max_addends: 2, ..PackingConfig::default() }, FailureKind::OverflowDetected),
    ];
    for (name, plan, packing, want) in cases {
        faults.push(timed("fedavg", name, || {
            let cfg = FedConfig { weights: 100, rounds: 1, faults: plan, packing, ..base.clone() };
            let provider = Arc::new(StubProvider::new(&cfg));
            match fedsim::run_with_keys(&cfg, provider, &tpk, shares.clone()) {
                Err(FedError::RoundAbort(a)) if a.kind == want && !a.transcript.rounds.is_empty() => {
                    Ok(format!("{:?} recorded in round {}", a.kind, a.round))
                }
                Err(e) => Err(e.to_string()),
                Ok(_) => Err("round completed".into()),
            }
        }));
    }
    let mut out = vec![equal];
    out.extend(faults);
    out
}
