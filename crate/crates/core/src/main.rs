use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hegemony::ckks::{CkksBackend, CkksParams, CkksSecretKey};
use hegemony::enc_tensor::Image;
use hegemony::fedsim::{self, FedConfig, FedError, ReplayProvider, StubProvider, UpdateProvider};
use hegemony::he::sim::{SimBackend, SimDecryptor};
use hegemony::he::{HeBackend, HeDecryptor, HeError, HeVector};
use hegemony::model::{self, Architecture, ModelError, ModelSpec};
use hegemony::packing::PackingConfig;
use hegemony::paillier::{self, PaillierError};
use hegemony::store::{self, CiphertextCodec};
use hegemony::threshold::{self, ThresholdError, ThresholdKeyShare, ThresholdPublicKey};
use hegemony::verify::{self, Suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "hegemony", version, about = "Encrypted CNN inference and federated averaging")]
struct Cli {
    /// Line-oriented JSON output instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every random choice; keys generated from it are not secret.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true, env = "HEGEMONY_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KeyKind {
    Paillier,
    Sim,
    Ckks,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BackendKind {
    Sim,
    Ckks,
}

#[derive(Subcommand)]
enum Command {
    /// Generate keys: a Paillier keypair, or an HE key directory.
    Keygen(KeygenArgs),
    /// Run a threshold key ceremony and write one share file per party.
    Ceremony {
        #[arg(long)]
        parties: usize,
        /// Modulus size; each prime has half as many bits.
        #[arg(long, default_value_t = 512)]
        key_bits: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encrypt an image (PGM or CSV) into a ciphertext bundle.
    EncryptImage {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Check the image against this model's input shape.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Evaluate a model on an encrypted input; needs no secret key.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        /// An encrypted bundle, or a plain image that is encrypted first.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decrypt encrypted logits with the secret key.
    DecryptResult {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Aggregation server over TCP.
    FedServer {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long)]
        public_key: PathBuf,
        #[command(flatten)]
        fed: FedArgs,
        /// Also write the transcript as JSON lines.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Federated client over TCP, using a share from `ceremony`.
    FedClient {
        #[arg(long, default_value = "127.0.0.1:7070")]
        connect: String,
        #[arg(long)]
        share: PathBuf,
        #[arg(long)]
        public_key: PathBuf,
        #[command(flatten)]
        fed: FedArgs,
    },
    /// Dealer, server and clients in one process.
    FedSim {
        #[command(flatten)]
        fed: FedArgs,
        #[arg(long, default_value_t = 512)]
        key_bits: u64,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Time encrypted inference of random-weight models by depth.
    Bench {
        /// Convolution blocks; repeat to compare.
        #[arg(long, num_args = 1.., default_values_t = vec![2usize, 3])]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, value_enum, default_value_t = BackendKind::Ckks)]
        backend: BackendKind,
        #[arg(long, default_value_t = 8192)]
        ring_degree: usize,
    },
    /// Run self-check suites and print a pass/fail table.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Fewer trials and smaller parameters.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long, value_enum)]
    backend: KeyKind,
    #[arg(long)]
    out: PathBuf,
    /// Paillier modulus size.
    #[arg(long, default_value_t = 2048)]
    key_bits: u64,
    /// Size the level budget and rotation keys for this model.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Level budget; defaults to the model's depth, else 5.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long, default_value_t = 8192)]
    ring_degree: usize,
    /// Extra rotation steps, comma separated.
    #[arg(long, value_delimiter = ',')]
    rotations: Vec<usize>,
}

#[derive(Args)]
struct FedArgs {
    #[arg(long, default_value_t = 3)]
    clients: usize,
    #[arg(long, default_value_t = 1)]
    rounds: u64,
    /// Fraction of clients selected per round.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Weight vector length; inferred from --weights-dir when omitted.
    #[arg(long)]
    weights: Option<usize>,
    /// Replay client weights from `client{id}_round{t}.json` or `client{id}.json`.
    #[arg(long)]
    weights_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1)]
    local_epochs: usize,
    #[arg(long, default_value_t = 1)]
    batches: usize,
    #[arg(long, default_value_t = 60.0)]
    phase_timeout: f64,
    /// Largest number of summands the packing reserves room for.
    #[arg(long)]
    max_addends: Option<u32>,
}

/// Failure with its exit code class.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Crypto(String),
    Budget(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Crypto(_) => 3,
            CliError::Budget(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Other(_) => "error",
            CliError::Usage(_) => "usage",
            CliError::Crypto(_) => "crypto",
            CliError::Budget(_) => "budget_exhausted",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Crypto(m) | CliError::Budget(m) | CliError::Other(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

impl From<HeError> for CliError {
    fn from(e: HeError) -> Self {
        match e {
            HeError::BudgetExhausted { .. } => CliError::Budget(e.to_string()),
            HeError::Format(_) => CliError::Usage(e.to_string()),
            _ => CliError::Crypto(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e.he_error() {
            Some(HeError::BudgetExhausted { .. }) => CliError::Budget(e.to_string()),
            Some(_) => CliError::Crypto(e.to_string()),
            None => CliError::Usage(e.to_string()),
        }
    }
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::Config(_) => CliError::Usage(e.to_string()),
            FedError::Threshold(_) | FedError::Packing(_) | FedError::RoundAbort(_) => CliError::Crypto(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<ThresholdError> for CliError {
    fn from(e: ThresholdError) -> Self {
        CliError::Crypto(e.to_string())
    }
}

impl From<PaillierError> for CliError {
    fn from(e: PaillierError) -> Self {
        CliError::Crypto(e.to_string())
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

/// Per-purpose RNG: seeded runs stay reproducible, others use the OS.
fn rng(seed: Option<u64>, purpose: u64) -> ChaCha20Rng {
    match seed {
        Some(s) => {
            let mut r = ChaCha20Rng::seed_from_u64(s);
            r.set_stream(purpose);
            r
        }
        None => ChaCha20Rng::from_entropy(),
    }
}

fn warn_seeded_keys(seed: Option<u64>) {
    if seed.is_some() {
        eprintln!("warning: keys derived from --seed are reproducible by anyone; do not use them for real data");
    }
}

// ---- key directories ----

const BACKEND_FILE: &str = "backend.json";
const EVAL_KEY_FILE: &str = "eval.key";
const SECRET_KEY_FILE: &str = "secret.key";

#[derive(Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
enum KeyDir {
    Sim { slots: usize, levels: usize },
    Ckks { params: CkksParams },
}

impl KeyDir {
    fn load(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("key directory {} does not exist", dir.display())));
        }
        let text = read_text(&dir.join(BACKEND_FILE))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", dir.join(BACKEND_FILE).display())))
    }

    fn kind(&self) -> BackendKind {
        match self {
            KeyDir::Sim { .. } => BackendKind::Sim,
            KeyDir::Ckks { .. } => BackendKind::Ckks,
        }
    }

    fn sim(&self) -> CliResult<SimBackend> {
        match self {
            KeyDir::Sim { slots, levels } => Ok(SimBackend::new(*slots, *levels)?),
            KeyDir::Ckks { .. } => Err(CliError::Usage("key directory holds CKKS keys".into())),
        }
    }
}

fn load_ckks(dir: &Path, seed: Option<u64>) -> CliResult<CkksBackend> {
    let mut noise_seed = [0u8; 32];
    rng(seed, 3).fill_bytes(&mut noise_seed);
    Ok(CkksBackend::from_bytes(&read(&dir.join(EVAL_KEY_FILE))?, noise_seed)?)
}

fn check_backend(keys: &KeyDir, wanted: BackendKind) -> CliResult<()> {
    if keys.kind() != wanted {
        return Err(CliError::Usage(format!(
            "--backend {} does not match the key directory ({})",
            backend_name(wanted),
            backend_name(keys.kind())
        )));
    }
    Ok(())
}

fn backend_name(b: BackendKind) -> &'static str {
    match b {
        BackendKind::Sim => "sim",
        BackendKind::Ckks => "ckks",
    }
}

// ---- output ----

struct Out {
    json: bool,
}

impl Out {
    /// One JSON line under --json, otherwise the human text.
    fn emit(&self, value: Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", human());
        }
    }
}

// ---- commands ----

fn keygen(a: &KeygenArgs, seed: Option<u64>, out: &Out) -> CliResult<()> {
    create_dir(&a.out)?;
    let model = a.weights.as_deref().map(model::load_weights).transpose()?;
    match a.backend {
        KeyKind::Paillier => {
            warn_seeded_keys(seed);
            if a.key_bits < 16 || a.key_bits % 2 != 0 {
                return Err(CliError::Usage(format!("key size {} must be even and at least 16", a.key_bits)));
            }
            let (pk, sk) = paillier::keygen(a.key_bits / 2, &mut rng(seed, 1))?;
            write(&a.out.join("public.json"), pk.to_json())?;
            write(&a.out.join("secret.json"), sk.to_json())?;
            out.emit(json!({"backend": "paillier", "key_bits": a.key_bits, "fingerprint": pk.fingerprint()}), || {
                format!("paillier key ({} bits) written to {}", a.key_bits, a.out.display())
            });
        }
        KeyKind::Sim => {
            let levels = a.levels.or(model.as_ref().map(ModelSpec::depth_required)).unwrap_or(5);
            let slots = a.ring_degree / 2;
            SimBackend::new(slots, levels)?;
            let dir = KeyDir::Sim { slots, levels };
            write(&a.out.join(BACKEND_FILE), serde_json::to_string_pretty(&dir).expect("serializes"))?;
            out.emit(json!({"backend": "sim", "slots": slots, "levels": levels}), || {
                format!("sim backend ({slots} slots, {levels} levels) written to {}", a.out.display())
            });
        }
        KeyKind::Ckks => {
            warn_seeded_keys(seed);
            let levels = a.levels.or(model.as_ref().map(ModelSpec::depth_required)).unwrap_or(5);
            let params = CkksParams { ring_degree: a.ring_degree, levels, ..CkksParams::default() };
            let slots = a.ring_degree / 2;
            let mut steps: BTreeSet<usize> = a.rotations.iter().copied().collect();
            if let Some(m) = &model {
                steps.extend(m.rotation_steps(slots)?);
            }
            let steps: Vec<usize> = steps.into_iter().filter(|s| s % slots != 0).collect();
            let t = Instant::now();
            let (backend, sk) = CkksBackend::setup(params.clone(), &steps, &mut rng(seed, 1))?;
            let secs = t.elapsed().as_secs_f64();
            write(&a.out.join(BACKEND_FILE), serde_json::to_string_pretty(&KeyDir::Ckks { params }).expect("serializes"))?;
            write(&a.out.join(EVAL_KEY_FILE), backend.to_bytes())?;
            write(&a.out.join(SECRET_KEY_FILE), sk.to_bytes())?;
            out.emit(
                json!({"backend": "ckks", "ring_degree": a.ring_degree, "levels": levels, "rotations": steps.len(), "secs": secs}),
                || {
                    format!(
                        "ckks keys (N={}, {levels} levels, {} rotation keys) written to {} in {secs:.1}s",
                        a.ring_degree,
                        steps.len(),
                        a.out.display()
                    )
                },
            );
        }
    }
    Ok(())
}

fn ceremony(parties: usize, key_bits: u64, dir: &Path, seed: Option<u64>, out: &Out) -> CliResult<()> {
    warn_seeded_keys(seed);
    if key_bits % 2 != 0 {
        return Err(CliError::Usage(format!("key size {key_bits} must be even")));
    }
    create_dir(dir)?;
    let t = Instant::now();
    let (tpk, shares) = threshold::ceremony_keygen(key_bits / 2, parties, &mut rng(seed, 2))?;
    write(&dir.join("public.json"), tpk.to_json())?;
    for s in &shares {
        write(&dir.join(format!("share-{}.json", s.index)), s.to_json())?;
    }
    let secs = t.elapsed().as_secs_f64();
    out.emit(
        json!({"ceremony_id": tpk.ceremony_id(), "parties": parties, "key_bits": key_bits, "fingerprint": tpk.fingerprint(), "secs": secs}),
        || format!("ceremony {} for {parties} parties written to {} in {secs:.1}s", tpk.ceremony_id(), dir.display()),
    );
    Ok(())
}

fn encrypt_with<B: HeBackend + CiphertextCodec<Ciphertext = <B as HeBackend>::Ciphertext>>(
    backend: &B,
    image: &Image,
    model: Option<&ModelSpec>,
) -> CliResult<Vec<u8>> {
    let enc = match model {
        Some(m) => m.encode_image_rows(image, backend)?,
        None => hegemony::enc_tensor::encrypt_image(backend, image)?,
    };
    Ok(store::image_to_bytes(backend, &enc))
}

fn encrypt_image(input: &Path, keys: &Path, dest: &Path, weights: Option<&Path>, seed: Option<u64>, out: &Out) -> CliResult<()> {
    let dir = KeyDir::load(keys)?;
    let image = model::load_image(input)?;
    let model = weights.map(model::load_weights).transpose()?;
    let bytes = match dir.kind() {
        BackendKind::Sim => encrypt_with(&dir.sim()?, &image, model.as_ref())?,
        BackendKind::Ckks => encrypt_with(&load_ckks(keys, seed)?, &image, model.as_ref())?,
    };
    write(dest, &bytes)?;
    out.emit(json!({"out": dest, "bytes": bytes.len(), "rows": image.height}), || {
        format!("encrypted {}x{}x{} image to {} ({} bytes)", image.height, image.width, image.channels, dest.display(), bytes.len())
    });
    Ok(())
}

struct InferReport {
    layers: Vec<(usize, f64)>,
    total_secs: f64,
    levels_left: usize,
    bytes: Vec<u8>,
}

fn infer_with<B>(backend: &B, model: &ModelSpec, input: &[u8]) -> CliResult<InferReport>
where
    B: HeBackend + CiphertextCodec<Ciphertext = <B as HeBackend>::Ciphertext>,
{
    let image = if input.starts_with(b"HEVB") {
        store::image_from_bytes(backend, input)?
    } else {
        let plain = if input.starts_with(b"P5") {
            model::parse_pgm(input)?
        } else {
            model::parse_csv(std::str::from_utf8(input).map_err(|_| CliError::Usage("input is not an image or bundle".into()))?)?
        };
        model.encode_image_rows(&plain, backend)?
    };
    let mut layers = Vec::new();
    let t = Instant::now();
    let logits: HeVector<_> = model.infer_encrypted_with(&image, backend, |i, secs| layers.push((i, secs)))?;
    let total_secs = t.elapsed().as_secs_f64();
    let classes = model.validate()?;
    Ok(InferReport { layers, total_secs, levels_left: logits.level(), bytes: store::logits_to_bytes(backend, &logits, classes) })
}

fn infer(weights: &Path, input: &Path, keys: &Path, kind: BackendKind, dest: &Path, seed: Option<u64>, out: &Out) -> CliResult<()> {
    let dir = KeyDir::load(keys)?;
    check_backend(&dir, kind)?;
    let model = model::load_weights(weights)?;
    let input = read(input)?;
    let report = match kind {
        BackendKind::Sim => infer_with(&dir.sim()?, &model, &input)?,
        BackendKind::Ckks => infer_with(&load_ckks(keys, seed)?, &model, &input)?,
    };
    write(dest, &report.bytes)?;
    let layers: Vec<Value> = report
        .layers
        .iter()
        .map(|&(i, secs)| json!({"layer": i, "kind": layer_name(&model.layers[i]), "secs": secs}))
        .collect();
    out.emit(
        json!({"backend": backend_name(kind), "out": dest, "layers": layers, "total_secs": report.total_secs, "levels_left": report.levels_left}),
        || {
            let mut s = String::from("layer  kind             secs\n");
            for &(i, secs) in &report.layers {
                s += &format!("{i:>5}  {:<15} {secs:>6.2}\n", layer_name(&model.layers[i]));
            }
            s + &format!(
                "total {:.2}s, {} levels left; encrypted logits written to {}",
                report.total_secs,
                report.levels_left,
                dest.display()
            )
        },
    );
    Ok(())
}

fn layer_name(l: &model::Layer) -> &'static str {
    match l {
        model::Layer::Conv2d(_) => "conv2d",
        model::Layer::Square => "square",
        model::Layer::GlobalAvgPool => "global_avg_pool",
        model::Layer::Dense { .. } => "dense",
    }
}

fn decrypt_result(keys: &Path, input: &Path, out: &Out) -> CliResult<()> {
    let dir = KeyDir::load(keys)?;
    let bytes = read(input)?;
    let (backend, _) = store::peek(&bytes)?;
    if backend != backend_name(dir.kind()) {
        return Err(CliError::Usage(format!("result was made by the {backend} backend; keys are {}", backend_name(dir.kind()))));
    }
    let logits = match &dir {
        KeyDir::Sim { .. } => {
            let be = dir.sim()?;
            let (v, classes) = store::logits_from_bytes(&be, &bytes)?;
            model::read_logits(&SimDecryptor.decrypt_vec(&be, &v)?, classes)
        }
        KeyDir::Ckks { .. } => {
            let sk = CkksSecretKey::from_bytes(&read(&keys.join(SECRET_KEY_FILE))?)?;
            let ctx = Arc::clone(sk.context());
            let (v, classes) = store::logits_from_bytes(&*ctx, &bytes)?;
            model::read_logits(&sk.decrypt(v.ciphertext())?, classes)
        }
    };
    let class = model::argmax(&logits);
    out.emit(json!({"logits": logits, "argmax": class}), || {
        let vals: Vec<String> = logits.iter().map(|v| format!("{v:.6}")).collect();
        format!("logits: [{}]\nargmax: {class}", vals.join(", "))
    });
    Ok(())
}

fn fed_config(a: &FedArgs, key_bits: u64, seed: Option<u64>) -> CliResult<FedConfig> {
    let weights = match (a.weights, &a.weights_dir) {
        (Some(w), _) => w,
        (None, Some(dir)) => detect_weight_count(dir)?,
        (None, None) => 100,
    };
    let mut packing = PackingConfig::default();
    if let Some(m) = a.max_addends {
        packing.max_addends = m;
    }
    let cfg = FedConfig {
        clients: a.clients,
        rounds: a.rounds,
        client_fraction: a.fraction,
        local_epochs: a.local_epochs,
        batches_per_round: a.batches,
        learning_rate: a.learning_rate,
        packing,
        key_bits,
        weights,
        seed,
        phase_timeout_secs: a.phase_timeout,
        faults: Default::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn detect_weight_count(dir: &Path) -> CliResult<usize> {
    for name in ["initial.json", "client1.json", "client1_round1.json"] {
        let path = dir.join(name);
        if path.exists() {
            let w: Vec<f64> =
                serde_json::from_str(&read_text(&path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            return Ok(w.len());
        }
    }
    Err(CliError::Usage(format!("{} holds no initial.json or client1 weights; pass --weights", dir.display())))
}

fn provider(a: &FedArgs, cfg: &FedConfig) -> Arc<dyn UpdateProvider> {
    match &a.weights_dir {
        Some(dir) => Arc::new(ReplayProvider::new(dir, cfg.weights)),
        None => Arc::new(StubProvider::new(cfg)),
    }
}

fn print_transcript(t: &fedsim::AggregationTranscript, dest: Option<&Path>, out: &Out) -> CliResult<()> {
    if let Some(path) = dest {
        write(path, t.to_json_lines())?;
    }
    if out.json {
        print!("{}", t.to_json_lines());
    } else {
        print!("{}", t.to_table());
    }
    Ok(())
}

/// Print what survives of an aborted run before reporting the error.
fn fed_outcome(
    r: Result<fedsim::AggregationTranscript, FedError>,
    dest: Option<&Path>,
    out: &Out,
) -> CliResult<()> {
    match r {
        Ok(t) => print_transcript(&t, dest, out),
        Err(FedError::RoundAbort(abort)) => {
            print_transcript(&abort.transcript, dest, out)?;
            Err(FedError::RoundAbort(abort).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn load_tpk(path: &Path) -> CliResult<ThresholdPublicKey> {
    Ok(ThresholdPublicKey::from_json(&read_text(path)?)?)
}

fn bench(layers: &[usize], size: usize, kind: BackendKind, ring_degree: usize, seed: Option<u64>, out: &Out) -> CliResult<()> {
    let seed = seed.unwrap_or(1);
    let mut totals = Vec::new();
    for &convs in layers {
        let spec = Architecture::standard(convs, size).random_spec(seed);
        let image = model::random_image(spec.input_shape, seed ^ 0x1);
        let levels = spec.depth_required();
        let t = Instant::now();
        let (report, logits) = match kind {
            BackendKind::Sim => {
                let be = SimBackend::new(ring_degree / 2, levels)?;
                let enc = spec.encode_image_rows(&image, &be)?;
                bench_run(&spec, &enc, &be, &SimDecryptor)?
            }
            BackendKind::Ckks => {
                let steps: Vec<usize> = spec.rotation_steps(ring_degree / 2)?.into_iter().collect();
                let params = CkksParams { ring_degree, levels, ..CkksParams::default() };
                let (be, sk) = CkksBackend::setup(params, &steps, &mut rng(Some(seed), 4))?;
                let enc = spec.encode_image_rows(&image, &be)?;
                bench_run(&spec, &enc, &be, &sk)?
            }
        };
        let wall = t.elapsed().as_secs_f64();
        let plain = spec.infer_plain(&image)?;
        let err = plain.iter().zip(&logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let layer_json: Vec<Value> =
            report.iter().map(|&(i, s)| json!({"layer": i, "kind": layer_name(&spec.layers[i]), "secs": s})).collect();
        let infer_secs: f64 = report.iter().map(|r| r.1).sum();
        out.emit(
            json!({"conv_layers": convs, "size": size, "backend": backend_name(kind), "levels": levels, "layers": layer_json,
                   "inference_secs": infer_secs, "total_secs": wall, "max_abs_error": err,
                   "argmax_match": model::argmax(&plain) == model::argmax(&logits)}),
            || {
                let mut s = format!("{convs} conv layers, {size}x{size}, {levels} levels\n");
                for &(i, secs) in &report {
                    s += &format!("  layer {i:>2} {:<15} {secs:>8.2}s\n", layer_name(&spec.layers[i]));
                }
                s + &format!("  inference {infer_secs:.2}s, with setup {wall:.2}s, max error vs plaintext {err:.2e}")
            },
        );
        totals.push((convs, infer_secs));
    }
    let mut sorted = totals.clone();
    sorted.sort_by_key(|t| t.0);
    let monotone = sorted.windows(2).all(|w| w[0].0 == w[1].0 || w[1].1 > w[0].1);
    out.emit(json!({"monotone_in_depth": monotone}), || {
        format!("deeper models take longer: {}", if monotone { "yes" } else { "NO" })
    });
    // Simulator timings are too small to order reliably.
    if !monotone && kind == BackendKind::Ckks {
        return Err(CliError::Other("inference time did not grow with depth".into()));
    }
    Ok(())
}

fn bench_run<B: HeBackend, D: HeDecryptor<B>>(
    spec: &ModelSpec,
    enc: &hegemony::enc_tensor::EncImage<B::Ciphertext>,
    backend: &B,
    dec: &D,
) -> CliResult<(Vec<(usize, f64)>, Vec<f64>)> {
    let mut layers = Vec::new();
    let y = spec.infer_encrypted_with(enc, backend, |i, s| layers.push((i, s)))?;
    let classes = spec.validate()?;
    Ok((layers, model::read_logits(&dec.decrypt_vec(backend, &y)?, classes)))
}

fn run_verify(suite: Suite, quick: bool, seed: Option<u64>, out: &Out) -> CliResult<()> {
    let checks = verify::run(suite, VerifyOptions { seed: seed.unwrap_or(1), quick });
    if out.json {
        for c in &checks {
            println!("{}", serde_json::to_string(c).expect("serializes"));
        }
    } else {
        print!("{}", verify::to_table(&checks));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Other(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    let out = Out { json: cli.json };
    let seed = cli.seed;
    match cli.command {
        Command::Keygen(a) => keygen(&a, seed, &out),
        Command::Ceremony { parties, key_bits, out: dir } => ceremony(parties, key_bits, &dir, seed, &out),
        Command::EncryptImage { input, keys, out: dest, weights } => {
            encrypt_image(&input, &keys, &dest, weights.as_deref(), seed, &out)
        }
        Command::Infer { weights, input, keys, backend, out: dest } => {
            infer(&weights, &input, &keys, backend, &dest, seed, &out)
        }
        Command::DecryptResult { keys, input } => decrypt_result(&keys, &input, &out),
        Command::FedServer { listen, public_key, fed, transcript } => {
            let tpk = load_tpk(&public_key)?;
            let key_bits = tpk.n().bits();
            let cfg = fed_config(&fed, key_bits + key_bits % 2, seed)?;
            fed_outcome(fedsim::serve(&listen, tpk, &cfg), transcript.as_deref(), &out)
        }
        Command::FedClient { connect, share, public_key, fed } => {
            let tpk = load_tpk(&public_key)?;
            let share = ThresholdKeyShare::from_json(&read_text(&share)?)?;
            let key_bits = tpk.n().bits();
            let cfg = fed_config(&fed, key_bits + key_bits % 2, seed)?;
            let report = fedsim::connect(&connect, share, tpk, provider(&fed, &cfg), &cfg)?;
            out.emit(
                json!({"client": report.id, "rounds": report.checksums.len(), "checksums": report.checksums,
                       "abort": report.abort, "rejected_messages": report.rejected_messages}),
                || format!("client {} finished {} rounds; checksums {:?}", report.id, report.checksums.len(), report.checksums),
            );
            match report.abort {
                Some(f) => Err(CliError::Crypto(format!("session aborted ({:?}): {}", f.kind, f.message))),
                None => Ok(()),
            }
        }
        Command::FedSim { fed, key_bits, transcript } => {
            let cfg = fed_config(&fed, key_bits, seed)?;
            fed_outcome(fedsim::run_simulation(&cfg, provider(&fed, &cfg)), transcript.as_deref(), &out)
        }
        Command::Bench { layers, size, backend, ring_degree } => bench(&layers, size, backend, ring_degree, seed, &out),
        Command::Verify { suite, quick } => run_verify(suite, quick, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            eprintln!("{}", json!({"error": {"kind": "usage", "code": 2, "message": e.kind().to_string()}}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "code": e.code(), "message": e.message()}}));
            ExitCode::from(e.code())
        }
    }
}
