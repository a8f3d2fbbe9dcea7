//! Federated averaging over threshold Paillier.
//!
//! Selected clients pack and encrypt their weights, the server multiplies
//! the ciphertexts into an encrypted slotwise sum, and every client
//! contributes a partial decryption. Clients combine the partials and
//! divide by the participant count locally; the server never holds a key
//! share. A dealer runs the key ceremony once before round 1 and hands each
//! client its share directly.

pub mod client;
pub mod messages;
pub mod server;
pub mod transcript;
pub mod transport;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packing::{PackingConfig, PackingError};
use crate::threshold::{self, ThresholdError, ThresholdPublicKey};

pub use client::{Client, ClientReport};
pub use messages::{Body, ClientPartials, Failure, FailureKind, RoundMessage, PROTOCOL_VERSION, SERVER_ID};
pub use server::Server;
pub use transcript::{checksum, AggregationTranscript, PhaseTimes, RoundAbort, RoundRecord};
pub use transport::Connection;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("protocol version {theirs} does not match ours ({ours})")]
    VersionMismatch { ours: u32, theirs: u32 },
    #[error("weight update failed: {0}")]
    Update(String),
    #[error("round {} aborted ({:?}): {}", .0.round, .0.kind, .0.message)]
    RoundAbort(Box<RoundAbort>),
    #[error("client {id}: {source}")]
    Client { id: u32, source: Box<FedError> },
}

/// Misbehaviour injected into specific clients, for testing the abort paths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    /// This client replaces its partial decryptions with random group elements.
    pub corrupt_partial_from: Option<u32>,
    /// This client sends an empty partial decryption list.
    pub withhold_partial_from: Option<u32>,
    /// This client re-sends its previous round's upload and duplicates its
    /// current one; the server must discard both.
    pub replay_upload_from: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: u64,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batches_per_round: usize,
    pub learning_rate: f64,
    pub packing: PackingConfig,
    /// Paillier modulus size; each prime has half as many bits.
    pub key_bits: u64,
    /// Length of the weight vector.
    pub weights: usize,
    /// Seeds the ceremony, client selection, stub updates and encryption
    /// randomness. `None` draws everything from the OS.
    pub seed: Option<u64>,
    pub phase_timeout_secs: f64,
    #[serde(default)]
    pub faults: FaultPlan,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 3,
            rounds: 1,
            client_fraction: 1.0,
            local_epochs: 1,
            batches_per_round: 1,
            learning_rate: 0.01,
            packing: PackingConfig::default(),
            key_bits: 512,
            weights: 100,
            seed: None,
            phase_timeout_secs: 60.0,
            faults: FaultPlan::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.clients < 2 {
            return Err(FedError::Config("need at least two clients".into()));
        }
        if self.rounds == 0 {
            return Err(FedError::Config("need at least one round".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(FedError::Config(format!("client fraction {} not in (0, 1]", self.client_fraction)));
        }
        if self.key_bits < 64 || self.key_bits % 2 != 0 {
            return Err(FedError::Config(format!("key size {} must be even and at least 64", self.key_bits)));
        }
        if self.weights == 0 {
            return Err(FedError::Config("weight vector is empty".into()));
        }
        if !(self.phase_timeout_secs > 0.0) {
            return Err(FedError::Config("phase timeout must be positive".into()));
        }
        self.packing.validate()?;
        Ok(())
    }

    /// `max(floor(C * K), 1)`.
    pub fn clients_per_round(&self) -> usize {
        ((self.client_fraction * self.clients as f64).floor() as usize).clamp(1, self.clients)
    }

    pub fn phase_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.phase_timeout_secs)
    }
}

/// Source of each client's locally trained weights.
pub trait UpdateProvider: Send + Sync {
    /// Global weights before round 1; identical for every client.
    fn initial_weights(&self) -> Result<Vec<f64>, FedError>;
    /// Weights `client` holds after local training in `round`, starting from `global`.
    fn client_update(&self, client: u32, round: u64, global: &[f64]) -> Result<Vec<f64>, FedError>;
}

/// Stand-in for local SGD: `batches * epochs` steps of `w += lr * u` with
/// `u` uniform in `[-1, 1]` per weight, drawn from `seed`.
pub fn client_update_stub(seed: u64, previous: &[f64], config: &FedConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = previous.to_vec();
    let steps = config.batches_per_round * config.local_epochs;
    for _ in 0..steps {
        for x in w.iter_mut() {
            *x += config.learning_rate * rng.gen_range(-1.0..=1.0);
        }
    }
    w
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Synthetic provider built on [`client_update_stub`].
#[derive(Debug, Clone)]
pub struct StubProvider {
    pub config: FedConfig,
    pub seed: u64,
}

impl StubProvider {
    pub fn new(config: &FedConfig) -> Self {
        Self { config: config.clone(), seed: config.seed.unwrap_or_else(rand::random) }
    }
}

impl UpdateProvider for StubProvider {
    fn initial_weights(&self) -> Result<Vec<f64>, FedError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0, 0));
        Ok((0..self.config.weights).map(|_| rng.gen_range(-0.5..=0.5)).collect())
    }

    fn client_update(&self, client: u32, round: u64, global: &[f64]) -> Result<Vec<f64>, FedError> {
        Ok(client_update_stub(mix_seed(self.seed, client as u64, round), global, &self.config))
    }
}

/// Every client submits the same vector each round.
#[derive(Debug, Clone)]
pub struct FixedProvider {
    pub initial: Vec<f64>,
    pub per_client: BTreeMap<u32, Vec<f64>>,
}

impl UpdateProvider for FixedProvider {
    fn initial_weights(&self) -> Result<Vec<f64>, FedError> {
        Ok(self.initial.clone())
    }

    fn client_update(&self, client: u32, _round: u64, _global: &[f64]) -> Result<Vec<f64>, FedError> {
        self.per_client.get(&client).cloned().ok_or_else(|| FedError::Update(format!("no weights for client {client}")))
    }
}

/// Replays weight vectors from JSON arrays in a directory. A client's
/// update for round `t` is read from `client{id}_round{t}.json`, falling
/// back to `client{id}.json`; the starting point is `initial.json`, or
/// zeros when absent.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    pub dir: PathBuf,
    pub weights: usize,
}

impl ReplayProvider {
    pub fn new(dir: impl Into<PathBuf>, weights: usize) -> Self {
        Self { dir: dir.into(), weights }
    }

    fn load(&self, path: &Path) -> Result<Vec<f64>, FedError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FedError::Update(format!("{}: {e}", path.display())))?;
        let w: Vec<f64> =
            serde_json::from_str(&text).map_err(|e| FedError::Update(format!("{}: {e}", path.display())))?;
        if w.len() != self.weights {
            return Err(FedError::Update(format!("{} holds {} weights, expected {}", path.display(), w.len(), self.weights)));
        }
        Ok(w)
    }
}

impl UpdateProvider for ReplayProvider {
    fn initial_weights(&self) -> Result<Vec<f64>, FedError> {
        let path = self.dir.join("initial.json");
        if path.exists() {
            self.load(&path)
        } else {
            Ok(vec![0.0; self.weights])
        }
    }

    fn client_update(&self, client: u32, round: u64, _global: &[f64]) -> Result<Vec<f64>, FedError> {
        let per_round = self.dir.join(format!("client{client}_round{round}.json"));
        if per_round.exists() {
            return self.load(&per_round);
        }
        self.load(&self.dir.join(format!("client{client}.json")))
    }
}

/// Transcript plus each client's view of the run.
#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub transcript: AggregationTranscript,
    pub clients: Vec<ClientReport>,
}

pub(crate) fn rng_for(seed: Option<u64>, a: u64, b: u64) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(mix_seed(s, a, b)),
        None => ChaCha20Rng::from_entropy(),
    }
}

/// Dealer role: run the ceremony for `config.clients` parties.
pub fn run_ceremony(config: &FedConfig) -> Result<(ThresholdPublicKey, Vec<threshold::ThresholdKeyShare>), FedError> {
    let mut rng = rng_for(config.seed, u64::MAX, 0);
    Ok(threshold::ceremony_keygen(config.key_bits / 2, config.clients, &mut rng)?)
}

/// Run the whole protocol in one process over loopback links.
pub fn run_simulation(config: &FedConfig, provider: Arc<dyn UpdateProvider>) -> Result<AggregationTranscript, FedError> {
    run_simulation_full(config, provider).map(|r| r.transcript)
}

pub fn run_simulation_full(config: &FedConfig, provider: Arc<dyn UpdateProvider>) -> Result<SimulationResult, FedError> {
    config.validate()?;
    let (tpk, shares) = run_ceremony(config)?;
    run_with_keys(config, provider, &tpk, shares)
}

/// Simulation over an existing ceremony.
pub fn run_with_keys(
    config: &FedConfig,
    provider: Arc<dyn UpdateProvider>,
    tpk: &ThresholdPublicKey,
    shares: Vec<threshold::ThresholdKeyShare>,
) -> Result<SimulationResult, FedError> {
    config.validate()?;
    if shares.len() != config.clients || tpk.parties() != config.clients {
        return Err(FedError::Config(format!("{} shares for {} clients", shares.len(), config.clients)));
    }
    let mut server_links = Vec::with_capacity(config.clients);
    let mut handles = Vec::with_capacity(config.clients);
    for share in shares {
        let id = share.index as u32;
        let (mut dealer_end, mut client_dealer_end) = Connection::loopback_pair();
        dealer_end.send(&RoundMessage::new(
            0,
            SERVER_ID,
            Body::ShareDelivery { share: share.to_json(), public_key: tpk.to_json() },
        ))?;
        let (server_end, client_end) = Connection::loopback_pair();
        server_links.push(server_end);
        let provider = Arc::clone(&provider);
        let config = config.clone();
        handles.push(std::thread::spawn(move || -> Result<ClientReport, FedError> {
            let client = Client::from_dealer(&mut client_dealer_end, provider, &config)?;
            client.run(client_end)
        }));
        log::debug!("dealt share {id}");
    }
    let outcome = Server::new(tpk.clone(), config.clone()).run(server_links);
    let mut reports = Vec::new();
    let mut client_error = None;
    for (i, h) in handles.into_iter().enumerate() {
        match h.join() {
            Ok(Ok(r)) => reports.push(r),
            Ok(Err(e)) => {
                client_error.get_or_insert(FedError::Client { id: i as u32 + 1, source: Box::new(e) });
            }
            Err(_) => {
                client_error.get_or_insert(FedError::Protocol(format!("client {} panicked", i + 1)));
            }
        }
    }
    let transcript = outcome?;
    if let Some(e) = client_error {
        return Err(e);
    }
    Ok(SimulationResult { transcript, clients: reports })
}

/// Accept `config.clients` TCP clients on `addr` and run the server role.
pub fn serve(addr: &str, tpk: ThresholdPublicKey, config: &FedConfig) -> Result<AggregationTranscript, FedError> {
    config.validate()?;
    let listener = std::net::TcpListener::bind(addr)?;
    serve_on(listener, tpk, config)
}

pub fn serve_on(
    listener: std::net::TcpListener,
    tpk: ThresholdPublicKey,
    config: &FedConfig,
) -> Result<AggregationTranscript, FedError> {
    listener.set_nonblocking(true)?;
    let deadline = std::time::Instant::now() + config.phase_timeout();
    let mut links = Vec::with_capacity(config.clients);
    while links.len() < config.clients {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                log::info!("client connected from {peer}");
                links.push(Connection::tcp(stream)?);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if std::time::Instant::now() > deadline {
                    return Err(FedError::Timeout(format!("{} of {} clients connected", links.len(), config.clients)));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Server::new(tpk, config.clone()).run(links)
}

/// Connect to a server at `addr` and run the client role with a share
/// loaded from disk.
pub fn connect(
    addr: &str,
    share: threshold::ThresholdKeyShare,
    tpk: ThresholdPublicKey,
    provider: Arc<dyn UpdateProvider>,
    config: &FedConfig,
) -> Result<ClientReport, FedError> {
    let deadline = std::time::Instant::now() + config.phase_timeout();
    let stream = loop {
        match std::net::TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if std::time::Instant::now() < deadline => {
                log::debug!("connect to {addr}: {e}; retrying");
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e.into()),
        }
    };
    Client::new(share, tpk, provider, config)?.run(Connection::tcp(stream)?)
}
