//! Client role: local update, pack and encrypt, partial decryption, and
//! local averaging of the jointly decrypted sum.

use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::{BigUint, RandBigInt};
use num_traits::One;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::messages::{Body, ClientPartials, Failure, FailureKind, RoundMessage, SERVER_ID};
use super::transcript::checksum;
use super::transport::Connection;
use super::{mix_seed, rng_for, FaultPlan, FedConfig, FedError, UpdateProvider};
use crate::packing::{pack, plaintext_bits_for, unpack_sum, PackedWeights, PackingConfig, PackingError};
use crate::paillier::PaillierCiphertext;
use crate::threshold::{PartialDecryption, ThresholdError, ThresholdKeyShare, ThresholdPublicKey};

pub struct Client {
    share: ThresholdKeyShare,
    tpk: ThresholdPublicKey,
    provider: Arc<dyn UpdateProvider>,
    faults: FaultPlan,
    seed: Option<u64>,
    timeout: Duration,
}

/// What one client saw over the session.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub id: u32,
    /// Global weights after each completed round.
    pub history: Vec<Vec<f64>>,
    pub checksums: Vec<String>,
    pub abort: Option<Failure>,
    pub rejected_messages: u64,
}

impl ClientReport {
    pub fn final_weights(&self) -> Option<&[f64]> {
        self.history.last().map(Vec::as_slice)
    }
}

// State carried between the phases of one round.
struct RoundState {
    participants: Vec<u32>,
    weight_count: usize,
    key_id: u64,
    aggregate_len: usize,
    average: Option<Vec<f64>>,
}

fn failure_of_threshold(e: ThresholdError) -> Failure {
    let kind = match e {
        ThresholdError::IncompleteShareSet(_) => FailureKind::IncompleteShareSet,
        _ => FailureKind::CombineFailed,
    };
    Failure { kind, message: e.to_string() }
}

fn failure_of_packing(e: PackingError) -> Failure {
    let kind = match e {
        PackingError::OverflowDetected(_) => FailureKind::OverflowDetected,
        _ => FailureKind::Protocol,
    };
    Failure { kind, message: e.to_string() }
}

impl Client {
    pub fn new(
        share: ThresholdKeyShare,
        tpk: ThresholdPublicKey,
        provider: Arc<dyn UpdateProvider>,
        config: &FedConfig,
    ) -> Result<Self, FedError> {
        if share.ceremony_id != tpk.ceremony_id() {
            return Err(ThresholdError::KeyMismatch(format!(
                "share of ceremony {} does not match public key of {}",
                share.ceremony_id,
                tpk.ceremony_id()
            ))
            .into());
        }
        if share.index == 0 || share.index > tpk.parties() as u64 {
            return Err(FedError::Config(format!("share index {} outside 1..={}", share.index, tpk.parties())));
        }
        Ok(Self {
            share,
            tpk,
            provider,
            faults: config.faults.clone(),
            seed: config.seed,
            timeout: config.phase_timeout() * 3,
        })
    }

    /// Wait for the dealer's ShareDelivery on `dealer`.
    pub fn from_dealer(
        dealer: &mut Connection,
        provider: Arc<dyn UpdateProvider>,
        config: &FedConfig,
    ) -> Result<Self, FedError> {
        let msg = dealer.recv(config.phase_timeout())?;
        let Body::ShareDelivery { share, public_key } = msg.body else {
            return Err(FedError::Protocol(format!("expected ShareDelivery, got {}", msg.body.kind())));
        };
        let share = ThresholdKeyShare::from_json(&share)?;
        let tpk = ThresholdPublicKey::from_json(&public_key)?;
        Self::new(share, tpk, provider, config)
    }

    pub fn id(&self) -> u32 {
        self.share.index as u32
    }

    pub fn run(self, mut conn: Connection) -> Result<ClientReport, FedError> {
        let id = self.id();
        conn.send(&RoundMessage::new(
            0,
            id,
            Body::Hello {
                client_id: id,
                ceremony_id: self.tpk.ceremony_id().to_string(),
                key_fingerprint: self.tpk.fingerprint(),
            },
        ))?;
        let mut report = ClientReport { id, history: Vec::new(), checksums: Vec::new(), abort: None, rejected_messages: 0 };

        let (packing, weight_count) = loop {
            let msg = conn.recv(self.timeout)?;
            match msg.body {
                Body::PublicKeyBroadcast { public_key, packing, weight_count } if msg.sender == SERVER_ID => {
                    let server_key = ThresholdPublicKey::from_json(&public_key)?;
                    if server_key.fingerprint() != self.tpk.fingerprint() {
                        return Err(ThresholdError::KeyMismatch("server announced a different public key".into()).into());
                    }
                    packing.validate()?;
                    break (packing, weight_count);
                }
                _ => report.rejected_messages += 1,
            }
        };
        let mut global = self.provider.initial_weights()?;
        if global.len() != weight_count {
            return Err(FedError::Update(format!("initial weights have {} entries, expected {weight_count}", global.len())));
        }

        let mut current = 0u64;
        let mut state: Option<RoundState> = None;
        let mut previous_upload: Option<RoundMessage> = None;
        loop {
            let msg = conn.recv(self.timeout)?;
            if msg.sender != SERVER_ID {
                report.rejected_messages += 1;
                continue;
            }
            match msg.body {
                Body::RoundStart { selected } if msg.round > current => {
                    current = msg.round;
                    state = None;
                    if selected.contains(&id) {
                        let upload = self.upload(current, &global, &packing)?;
                        if self.faults.replay_upload_from == Some(id) {
                            if let Some(old) = previous_upload.take() {
                                conn.send(&old)?;
                            }
                            conn.send(&upload)?;
                        }
                        conn.send(&upload)?;
                        previous_upload = Some(upload);
                    }
                }
                Body::AggregateBroadcast { participants, weight_count: wc, key_id, ciphertexts }
                    if msg.round == current && state.is_none() =>
                {
                    let partials = self.partials(current, key_id, &ciphertexts)?;
                    conn.send(&RoundMessage::new(
                        current,
                        id,
                        Body::PartialDecryption { partials: vec![ClientPartials { client: id, partials }] },
                    ))?;
                    state = Some(RoundState {
                        participants,
                        weight_count: wc,
                        key_id,
                        aggregate_len: ciphertexts.len(),
                        average: None,
                    });
                }
                Body::PartialDecryption { partials } if msg.round == current && state.is_some() => {
                    let st = state.as_mut().expect("checked above");
                    let outcome = self.average(st, &partials, &packing);
                    let (checksum, failure) = match outcome {
                        Ok(avg) => {
                            let sum = checksum(&avg);
                            st.average = Some(avg);
                            (Some(sum), None)
                        }
                        Err(f) => (None, Some(f)),
                    };
                    conn.send(&RoundMessage::new(current, id, Body::RoundComplete { checksum, failure, last: false }))?;
                }
                Body::RoundComplete { checksum, failure, last } if msg.round == current => {
                    if let Some(f) = failure {
                        report.abort = Some(f);
                        return Ok(report);
                    }
                    let Some(avg) = state.take().and_then(|s| s.average) else {
                        return Err(FedError::Protocol(format!("round {current} closed before this client finished it")));
                    };
                    global = avg;
                    report.history.push(global.clone());
                    report.checksums.push(checksum.unwrap_or_default());
                    if last {
                        return Ok(report);
                    }
                }
                _ => {
                    log::warn!("client {id}: ignoring {} for round {}", msg.body.kind(), msg.round);
                    report.rejected_messages += 1;
                }
            }
        }
    }

    fn upload(&self, round: u64, global: &[f64], packing: &PackingConfig) -> Result<RoundMessage, FedError> {
        let id = self.id();
        let t = Instant::now();
        let weights = self.provider.client_update(id, round, global)?;
        if weights.len() != global.len() {
            return Err(FedError::Update(format!("update has {} weights, expected {}", weights.len(), global.len())));
        }
        let local_update_secs = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let packed = pack(&weights, packing, plaintext_bits_for(self.tpk.n()))?;
        let base = self.seed.map(|s| mix_seed(s, id as u64, round));
        let ciphertexts = packed
            .integers
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let mut rng = match base {
                    Some(b) => {
                        let mut r = ChaCha20Rng::seed_from_u64(b);
                        r.set_stream(i as u64);
                        r
                    }
                    None => ChaCha20Rng::from_entropy(),
                };
                self.tpk.encrypt(m, &mut rng).map(|c| c.value)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RoundMessage::new(
            round,
            id,
            Body::ModelUpload {
                weight_count: weights.len(),
                key_id: self.tpk.fingerprint(),
                ciphertexts,
                local_update_secs,
                encrypt_secs: t.elapsed().as_secs_f64(),
            },
        ))
    }

    fn partials(&self, round: u64, key_id: u64, aggregate: &[BigUint]) -> Result<Vec<PartialDecryption>, FedError> {
        let id = self.id();
        if self.faults.withhold_partial_from == Some(id) {
            log::warn!("client {id}: withholding partial decryptions");
            return Ok(Vec::new());
        }
        let mut partials = aggregate
            .par_iter()
            .map(|c| self.share.partial_decrypt(&self.tpk, &PaillierCiphertext { value: c.clone(), key_id }))
            .collect::<Result<Vec<_>, _>>()?;
        if self.faults.corrupt_partial_from == Some(id) {
            log::warn!("client {id}: corrupting partial decryptions");
            let mut rng = rng_for(self.seed, id as u64, round ^ 0xbad);
            let n2 = self.tpk.paillier().n_squared();
            for p in &mut partials {
                p.c_i = rng.gen_biguint_range(&BigUint::one(), n2);
            }
        }
        Ok(partials)
    }

    fn average(
        &self,
        st: &RoundState,
        partials: &[ClientPartials],
        packing: &PackingConfig,
    ) -> Result<Vec<f64>, Failure> {
        let sums = (0..st.aggregate_len)
            .into_par_iter()
            .map(|i| {
                let set: Vec<PartialDecryption> = partials
                    .iter()
                    .filter_map(|c| c.partials.get(i))
                    .filter(|p| p.key_id == st.key_id)
                    .cloned()
                    .collect();
                self.tpk.combine(&set)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(failure_of_threshold)?;
        let packed = PackedWeights::from_integers(sums, st.weight_count, *packing, plaintext_bits_for(self.tpk.n()));
        unpack_sum(&packed, st.participants.len() as u32).map_err(failure_of_packing)
    }
}
