//! Aggregation server. It holds only the threshold public key: it checks
//! uploads, multiplies ciphertexts mod n^2 and relays the clients' partial
//! decryptions, but has no way to open anything itself.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::seq::index;
use rayon::prelude::*;

use super::messages::{Body, Failure, FailureKind, RoundMessage, SERVER_ID};
use super::transcript::{AggregationTranscript, PhaseTimes, RoundAbort, RoundRecord};
use super::transport::{recv_on, send_on, Connection, FrameReader, FrameWriter};
use super::{rng_for, FedConfig, FedError};
use crate::packing::plaintext_bits_for;
use crate::threshold::{ThresholdError, ThresholdPublicKey};

pub struct Server {
    tpk: ThresholdPublicKey,
    config: FedConfig,
}

enum Verdict<T> {
    Accept(T),
    Reject(String),
    Abort(Failure),
}

enum Stop {
    Abort(Failure),
    Fatal(FedError),
}

impl From<FedError> for Stop {
    fn from(e: FedError) -> Self {
        Stop::Fatal(e)
    }
}

type Inbound = (usize, Result<RoundMessage, FedError>);

struct Session {
    writers: Vec<Box<dyn FrameWriter>>,
    // link index of each client id
    links: BTreeMap<u32, usize>,
    // client id of each link, once known
    ids: Vec<Option<u32>>,
    inbox: Receiver<Inbound>,
    closed: Arc<AtomicBool>,
    rejected: u64,
    timeout: Duration,
}

impl Drop for Session {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::Relaxed);
        for w in &mut self.writers {
            w.close();
        }
    }
}

fn spawn_reader(link: usize, mut reader: Box<dyn FrameReader>, tx: Sender<Inbound>, closed: Arc<AtomicBool>) {
    std::thread::spawn(move || {
        while !closed.load(Ordering::Relaxed) {
            match recv_on(reader.as_mut(), Duration::from_millis(200)) {
                Err(FedError::Timeout(_)) => continue,
                r => {
                    let gone = matches!(r, Err(FedError::Io(_)));
                    if tx.send((link, r)).is_err() || gone {
                        break;
                    }
                }
            }
        }
    });
}

impl Session {
    fn open(links: Vec<Connection>, timeout: Duration) -> Self {
        let (tx, inbox) = mpsc::channel();
        let closed = Arc::new(AtomicBool::new(false));
        let mut writers = Vec::with_capacity(links.len());
        for (i, c) in links.into_iter().enumerate() {
            spawn_reader(i, c.reader, tx.clone(), Arc::clone(&closed));
            writers.push(c.writer);
        }
        let ids = vec![None; writers.len()];
        Self { writers, links: BTreeMap::new(), ids, inbox, closed, rejected: 0, timeout }
    }

    fn send_to(&mut self, id: u32, msg: &RoundMessage) -> Result<(), FedError> {
        let link = self.links[&id];
        send_on(self.writers[link].as_mut(), msg)
    }

    fn broadcast(&mut self, round: u64, body: Body) -> Result<(), FedError> {
        let msg = RoundMessage::new(round, SERVER_ID, body);
        let ids: Vec<u32> = self.links.keys().copied().collect();
        for id in ids {
            self.send_to(id, &msg)?;
        }
        Ok(())
    }

    fn reject(&mut self, why: String) {
        log::warn!("rejected message: {why}");
        self.rejected += 1;
    }

    fn next(&mut self, deadline: Instant, waiting_for: &str) -> Result<Inbound, FedError> {
        let left = deadline.saturating_duration_since(Instant::now());
        self.inbox.recv_timeout(left).map_err(|e| match e {
            RecvTimeoutError::Timeout => FedError::Timeout(format!("waiting for {waiting_for}")),
            RecvTimeoutError::Disconnected => FedError::Protocol("all client links closed".into()),
        })
    }

    /// Gather exactly one accepted message of round `round` from each id in
    /// `from`. Everything else is rejected and counted.
    fn collect<T>(
        &mut self,
        round: u64,
        from: &BTreeSet<u32>,
        phase: &str,
        mut judge: impl FnMut(u32, Body) -> Verdict<T>,
    ) -> Result<BTreeMap<u32, T>, Stop> {
        let deadline = Instant::now() + self.timeout;
        let mut got = BTreeMap::new();
        while got.len() < from.len() {
            let missing: Vec<u32> = from.iter().filter(|id| !got.contains_key(*id)).copied().collect();
            let (link, res) = self.next(deadline, &format!("{phase} from clients {missing:?}"))?;
            let Some(id) = self.ids[link] else {
                self.reject(format!("message on unidentified link {link}"));
                continue;
            };
            let msg = match res {
                Ok(m) => m,
                Err(FedError::Io(e)) => return Err(FedError::Protocol(format!("client {id} disconnected: {e}")).into()),
                Err(e) => {
                    self.reject(format!("client {id}: {e}"));
                    continue;
                }
            };
            if msg.sender != id {
                self.reject(format!("client {id} claims to be {}", msg.sender));
            } else if msg.round != round {
                self.reject(format!("{} from client {id} is for round {}, not {round}", msg.kind(), msg.round));
            } else if !from.contains(&id) || got.contains_key(&id) {
                self.reject(format!("unexpected {} from client {id} during {phase}", msg.kind()));
            } else {
                let kind = msg.kind();
                match judge(id, msg.body) {
                    Verdict::Accept(t) => {
                        got.insert(id, t);
                    }
                    Verdict::Reject(why) => self.reject(format!("{kind} from client {id}: {why}")),
                    Verdict::Abort(f) => return Err(Stop::Abort(f)),
                }
            }
        }
        Ok(got)
    }
}

struct Upload {
    ciphertexts: Vec<BigUint>,
    local_update_secs: f64,
}

impl Server {
    pub fn new(tpk: ThresholdPublicKey, config: FedConfig) -> Self {
        Self { tpk, config }
    }

    /// Ciphertexts per upload for the configured vector length.
    pub fn ciphertexts_per_upload(&self) -> usize {
        let per = self.config.packing.slots_per_integer(plaintext_bits_for(self.tpk.n())).max(1);
        self.config.weights.div_ceil(per)
    }

    /// Serve every round over the given client links.
    pub fn run(&self, links: Vec<Connection>) -> Result<AggregationTranscript, FedError> {
        if links.len() != self.config.clients {
            return Err(FedError::Config(format!("{} links for {} clients", links.len(), self.config.clients)));
        }
        let mut session = Session::open(links, self.config.phase_timeout());
        self.handshake(&mut session)?;
        let mut transcript = AggregationTranscript::default();
        let mut rng = rng_for(self.config.seed, u64::MAX - 1, 0);
        for round in 1..=self.config.rounds {
            let k = self.config.clients;
            let m = self.config.clients_per_round();
            let mut selected: Vec<u32> = index::sample(&mut rng, k, m).into_iter().map(|i| i as u32 + 1).collect();
            selected.sort_unstable();
            let (record, failure) = self.round(&mut session, round, selected)?;
            transcript.rounds.push(record);
            let last = round == self.config.rounds;
            if let Some(f) = failure {
                session.broadcast(round, Body::RoundComplete { checksum: None, failure: Some(f.clone()), last: true })?;
                return Err(FedError::RoundAbort(Box::new(RoundAbort {
                    round,
                    kind: f.kind,
                    message: f.message,
                    transcript,
                })));
            }
            let checksum = transcript.rounds.last().and_then(|r| r.checksum.clone());
            session.broadcast(round, Body::RoundComplete { checksum, failure: None, last })?;
        }
        Ok(transcript)
    }

    fn handshake(&self, s: &mut Session) -> Result<(), FedError> {
        let deadline = Instant::now() + s.timeout;
        let k = self.config.clients as u32;
        while s.links.len() < self.config.clients {
            let (link, res) = s.next(deadline, "Hello from every client")?;
            let msg = res?;
            let Body::Hello { client_id, ceremony_id, key_fingerprint } = msg.body else {
                s.reject(format!("{} before Hello on link {link}", msg.body.kind()));
                continue;
            };
            if s.ids[link].is_some() || msg.round != 0 || msg.sender != client_id {
                s.reject(format!("malformed Hello on link {link}"));
                continue;
            }
            if client_id == SERVER_ID || client_id > k || s.links.contains_key(&client_id) {
                return Err(FedError::Protocol(format!("client id {client_id} is invalid or already connected")));
            }
            if ceremony_id != self.tpk.ceremony_id() || key_fingerprint != self.tpk.fingerprint() {
                return Err(ThresholdError::KeyMismatch(format!(
                    "client {client_id} holds a share of ceremony {ceremony_id} (key {key_fingerprint:016x})"
                ))
                .into());
            }
            s.ids[link] = Some(client_id);
            s.links.insert(client_id, link);
            log::info!("client {client_id} joined");
        }
        s.broadcast(
            0,
            Body::PublicKeyBroadcast {
                public_key: self.tpk.to_json(),
                packing: self.config.packing,
                weight_count: self.config.weights,
            },
        )
    }

    fn round(
        &self,
        s: &mut Session,
        round: u64,
        selected: Vec<u32>,
    ) -> Result<(RoundRecord, Option<Failure>), FedError> {
        let started = Instant::now();
        let mut phases = PhaseTimes::default();
        let expected = self.ciphertexts_per_upload();
        let mut record = RoundRecord {
            round,
            participants: selected.clone(),
            ciphertexts: expected,
            phases,
            total_secs: 0.0,
            checksum: None,
            failure: None,
            rejected_messages: 0,
        };
        log::info!("round {round}: selected {selected:?}");
        s.broadcast(round, Body::RoundStart { selected: selected.clone() })?;

        let outcome = self.round_phases(s, round, &selected, expected, started, &mut phases);
        phases.decrypt = (started.elapsed().as_secs_f64() - phases.local_update - phases.encrypt - phases.aggregate).max(0.0);
        record.phases = phases;
        record.total_secs = phases.total();
        record.rejected_messages = std::mem::take(&mut s.rejected);
        match outcome {
            Ok(checksum) => {
                record.checksum = Some(checksum);
                Ok((record, None))
            }
            Err(Stop::Abort(f)) => {
                log::warn!("round {round} aborted: {:?}: {}", f.kind, f.message);
                record.failure = Some(f.clone());
                Ok((record, Some(f)))
            }
            Err(Stop::Fatal(e)) => Err(e),
        }
    }

    // Each phase's time is written into `phases` as soon as it ends, so a
    // failed round still reports everything up to the failure.
    fn round_phases(
        &self,
        s: &mut Session,
        round: u64,
        selected: &[u32],
        expected: usize,
        started: Instant,
        phases: &mut PhaseTimes,
    ) -> Result<String, Stop> {
        let fingerprint = self.tpk.fingerprint();
        let n2 = self.tpk.paillier().n_squared().clone();
        let weight_count = self.config.weights;
        let selected_set: BTreeSet<u32> = selected.iter().copied().collect();
        let everyone: BTreeSet<u32> = s.links.keys().copied().collect();

        let uploads = s.collect(round, &selected_set, "ModelUpload", |id, body| match body {
            Body::ModelUpload { weight_count: wc, key_id, ciphertexts, local_update_secs, .. } => {
                if wc != weight_count || ciphertexts.len() != expected {
                    Verdict::Abort(Failure {
                        kind: FailureKind::Protocol,
                        message: format!("client {id} uploaded {} ciphertexts for {wc} weights", ciphertexts.len()),
                    })
                } else if key_id != fingerprint {
                    Verdict::Abort(Failure {
                        kind: FailureKind::Protocol,
                        message: format!("client {id} encrypted under key {key_id:016x}"),
                    })
                } else if ciphertexts.iter().any(|c| c.is_zero() || *c >= n2) {
                    Verdict::Abort(Failure {
                        kind: FailureKind::Protocol,
                        message: format!("client {id} sent a ciphertext outside [1, n^2)"),
                    })
                } else {
                    Verdict::Accept(Upload { ciphertexts, local_update_secs })
                }
            }
            other => Verdict::Reject(format!("expected ModelUpload, got {}", other.kind())),
        });
        let upload_phase = started.elapsed().as_secs_f64();
        let uploads = match uploads {
            Ok(u) => u,
            Err(e) => {
                phases.encrypt = upload_phase;
                return Err(e);
            }
        };
        let local = uploads.values().map(|u| u.local_update_secs).fold(0.0, f64::max).clamp(0.0, upload_phase);
        phases.local_update = local;
        phases.encrypt = upload_phase - local;

        // Homomorphic addition is multiplication of ciphertexts mod n^2.
        let agg_start = Instant::now();
        let sum: Vec<BigUint> = (0..expected)
            .into_par_iter()
            .map(|i| uploads.values().fold(BigUint::one(), |acc, u| acc * &u.ciphertexts[i] % &n2))
            .collect();
        s.broadcast(
            round,
            Body::AggregateBroadcast {
                participants: selected.to_vec(),
                weight_count,
                key_id: fingerprint,
                ciphertexts: sum,
            },
        )?;
        phases.aggregate = agg_start.elapsed().as_secs_f64();

        let partials = s.collect(round, &everyone, "PartialDecryption", |id, body| match body {
            Body::PartialDecryption { mut partials } => match (partials.pop(), partials.is_empty()) {
                (Some(own), true) if own.client == id => Verdict::Accept(own),
                _ => Verdict::Reject("must carry exactly the sender's own partials".into()),
            },
            other => Verdict::Reject(format!("expected PartialDecryption, got {}", other.kind())),
        })?;
        s.broadcast(round, Body::PartialDecryption { partials: partials.into_values().collect() })?;

        let outcomes = s.collect(round, &everyone, "RoundComplete", |_, body| match body {
            Body::RoundComplete { checksum, failure, .. } => Verdict::Accept((checksum, failure)),
            other => Verdict::Reject(format!("expected RoundComplete, got {}", other.kind())),
        })?;
        if let Some((id, f)) = outcomes.iter().find_map(|(id, (_, f))| f.as_ref().map(|f| (id, f))) {
            return Err(Stop::Abort(Failure { kind: f.kind, message: format!("client {id}: {}", f.message) }));
        }
        let sums: BTreeSet<&str> = outcomes.values().filter_map(|(c, _)| c.as_deref()).collect();
        match (sums.len(), sums.first()) {
            (1, Some(c)) if outcomes.values().all(|(c, _)| c.is_some()) => Ok(c.to_string()),
            _ => Err(Stop::Abort(Failure {
                kind: FailureKind::ChecksumMismatch,
                message: format!("clients disagree on the average: {sums:?}"),
            })),
        }
    }
}
