//! Per-round record of who took part and where the time went.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::messages::{Failure, FailureKind};

/// Wall-clock seconds per phase. The phases partition the round: their sum
/// is the round's total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub local_update: f64,
    pub encrypt: f64,
    pub aggregate: f64,
    pub decrypt: f64,
}

impl PhaseTimes {
    pub const NAMES: [&'static str; 4] = ["local_update", "encrypt", "aggregate", "decrypt"];

    pub fn total(&self) -> f64 {
        self.local_update + self.encrypt + self.aggregate + self.decrypt
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "local_update" => Some(self.local_update),
            "encrypt" => Some(self.encrypt),
            "aggregate" => Some(self.aggregate),
            "decrypt" => Some(self.decrypt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub participants: Vec<u32>,
    /// Ciphertexts in each upload, and in the aggregate.
    pub ciphertexts: usize,
    pub phases: PhaseTimes,
    pub total_secs: f64,
    /// Agreed checksum of the decrypted average; `None` if the round failed.
    pub checksum: Option<String>,
    pub failure: Option<Failure>,
    pub rejected_messages: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationTranscript {
    pub rounds: Vec<RoundRecord>,
}

#[derive(Serialize)]
struct PhaseLine<'a> {
    round: u64,
    phase: &'a str,
    secs: f64,
    participants: &'a [u32],
    ciphertexts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    checksum: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<&'a Failure>,
}

impl AggregationTranscript {
    pub fn rejected_messages(&self) -> u64 {
        self.rounds.iter().map(|r| r.rejected_messages).sum()
    }

    /// One JSON object per phase per round.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rounds {
            for name in PhaseTimes::NAMES {
                let line = PhaseLine {
                    round: r.round,
                    phase: name,
                    secs: r.phases.get(name).unwrap_or_default(),
                    participants: &r.participants,
                    ciphertexts: r.ciphertexts,
                    checksum: r.checksum.as_deref(),
                    failure: r.failure.as_ref(),
                };
                out.push_str(&serde_json::to_string(&line).expect("serializable"));
                out.push('\n');
            }
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5} {:>12} {:>8} {:>12} {:>10} {:>10} {:>10} {:>10}  {}\n",
            "round", "participants", "cts", "local_update", "encrypt", "aggregate", "decrypt", "total", "checksum"
        );
        for r in &self.rounds {
            let who = r.participants.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
            let outcome = match (&r.checksum, &r.failure) {
                (Some(c), _) => c.clone(),
                (None, Some(f)) => format!("ABORT {:?}: {}", f.kind, f.message),
                _ => "-".into(),
            };
            out.push_str(&format!(
                "{:>5} {:>12} {:>8} {:>12.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3}  {}\n",
                r.round, who, r.ciphertexts, r.phases.local_update, r.phases.encrypt, r.phases.aggregate,
                r.phases.decrypt, r.total_secs, outcome
            ));
        }
        out
    }
}

/// A round that could not complete. The transcript includes the failed
/// round's record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundAbort {
    pub round: u64,
    pub kind: FailureKind,
    pub message: String,
    pub transcript: AggregationTranscript,
}

/// First 8 bytes of SHA-256 over the little-endian bytes of `weights`, in hex.
pub fn checksum(weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}
