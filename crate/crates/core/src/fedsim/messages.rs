//! Wire messages. Every frame body is one JSON-encoded [`RoundMessage`].

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::hexint;
use crate::packing::PackingConfig;
use crate::threshold::PartialDecryption;

pub const PROTOCOL_VERSION: u32 = 1;

/// Sender id of the aggregation server; clients are numbered from 1 and
/// their id equals their key-share index.
pub const SERVER_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub version: u32,
    /// 0 during setup, then 1-based round numbers.
    pub round: u64,
    pub sender: u32,
    #[serde(flatten)]
    pub body: Body,
}

impl RoundMessage {
    pub fn new(round: u64, sender: u32, body: Body) -> Self {
        Self { version: PROTOCOL_VERSION, round, sender, body }
    }

    pub fn kind(&self) -> &'static str {
        self.body.kind()
    }
}

/// Why a round could not complete, as reported over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    IncompleteShareSet,
    CombineFailed,
    OverflowDetected,
    ChecksumMismatch,
    Protocol,
    Update,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

/// One client's partial decryptions, one per aggregate ciphertext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartials {
    pub client: u32,
    pub partials: Vec<PartialDecryption>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body")]
pub enum Body {
    /// Client to server: identify and name the key the client holds.
    Hello { client_id: u32, ceremony_id: String, key_fingerprint: u64 },
    /// Server to client: the threshold public key, as its JSON document,
    /// and the packing every client must use.
    PublicKeyBroadcast { public_key: String, packing: PackingConfig, weight_count: usize },
    /// Dealer to client: the client's key share and the public key.
    ShareDelivery { share: String, public_key: String },
    /// Server to all clients: a round begins with these participants.
    RoundStart { selected: Vec<u32> },
    /// Selected client to server: encrypted packed weights.
    ModelUpload {
        weight_count: usize,
        key_id: u64,
        #[serde(with = "hexint::vec")]
        ciphertexts: Vec<BigUint>,
        local_update_secs: f64,
        encrypt_secs: f64,
    },
    /// Server to all clients: the homomorphic sum and how many uploads it holds.
    AggregateBroadcast {
        participants: Vec<u32>,
        weight_count: usize,
        key_id: u64,
        #[serde(with = "hexint::vec")]
        ciphertexts: Vec<BigUint>,
    },
    /// Client to server with the sender's partials; server to all clients
    /// with everyone's.
    PartialDecryption { partials: Vec<ClientPartials> },
    /// Client to server: outcome of decryption. Server to all clients:
    /// round closed; `last` ends the session.
    RoundComplete { checksum: Option<String>, failure: Option<Failure>, last: bool },
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello { .. } => "Hello",
            Body::PublicKeyBroadcast { .. } => "PublicKeyBroadcast",
            Body::ShareDelivery { .. } => "ShareDelivery",
            Body::RoundStart { .. } => "RoundStart",
            Body::ModelUpload { .. } => "ModelUpload",
            Body::AggregateBroadcast { .. } => "AggregateBroadcast",
            Body::PartialDecryption { .. } => "PartialDecryption",
            Body::RoundComplete { .. } => "RoundComplete",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let m = RoundMessage::new(2, 1, Body::RoundStart { selected: vec![1, 3] });
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["kind"], "RoundStart");
        assert_eq!(v["round"], 2);
        assert_eq!(v["body"]["selected"][1], 3);
        assert_eq!(serde_json::from_value::<RoundMessage>(v).unwrap(), m);

        let up = RoundMessage::new(
            1,
            2,
            Body::ModelUpload {
                weight_count: 3,
                key_id: 7,
                ciphertexts: vec![BigUint::from(255u32)],
                local_update_secs: 0.5,
                encrypt_secs: 0.25,
            },
        );
        let text = serde_json::to_string(&up).unwrap();
        assert!(text.contains("\"ff\""));
        assert_eq!(serde_json::from_str::<RoundMessage>(&text).unwrap(), up);

        let pd = RoundMessage::new(
            1,
            0,
            Body::PartialDecryption {
                partials: vec![ClientPartials {
                    client: 2,
                    partials: vec![PartialDecryption { index: 2, c_i: BigUint::from(5u32), key_id: 1 }],
                }],
            },
        );
        let text = serde_json::to_string(&pd).unwrap();
        assert_eq!(serde_json::from_str::<RoundMessage>(&text).unwrap(), pd);
    }
}
