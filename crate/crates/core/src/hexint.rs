//! Lowercase-hex JSON encoding for big integers, plus key fingerprints.

use num_bigint::BigUint;
use num_traits::Num;
use serde::{de::Error as _, Deserialize, Deserializer, Serializer};
use sha2::{Digest, Sha256};

pub fn to_hex(x: &BigUint) -> String {
    x.to_str_radix(16)
}

pub fn from_hex(s: &str) -> Result<BigUint, String> {
    let trimmed = s.trim_start_matches("0x");
    if trimmed.is_empty() || !trimmed.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(format!("invalid hex integer {s:?}"));
    }
    BigUint::from_str_radix(trimmed, 16).map_err(|e| e.to_string())
}

pub fn serialize<S: Serializer>(x: &BigUint, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&to_hex(x))
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
    let s = String::deserialize(d)?;
    from_hex(&s).map_err(D::Error::custom)
}

/// `serde(with = ...)` adapter for `Vec<BigUint>`.
pub mod vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(xs: &[BigUint], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for x in xs {
            seq.serialize_element(&to_hex(x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigUint>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter().map(|s| from_hex(s).map_err(D::Error::custom)).collect()
    }
}

/// First 8 bytes of SHA-256 over the big-endian bytes of `n`.
pub fn fingerprint(n: &BigUint) -> u64 {
    let digest = Sha256::digest(n.to_bytes_be());
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
