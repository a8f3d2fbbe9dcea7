//! On-disk bundles of encrypted slot vectors: an encrypted input image or
//! an encrypted logits vector, for either backend.
//!
//! Layout: magic `HEVB`, u32 header length, JSON header, then each
//! ciphertext as a u64 length followed by its bytes.

use serde::{Deserialize, Serialize};

use crate::ckks::{CkksBackend, CkksCiphertext, Context};
use crate::enc_tensor::EncImage;
use crate::he::sim::{SimBackend, SimCiphertext};
use crate::he::{HeBackend, HeError, HeVector, SlotLayout};

const MAGIC: &[u8; 4] = b"HEVB";

/// Byte encoding of one backend's ciphertexts.
pub trait CiphertextCodec {
    type Ciphertext;
    const BACKEND: &'static str;
    fn ct_to_bytes(&self, ct: &Self::Ciphertext) -> Vec<u8>;
    fn ct_from_bytes(&self, bytes: &[u8]) -> Result<Self::Ciphertext, HeError>;
}

impl CiphertextCodec for SimBackend {
    type Ciphertext = SimCiphertext;
    const BACKEND: &'static str = "sim";

    fn ct_to_bytes(&self, ct: &SimCiphertext) -> Vec<u8> {
        ct.to_le_bytes()
    }

    fn ct_from_bytes(&self, bytes: &[u8]) -> Result<SimCiphertext, HeError> {
        SimCiphertext::from_le_bytes(bytes, self.slot_count())
    }
}

impl CiphertextCodec for Context {
    type Ciphertext = CkksCiphertext;
    const BACKEND: &'static str = "ckks";

    fn ct_to_bytes(&self, ct: &CkksCiphertext) -> Vec<u8> {
        ct.to_bytes(self)
    }

    fn ct_from_bytes(&self, bytes: &[u8]) -> Result<CkksCiphertext, HeError> {
        CkksCiphertext::from_bytes(bytes, self)
    }
}

impl CiphertextCodec for CkksBackend {
    type Ciphertext = CkksCiphertext;
    const BACKEND: &'static str = "ckks";

    fn ct_to_bytes(&self, ct: &CkksCiphertext) -> Vec<u8> {
        ct.to_bytes(self.context())
    }

    fn ct_from_bytes(&self, bytes: &[u8]) -> Result<CkksCiphertext, HeError> {
        CkksCiphertext::from_bytes(bytes, self.context())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contents {
    Image { height: usize, width: usize, channels: usize, channel_stride: usize },
    Logits { classes: usize },
}

#[derive(Serialize, Deserialize)]
struct VectorMeta {
    level: usize,
    layout: SlotLayout,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backend: String,
    contents: Contents,
    vectors: Vec<VectorMeta>,
}

fn fmt_err(msg: impl Into<String>) -> HeError {
    HeError::Format(msg.into())
}

fn write_bundle<K: CiphertextCodec>(codec: &K, contents: Contents, vectors: &[&HeVector<K::Ciphertext>]) -> Vec<u8> {
    let header = Header {
        backend: K::BACKEND.into(),
        contents,
        vectors: vectors.iter().map(|v| VectorMeta { level: v.level(), layout: v.layout().clone() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in vectors {
        let ct = codec.ct_to_bytes(v.ciphertext());
        out.extend_from_slice(&(ct.len() as u64).to_le_bytes());
        out.extend_from_slice(&ct);
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], HeError> {
    if bytes.len() < n {
        return Err(fmt_err("bundle is truncated"));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Contents and backend name without decoding any ciphertext.
pub fn peek(bytes: &[u8]) -> Result<(String, Contents), HeError> {
    let (header, _) = read_header(bytes)?;
    Ok((header.backend, header.contents))
}

fn read_header(mut bytes: &[u8]) -> Result<(Header, &[u8]), HeError> {
    if take(&mut bytes, 4)? != MAGIC {
        return Err(fmt_err("not an encrypted bundle"));
    }
    let len = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len)?).map_err(|e| fmt_err(e.to_string()))?;
    Ok((header, bytes))
}

fn read_bundle<K: CiphertextCodec>(
    codec: &K,
    bytes: &[u8],
) -> Result<(Contents, Vec<HeVector<K::Ciphertext>>), HeError> {
    let (header, mut rest) = read_header(bytes)?;
    if header.backend != K::BACKEND {
        return Err(fmt_err(format!("bundle was made by the {} backend, not {}", header.backend, K::BACKEND)));
    }
    let mut vectors = Vec::with_capacity(header.vectors.len());
    for meta in header.vectors {
        let len = u64::from_le_bytes(take(&mut rest, 8)?.try_into().expect("8 bytes")) as usize;
        let ct = codec.ct_from_bytes(take(&mut rest, len)?)?;
        vectors.push(HeVector::assemble(ct, meta.level, meta.layout));
    }
    if !rest.is_empty() {
        return Err(fmt_err(format!("{} trailing bytes", rest.len())));
    }
    Ok((header.contents, vectors))
}

pub fn image_to_bytes<K: CiphertextCodec>(codec: &K, img: &EncImage<K::Ciphertext>) -> Vec<u8> {
    let contents = Contents::Image {
        height: img.height,
        width: img.width,
        channels: img.channels,
        channel_stride: img.channel_stride,
    };
    write_bundle(codec, contents, &img.rows.iter().collect::<Vec<_>>())
}

pub fn image_from_bytes<K: CiphertextCodec>(codec: &K, bytes: &[u8]) -> Result<EncImage<K::Ciphertext>, HeError> {
    match read_bundle(codec, bytes)? {
        (Contents::Image { height, width, channels, channel_stride }, rows) => {
            if rows.len() != height {
                return Err(fmt_err(format!("{} rows for height {height}", rows.len())));
            }
            Ok(EncImage { rows, height, width, channels, channel_stride })
        }
        (other, _) => Err(fmt_err(format!("expected an encrypted image, found {other:?}"))),
    }
}

pub fn logits_to_bytes<K: CiphertextCodec>(codec: &K, logits: &HeVector<K::Ciphertext>, classes: usize) -> Vec<u8> {
    write_bundle(codec, Contents::Logits { classes }, &[logits])
}

pub fn logits_from_bytes<K: CiphertextCodec>(
    codec: &K,
    bytes: &[u8],
) -> Result<(HeVector<K::Ciphertext>, usize), HeError> {
    match read_bundle(codec, bytes)? {
        (Contents::Logits { classes }, mut v) if v.len() == 1 => Ok((v.remove(0), classes)),
        (other, _) => Err(fmt_err(format!("expected encrypted logits, found {other:?}"))),
    }
}
