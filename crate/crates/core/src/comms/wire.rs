//! Gradient message wire format.
//!
//! ```text
//! sender_rank u32 | epoch u32 | encoding u8 | payload_kind u8 | length u64 | payload
//! ```
//!
//! All integers are little-endian. `length` counts payload bytes. A
//! reference payload is the 36-character canonical UUID of an object-store
//! blob holding the encoded gradient.

use serde::{Deserialize, Serialize};

use super::qsgd::{pack, qsgd_decode, qsgd_encode, unpack};
use crate::error::{Error, Result};
use crate::ml::GradientVector;

pub const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 8;

/// Epoch value marking a peer's final message after it stopped training.
pub const TOMBSTONE_EPOCH: u32 = u32::MAX;

/// Gradient encoding chosen by the sender.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    RawF64,
    Qsgd { levels: u32 },
}

impl Encoding {
    fn tag(self) -> WireEncoding {
        match self {
            Encoding::RawF64 => WireEncoding::RawF64,
            Encoding::Qsgd { .. } => WireEncoding::Qsgd,
        }
    }
}

impl std::fmt::Display for Encoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Encoding::RawF64 => f.write_str("raw"),
            Encoding::Qsgd { levels } => write!(f, "qsgd:{levels}"),
        }
    }
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "raw" || s == "raw-f64" {
            return Ok(Encoding::RawF64);
        }
        let levels = s
            .strip_prefix("qsgd:")
            .or_else(|| s.strip_prefix("qsgd(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| Error::Config(format!("unknown encoding {s:?}")))?;
        let levels: u32 = levels
            .parse()
            .map_err(|_| Error::Config(format!("invalid QSGD level count in {s:?}")))?;
        if levels == 0 {
            return Err(Error::Config("QSGD level count must be >= 1".into()));
        }
        Ok(Encoding::Qsgd { levels })
    }
}

/// Encoding byte as carried in the header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum WireEncoding {
    RawF64 = 0,
    Qsgd = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Inline(Vec<u8>),
    Reference(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradientMessage {
    pub sender_rank: u32,
    pub epoch: u32,
    pub encoding: WireEncoding,
    pub payload: Payload,
}

impl GradientMessage {
    pub fn is_tombstone(&self) -> bool {
        self.epoch == TOMBSTONE_EPOCH
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (kind, body): (u8, &[u8]) = match &self.payload {
            Payload::Inline(b) => (0, b),
            Payload::Reference(key) => (1, key.as_bytes()),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(&self.sender_rank.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.push(self.encoding as u8);
        out.push(kind);
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Codec(format!("message of {} bytes has no header", bytes.len())));
        }
        let sender_rank = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let epoch = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let encoding = match bytes[8] {
            0 => WireEncoding::RawF64,
            1 => WireEncoding::Qsgd,
            other => return Err(Error::Codec(format!("unknown encoding byte {other}"))),
        };
        let length = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
        let body = &bytes[HEADER_LEN..];
        if body.len() as u64 != length {
            return Err(Error::Codec(format!(
                "header announces {length} payload bytes, found {}",
                body.len()
            )));
        }
        let payload = match bytes[9] {
            0 => Payload::Inline(body.to_vec()),
            1 => {
                let key = std::str::from_utf8(body)
                    .map_err(|_| Error::Codec("reference is not UTF-8".into()))?;
                if key.len() != 36 || uuid::Uuid::parse_str(key).is_err() {
                    return Err(Error::Codec(format!("malformed reference {key:?}")));
                }
                Payload::Reference(key.to_string())
            }
            other => return Err(Error::Codec(format!("unknown payload kind {other}"))),
        };
        Ok(Self {
            sender_rank,
            epoch,
            encoding,
            payload,
        })
    }
}

/// Encodes a gradient's values as a message payload.
pub fn encode_payload(grad: &GradientVector, encoding: Encoding, seed: u64) -> Result<(WireEncoding, Vec<u8>)> {
    let bytes = match encoding {
        Encoding::RawF64 => {
            let mut out = Vec::with_capacity(grad.len() * 8);
            for v in &grad.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        Encoding::Qsgd { levels } => pack(&qsgd_encode(grad, levels, seed)?),
    };
    Ok((encoding.tag(), bytes))
}

pub fn decode_payload(encoding: WireEncoding, bytes: &[u8]) -> Result<Vec<f64>> {
    match encoding {
        WireEncoding::RawF64 => {
            if !bytes.len().is_multiple_of(8) {
                return Err(Error::Codec(format!(
                    "raw payload of {} bytes is not a whole number of f64",
                    bytes.len()
                )));
            }
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        }
        WireEncoding::Qsgd => {
            let q = unpack(bytes).map_err(|e| Error::Codec(e.to_string()))?;
            Ok(qsgd_decode(&q).map_err(|e| Error::Codec(e.to_string()))?.values)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_message_size_is_exact() {
        let g = GradientVector::new((0..60).map(|i| i as f64 * 0.5).collect(), 0);
        let (enc, payload) = encode_payload(&g, Encoding::RawF64, 0).unwrap();
        let msg = GradientMessage {
            sender_rank: 3,
            epoch: 7,
            encoding: enc,
            payload: Payload::Inline(payload),
        };
        let bytes = msg.to_bytes();
        assert_eq!(bytes.len(), 8 * 60 + HEADER_LEN);
        let back = GradientMessage::from_bytes(&bytes).unwrap();
        assert_eq!(back, msg);
        let Payload::Inline(body) = back.payload else { panic!() };
        assert_eq!(decode_payload(back.encoding, &body).unwrap(), g.values);
    }

    #[test]
    fn reference_round_trip() {
        let key = uuid::Uuid::new_v4().to_string();
        let msg = GradientMessage {
            sender_rank: 1,
            epoch: TOMBSTONE_EPOCH,
            encoding: WireEncoding::Qsgd,
            payload: Payload::Reference(key),
        };
        let back = GradientMessage::from_bytes(&msg.to_bytes()).unwrap();
        assert_eq!(back, msg);
        assert!(back.is_tombstone());
    }

    #[test]
    fn corrupt_messages() {
        assert!(matches!(GradientMessage::from_bytes(&[0; 5]), Err(Error::Codec(_))));
        let msg = GradientMessage {
            sender_rank: 0,
            epoch: 0,
            encoding: WireEncoding::RawF64,
            payload: Payload::Inline(vec![0; 16]),
        };
        let bytes = msg.to_bytes();
        assert!(matches!(GradientMessage::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Codec(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(GradientMessage::from_bytes(&bad), Err(Error::Codec(_))));
        assert!(matches!(decode_payload(WireEncoding::RawF64, &[0; 7]), Err(Error::Codec(_))));
    }

    #[test]
    fn parse_encodings() {
        assert_eq!("raw".parse::<Encoding>().unwrap(), Encoding::RawF64);
        assert_eq!("qsgd:16".parse::<Encoding>().unwrap(), Encoding::Qsgd { levels: 16 });
        assert_eq!("qsgd(4)".parse::<Encoding>().unwrap(), Encoding::Qsgd { levels: 4 });
        assert!("qsgd:0".parse::<Encoding>().is_err());
        assert!("zip".parse::<Encoding>().is_err());
    }
}
