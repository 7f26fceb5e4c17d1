//! Protocol messages and their byte-level codec.
//!
//! Wire layout: header `type u8, iteration u32 LE, site u8, level-count u8`,
//! then a type-specific body. Activation and gradient payloads are ".ten"
//! records, one per level, each prefixed by its level index byte. BatchSelect
//! carries `u32 n`, `n x u32` sample ids and the `u64` augmentation seed.
//! The in-process mailbox moves exactly these bytes, so the same state
//! machines could run cross-process unchanged.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use crate::data;
use crate::tensor::TensorData;

use super::ProtocolError;

/// Blocking-receive timeout of the simulated transport.
pub const RECV_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Coordinator -> every site: the sample ids and augmentation seed of one
    /// training iteration. An `aug_seed` of 0 disables augmentation.
    BatchSelect {
        iteration: u32,
        indices: Vec<u32>,
        aug_seed: u64,
    },
    /// Site -> coordinator: guarded activations for the shared levels.
    ActShare {
        iteration: u32,
        site: u8,
        levels: BTreeMap<u8, TensorData>,
    },
    /// Coordinator -> site: the gradient at each shared level.
    GradShare {
        iteration: u32,
        site: u8,
        levels: BTreeMap<u8, TensorData>,
    },
    /// Site -> coordinator: iteration finished, parameters updated.
    Ack { iteration: u32, site: u8 },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::BatchSelect { .. } => "BatchSelect",
            Message::ActShare { .. } => "ActShare",
            Message::GradShare { .. } => "GradShare",
            Message::Ack { .. } => "Ack",
        }
    }

    pub fn iteration(&self) -> u32 {
        match self {
            Message::BatchSelect { iteration, .. }
            | Message::ActShare { iteration, .. }
            | Message::GradShare { iteration, .. }
            | Message::Ack { iteration, .. } => *iteration,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let (kind, site, levels): (u8, u8, Option<&BTreeMap<u8, TensorData>>) = match self {
            Message::BatchSelect { .. } => (0, 0, None),
            Message::ActShare { site, levels, .. } => (1, *site, Some(levels)),
            Message::GradShare { site, levels, .. } => (2, *site, Some(levels)),
            Message::Ack { site, .. } => (3, *site, None),
        };
        out.push(kind);
        out.extend_from_slice(&self.iteration().to_le_bytes());
        out.push(site);
        out.push(levels.map_or(0, |l| l.len() as u8));
        match self {
            Message::BatchSelect {
                indices, aug_seed, ..
            } => {
                out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
                for i in indices {
                    out.extend_from_slice(&i.to_le_bytes());
                }
                out.extend_from_slice(&aug_seed.to_le_bytes());
            }
            Message::ActShare { levels, .. } | Message::GradShare { levels, .. } => {
                for (level, tensor) in levels {
                    out.push(*level);
                    out.extend_from_slice(&data::ten_bytes(tensor));
                }
            }
            Message::Ack { .. } => {}
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
        let bad = |what: &str| ProtocolError::Codec(what.to_string());
        if bytes.len() < 7 {
            return Err(bad("message shorter than its header"));
        }
        let kind = bytes[0];
        let iteration = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
        let site = bytes[5];
        let level_count = bytes[6] as usize;
        let mut body = &bytes[7..];
        match kind {
            0 => {
                if body.len() < 4 {
                    return Err(bad("BatchSelect body truncated"));
                }
                let n = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
                body = &body[4..];
                if body.len() != n * 4 + 8 {
                    return Err(bad("BatchSelect body has the wrong length"));
                }
                let indices = body[..n * 4]
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let aug_seed = u64::from_le_bytes(body[n * 4..].try_into().unwrap());
                Ok(Message::BatchSelect {
                    iteration,
                    indices,
                    aug_seed,
                })
            }
            1 | 2 => {
                let mut levels = BTreeMap::new();
                let mut cursor = std::io::Cursor::new(body);
                for _ in 0..level_count {
                    let pos = cursor.position() as usize;
                    let level = *body.get(pos).ok_or_else(|| bad("missing level byte"))?;
                    cursor.set_position(pos as u64 + 1);
                    let tensor = data::read_ten_prefix(&mut cursor, Path::new("<wire>"))
                        .map_err(|e| ProtocolError::Codec(e.to_string()))?;
                    if levels.insert(level, tensor).is_some() {
                        return Err(bad("duplicate level in payload"));
                    }
                }
                if cursor.position() as usize != body.len() {
                    return Err(bad("trailing bytes after payload"));
                }
                if kind == 1 {
                    Ok(Message::ActShare {
                        iteration,
                        site,
                        levels,
                    })
                } else {
                    Ok(Message::GradShare {
                        iteration,
                        site,
                        levels,
                    })
                }
            }
            3 => {
                if !body.is_empty() {
                    return Err(bad("Ack carries no body"));
                }
                Ok(Message::Ack { iteration, site })
            }
            other => Err(ProtocolError::Codec(format!("unknown message type {other}"))),
        }
    }
}

/// One site's view of the transport: FIFO from/to the coordinator.
pub struct SiteTransport {
    pub from_coord: Receiver<Vec<u8>>,
    pub to_coord: Sender<Vec<u8>>,
}

/// The coordinator's view: one FIFO pair per site.
pub struct CoordTransport {
    pub to_sites: Vec<Sender<Vec<u8>>>,
    pub from_sites: Vec<Receiver<Vec<u8>>>,
}

/// Builds the in-process mailbox fabric for `num_sites` sites.
pub fn wire_up(num_sites: usize) -> (CoordTransport, Vec<SiteTransport>) {
    let mut to_sites = Vec::new();
    let mut from_sites = Vec::new();
    let mut site_ends = Vec::new();
    for _ in 0..num_sites {
        let (ctx, srx) = channel();
        let (stx, crx) = channel();
        to_sites.push(ctx);
        from_sites.push(crx);
        site_ends.push(SiteTransport {
            from_coord: srx,
            to_coord: stx,
        });
    }
    (
        CoordTransport {
            to_sites,
            from_sites,
        },
        site_ends,
    )
}

pub fn recv_message(rx: &Receiver<Vec<u8>>, waiting_for: &str) -> Result<Message, ProtocolError> {
    match rx.recv_timeout(RECV_TIMEOUT) {
        Ok(bytes) => Message::decode(&bytes),
        Err(RecvTimeoutError::Timeout) => {
            Err(ProtocolError::Timeout(RECV_TIMEOUT, waiting_for.to_string()))
        }
        Err(RecvTimeoutError::Disconnected) => Err(ProtocolError::State(format!(
            "peer disconnected while waiting for {waiting_for}"
        ))),
    }
}

pub fn send_bytes(tx: &Sender<Vec<u8>>, bytes: Vec<u8>) -> Result<(), ProtocolError> {
    tx.send(bytes)
        .map_err(|_| ProtocolError::State("peer disconnected on send".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorShape;

    #[test]
    fn batch_select_roundtrip() {
        let m = Message::BatchSelect {
            iteration: 7,
            indices: vec![4, 1, 9],
            aug_seed: 0xDEADBEEF,
        };
        assert_eq!(Message::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn act_share_roundtrip() {
        let mut levels = BTreeMap::new();
        levels.insert(
            0u8,
            TensorData::new(
                TensorShape::new(1, 2, 2, 2).unwrap(),
                (0..8).map(|i| i as f32).collect(),
            )
            .unwrap(),
        );
        levels.insert(4u8, TensorData::scalar(3.5));
        let m = Message::ActShare {
            iteration: 3,
            site: 2,
            levels,
        };
        assert_eq!(Message::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn ack_roundtrip_and_corrupt_header() {
        let m = Message::Ack {
            iteration: 11,
            site: 1,
        };
        let bytes = m.encode();
        assert_eq!(Message::decode(&bytes).unwrap(), m);
        let mut corrupt = bytes.clone();
        corrupt[0] = 9;
        assert!(Message::decode(&corrupt).is_err());
        assert!(Message::decode(&bytes[..3]).is_err());
    }
}
