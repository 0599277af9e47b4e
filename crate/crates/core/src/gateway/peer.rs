//! The signed gateway-to-gateway message set and its wire encoding, plus
//! the outbound peer links that carry it.

use std::collections::VecDeque;
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::Arc;
use std::time::Duration;

use log::debug;

use crate::consensus::ConsensusMessage;
use crate::encoding::{DecodeError, DecodeErrorKind, FieldDecoder, FieldEncoder};
use crate::identity::{self, DeviceIdentity, IdentityError, PublicKey, Signature};
use crate::ledger::{codec, BlockHeader, Transaction};
use crate::wire::{self, op};

/// What a peer message carries.
#[derive(Debug, Clone, PartialEq)]
pub enum PeerPayload {
    /// "A camera with this key hello'd me; I am about to propose."
    HelloAnnounce { camera: PublicKey },
    Consensus(ConsensusMessage),
    /// A freshly appended transaction for replica synchronization.
    TxUpdate {
        device: PublicKey,
        transaction: Transaction,
    },
    /// "Send me transactions for `device` from this sequence on."
    SyncRequest {
        device: PublicKey,
        from_sequence: u64,
    },
    /// Pull-repair answer; carries the certified header so a replica that
    /// missed the bootstrap can admit the block first.
    SyncResponse {
        device: PublicKey,
        header: Option<BlockHeader>,
        transactions: Vec<Transaction>,
    },
}

const TAG_HELLO_ANNOUNCE: u8 = 0;
const TAG_CONSENSUS: u8 = 1;
const TAG_TX_UPDATE: u8 = 2;
const TAG_SYNC_REQUEST: u8 = 3;
const TAG_SYNC_RESPONSE: u8 = 4;

/// Upper bound on transactions in one sync response; a gap wider than this
/// repairs over multiple request/response rounds.
pub const SYNC_BATCH_LIMIT: usize = 2048;

impl PeerPayload {
    /// Canonical body bytes; this is what the envelope signature covers.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = FieldEncoder::new();
        match self {
            Self::HelloAnnounce { camera } => {
                enc.put_u8(TAG_HELLO_ANNOUNCE).put_bytes(camera.as_bytes());
            }
            Self::Consensus(msg) => {
                enc.put_u8(TAG_CONSENSUS);
                msg.encode_into(&mut enc);
            }
            Self::TxUpdate {
                device,
                transaction,
            } => {
                enc.put_u8(TAG_TX_UPDATE).put_bytes(device.as_bytes());
                codec::encode_transaction_into(&mut enc, transaction);
            }
            Self::SyncRequest {
                device,
                from_sequence,
            } => {
                enc.put_u8(TAG_SYNC_REQUEST)
                    .put_bytes(device.as_bytes())
                    .put_u64(*from_sequence);
            }
            Self::SyncResponse {
                device,
                header,
                transactions,
            } => {
                enc.put_u8(TAG_SYNC_RESPONSE).put_bytes(device.as_bytes());
                match header {
                    Some(h) => {
                        enc.put_u8(1);
                        codec::encode_header_into(&mut enc, h);
                    }
                    None => {
                        enc.put_u8(0);
                    }
                }
                enc.put_u32(transactions.len() as u32);
                for tx in transactions {
                    codec::encode_transaction_into(&mut enc, tx);
                }
            }
        }
        enc.finish()
    }

    pub fn decode(body: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = FieldDecoder::new(body);
        let at = dec.position();
        let tag = dec.take_u8()?;
        let payload = match tag {
            TAG_HELLO_ANNOUNCE => Self::HelloAnnounce {
                camera: PublicKey::from_bytes(dec.take_array::<32>()?),
            },
            TAG_CONSENSUS => Self::Consensus(ConsensusMessage::decode(&mut dec)?),
            TAG_TX_UPDATE => {
                let device = PublicKey::from_bytes(dec.take_array::<32>()?);
                let transaction = codec::decode_transaction(&mut dec)?;
                Self::TxUpdate {
                    device,
                    transaction,
                }
            }
            TAG_SYNC_REQUEST => Self::SyncRequest {
                device: PublicKey::from_bytes(dec.take_array::<32>()?),
                from_sequence: dec.take_u64()?,
            },
            TAG_SYNC_RESPONSE => {
                let device = PublicKey::from_bytes(dec.take_array::<32>()?);
                let header = match dec.take_u8()? {
                    0 => None,
                    1 => Some(codec::decode_header(&mut dec)?),
                    _ => {
                        return Err(DecodeError {
                            offset: at,
                            kind: DecodeErrorKind::BadValue("bad header flag".into()),
                        })
                    }
                };
                let n = dec.take_u32()? as usize;
                if n > SYNC_BATCH_LIMIT {
                    return Err(DecodeError {
                        offset: at,
                        kind: DecodeErrorKind::BadValue(format!(
                            "sync response of {n} transactions exceeds limit"
                        )),
                    });
                }
                let mut transactions = Vec::with_capacity(n);
                for _ in 0..n {
                    transactions.push(codec::decode_transaction(&mut dec)?);
                }
                Self::SyncResponse {
                    device,
                    header,
                    transactions,
                }
            }
            other => {
                return Err(DecodeError {
                    offset: at,
                    kind: DecodeErrorKind::BadValue(format!("unknown peer payload tag {other}")),
                })
            }
        };
        dec.expect_end()?;
        Ok(payload)
    }

    pub fn is_tx_update(&self) -> bool {
        matches!(self, Self::TxUpdate { .. })
    }
}

/// Envelope: payload body plus the sender's signature over it.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerMessage {
    pub sender: PublicKey,
    pub payload: PeerPayload,
    pub signature: Signature,
}

impl PeerMessage {
    pub fn sign(sender: &DeviceIdentity, payload: PeerPayload) -> Result<Self, IdentityError> {
        let body = payload.encode();
        let signature = sender.sign(&body)?;
        Ok(Self {
            sender: sender.public_key(),
            payload,
            signature,
        })
    }

    pub fn verify(&self) -> bool {
        identity::verify(&self.sender, &self.payload.encode(), &self.signature)
    }

    /// Frame body for a `GW_PEER` frame.
    pub fn encode(&self) -> Vec<u8> {
        let mut enc = FieldEncoder::new();
        enc.put_bytes(self.sender.as_bytes())
            .put_bytes(&self.payload.encode())
            .put_bytes(self.signature.as_bytes());
        enc.finish()
    }

    pub fn decode(frame_body: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = FieldDecoder::new(frame_body);
        let sender = PublicKey::from_bytes(dec.take_array::<32>()?);
        let body = dec.take_bytes()?.to_vec();
        let signature = Signature::from_bytes(dec.take_array::<64>()?);
        dec.expect_end()?;
        let payload = PeerPayload::decode(&body)?;
        Ok(Self {
            sender,
            payload,
            signature,
        })
    }
}

/// Outbound connection to one peer: a bounded queue drained by a sender
/// thread that redials on demand. Delivery is best effort; messages to an
/// unreachable peer are dropped and counted, and pull-based sync repairs
/// the difference later.
pub struct PeerLink {
    pub peer: PublicKey,
    queue: SyncSender<Vec<u8>>,
    dropped: Arc<AtomicU64>,
}

impl PeerLink {
    pub fn spawn(peer: PublicKey, addr: String, shutdown: Arc<AtomicBool>) -> Self {
        let (tx, rx) = sync_channel::<Vec<u8>>(8192);
        let dropped = Arc::new(AtomicU64::new(0));
        let thread_dropped = dropped.clone();
        let _ = std::thread::Builder::new()
            .name(format!("peer-link-{}", &peer.to_hex()[..8]))
            .spawn(move || sender_loop(rx, addr, shutdown, thread_dropped));
        Self {
            peer,
            queue: tx,
            dropped,
        }
    }

    /// Queues one pre-encoded `GW_PEER` frame body. Returns false if the
    /// queue is full or the link is torn down (message dropped).
    pub fn enqueue(&self, frame_body: Vec<u8>) -> bool {
        match self.queue.try_send(frame_body) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }
}

fn sender_loop(
    rx: Receiver<Vec<u8>>,
    addr: String,
    shutdown: Arc<AtomicBool>,
    dropped: Arc<AtomicU64>,
) {
    let mut conn: Option<TcpStream> = None;
    // Frames that failed mid-write get one retry on a fresh connection.
    let mut pending: VecDeque<Vec<u8>> = VecDeque::new();
    loop {
        let frame = match pending.pop_front() {
            Some(f) => f,
            None => match rx.recv_timeout(Duration::from_millis(200)) {
                Ok(f) => f,
                Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {
                    if shutdown.load(Ordering::SeqCst) {
                        return;
                    }
                    continue;
                }
                Err(std::sync::mpsc::RecvTimeoutError::Disconnected) => return,
            },
        };
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        let mut delivered = false;
        for attempt in 0..2 {
            if conn.is_none() {
                match TcpStream::connect(&addr) {
                    Ok(s) => {
                        s.set_nodelay(true).ok();
                        conn = Some(s);
                    }
                    Err(e) => {
                        debug!("peer link {addr}: dial failed: {e}");
                        break;
                    }
                }
            }
            let stream = conn.as_mut().expect("connected above");
            match wire::write_frame(stream, op::GW_PEER, &frame) {
                Ok(()) => {
                    delivered = true;
                    break;
                }
                Err(e) => {
                    debug!("peer link {addr}: write failed (attempt {attempt}): {e}");
                    conn = None;
                }
            }
        }
        if !delivered {
            dropped.fetch_add(1, Ordering::Relaxed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cas::ContentAddress;
    use crate::ledger::TransactionPayload;

    fn sample_tx(gateway: &DeviceIdentity) -> Transaction {
        Transaction::build(
            [7u8; 32],
            3,
            TransactionPayload {
                storage_address: ContentAddress::from_content(b"chunk"),
                metadata_hash: [9u8; 32],
                timestamp: 1234,
            },
            gateway,
        )
        .unwrap()
    }

    #[test]
    fn peer_message_roundtrip_and_signature() {
        let gw = DeviceIdentity::generate();
        let camera = DeviceIdentity::generate().public_key();
        let payloads = vec![
            PeerPayload::HelloAnnounce { camera },
            PeerPayload::TxUpdate {
                device: camera,
                transaction: sample_tx(&gw),
            },
            PeerPayload::SyncRequest {
                device: camera,
                from_sequence: 42,
            },
            PeerPayload::SyncResponse {
                device: camera,
                header: None,
                transactions: vec![sample_tx(&gw)],
            },
        ];
        for payload in payloads {
            let msg = PeerMessage::sign(&gw, payload).unwrap();
            assert!(msg.verify());
            let decoded = PeerMessage::decode(&msg.encode()).unwrap();
            assert_eq!(decoded, msg);
            assert!(decoded.verify());
        }
    }

    #[test]
    fn tampered_body_fails_envelope_verification() {
        let gw = DeviceIdentity::generate();
        let msg = PeerMessage::sign(
            &gw,
            PeerPayload::SyncRequest {
                device: DeviceIdentity::generate().public_key(),
                from_sequence: 1,
            },
        )
        .unwrap();
        let mut bytes = msg.encode();
        // Flip a byte inside the payload field.
        let n = bytes.len();
        bytes[n - 70] ^= 0x01;
        match PeerMessage::decode(&bytes) {
            Ok(tampered) => assert!(!tampered.verify()),
            Err(_) => {} // structural damage is fine too
        }
    }

    #[test]
    fn oversized_sync_response_rejected() {
        let gw = DeviceIdentity::generate();
        let device = DeviceIdentity::generate().public_key();
        let mut enc = FieldEncoder::new();
        enc.put_u8(TAG_SYNC_RESPONSE)
            .put_bytes(device.as_bytes())
            .put_u8(0)
            .put_u32(1_000_000);
        let body = enc.finish();
        let sig = gw.sign(&body).unwrap();
        let mut outer = FieldEncoder::new();
        outer
            .put_bytes(gw.public_key().as_bytes())
            .put_bytes(&body)
            .put_bytes(sig.as_bytes());
        assert!(PeerMessage::decode(&outer.finish()).is_err());
    }
}
