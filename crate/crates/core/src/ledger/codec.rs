//! Ledger persistence and export.
//!
//! The on-disk form is an append-only stream of framed records:
//!
//! ```text
//! record = u32 BE length | u8 record_type | body
//! ```
//!
//! Record types: `0x01` cluster config (always first, exactly once),
//! `0x02` block header (certificate included), `0x03` transaction,
//! `0x04` certificate append (journal only: a commit vote that arrived
//! after the header record was written).
//!
//! Two producers share the format. The live journal written by a running
//! gateway appends records in arrival order. The canonical serialization
//! (`canonical_ledger_bytes`) writes the cluster record, then each block in
//! chain order followed by its transactions in sequence order; it is the
//! byte-exact comparison and audit interchange form.
//!
//! Loading is deliberately permissive: anything structurally decodable is
//! loaded, and content problems (broken links, bad signatures, thin
//! certificates) are left for `validate_ledger` to report as violations.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::cas::ContentAddress;
use crate::consensus::ConsensusConfig;
use crate::encoding::{to_hex, DecodeError, FieldDecoder, FieldEncoder};
use crate::identity::{PublicKey, Signature};

use super::{Block, BlockHeader, CertificateEntry, Ledger, Transaction, TransactionPayload};

pub const RECORD_CLUSTER: u8 = 0x01;
pub const RECORD_HEADER: u8 = 0x02;
pub const RECORD_TRANSACTION: u8 = 0x03;
pub const RECORD_CERT_APPEND: u8 = 0x04;

const MAX_RECORD_LEN: u32 = 16 * 1024 * 1024;

// ---------------------------------------------------------------------------
// field-level encoders shared with the peer protocol
// ---------------------------------------------------------------------------

pub(crate) fn encode_header_into(enc: &mut FieldEncoder, header: &BlockHeader) {
    enc.put_bytes(header.device_public_key.as_bytes())
        .put_bytes(&header.previous_header_hash)
        .put_u64(header.created_at)
        .put_bytes(header.managing_gateway.as_bytes())
        .put_u32(header.consensus_certificate.len() as u32);
    for entry in &header.consensus_certificate {
        enc.put_bytes(entry.gateway.as_bytes())
            .put_bytes(entry.signature.as_bytes());
    }
}

pub(crate) fn decode_header(dec: &mut FieldDecoder<'_>) -> Result<BlockHeader, DecodeError> {
    let device_public_key = PublicKey::from_bytes(dec.take_array::<32>()?);
    let previous_header_hash = dec.take_array::<32>()?;
    let created_at = dec.take_u64()?;
    let managing_gateway = PublicKey::from_bytes(dec.take_array::<32>()?);
    let cert_len = dec.take_u32()?;
    let mut consensus_certificate = Vec::with_capacity(cert_len.min(64) as usize);
    for _ in 0..cert_len {
        let gateway = PublicKey::from_bytes(dec.take_array::<32>()?);
        let signature = Signature::from_bytes(dec.take_array::<64>()?);
        consensus_certificate.push(CertificateEntry { gateway, signature });
    }
    Ok(BlockHeader {
        device_public_key,
        previous_header_hash,
        created_at,
        managing_gateway,
        consensus_certificate,
    })
}

pub(crate) fn encode_transaction_into(enc: &mut FieldEncoder, tx: &Transaction) {
    enc.put_bytes(&tx.previous_transaction_hash)
        .put_u64(tx.sequence_number)
        .put_bytes(tx.payload.storage_address.digest())
        .put_bytes(&tx.payload.metadata_hash)
        .put_u64(tx.payload.timestamp)
        .put_bytes(tx.gateway_signature.as_bytes())
        .put_bytes(&tx.transaction_hash);
}

pub(crate) fn decode_transaction(dec: &mut FieldDecoder<'_>) -> Result<Transaction, DecodeError> {
    let previous_transaction_hash = dec.take_array::<32>()?;
    let sequence_number = dec.take_u64()?;
    let storage_address = ContentAddress::from_digest(dec.take_array::<32>()?);
    let metadata_hash = dec.take_array::<32>()?;
    let timestamp = dec.take_u64()?;
    let gateway_signature = Signature::from_bytes(dec.take_array::<64>()?);
    let transaction_hash = dec.take_array::<32>()?;
    Ok(Transaction {
        previous_transaction_hash,
        sequence_number,
        payload: TransactionPayload {
            storage_address,
            metadata_hash,
            timestamp,
        },
        gateway_signature,
        transaction_hash,
    })
}

// ---------------------------------------------------------------------------
// record bodies
// ---------------------------------------------------------------------------

fn cluster_record_body(config: &ConsensusConfig) -> Vec<u8> {
    let mut enc = FieldEncoder::new();
    enc.put_u32(config.max_faulty() as u32)
        .put_u32(config.peers().len() as u32);
    for peer in config.peers() {
        enc.put_bytes(peer.as_bytes());
    }
    enc.finish()
}

fn header_record_body(header: &BlockHeader) -> Vec<u8> {
    let mut enc = FieldEncoder::new();
    encode_header_into(&mut enc, header);
    enc.finish()
}

fn transaction_record_body(device: &PublicKey, tx: &Transaction) -> Vec<u8> {
    let mut enc = FieldEncoder::new();
    enc.put_bytes(device.as_bytes());
    encode_transaction_into(&mut enc, tx);
    enc.finish()
}

fn cert_append_record_body(device: &PublicKey, entry: &CertificateEntry) -> Vec<u8> {
    let mut enc = FieldEncoder::new();
    enc.put_bytes(device.as_bytes())
        .put_bytes(entry.gateway.as_bytes())
        .put_bytes(entry.signature.as_bytes());
    enc.finish()
}

fn frame_record(out: &mut Vec<u8>, record_type: u8, body: &[u8]) {
    let len = u32::try_from(body.len() + 1).expect("record too large");
    out.extend_from_slice(&len.to_be_bytes());
    out.push(record_type);
    out.extend_from_slice(body);
}

// ---------------------------------------------------------------------------
// canonical serialization
// ---------------------------------------------------------------------------

/// Chain-order serialization of the full ledger. Two replicas holding the
/// same content produce byte-identical output.
pub fn canonical_ledger_bytes(ledger: &Ledger) -> Vec<u8> {
    let mut out = Vec::new();
    frame_record(&mut out, RECORD_CLUSTER, &cluster_record_body(ledger.cluster()));
    for block in ledger.blocks() {
        frame_record(&mut out, RECORD_HEADER, &header_record_body(block.header()));
        for tx in block.transactions() {
            frame_record(
                &mut out,
                RECORD_TRANSACTION,
                &transaction_record_body(&block.device_public_key(), tx),
            );
        }
    }
    out
}

pub fn write_ledger_file(ledger: &Ledger, path: &Path) -> io::Result<()> {
    fs::write(path, canonical_ledger_bytes(ledger))
}

// ---------------------------------------------------------------------------
// parsing
// ---------------------------------------------------------------------------

/// Parse failure, pinned to the byte offset of the offending record (or of
/// the offending field within it).
#[derive(Debug, Error)]
#[error("ledger parse error at byte {offset}: {kind}")]
pub struct LedgerParseError {
    pub offset: u64,
    pub kind: LedgerParseErrorKind,
}

#[derive(Debug, Error)]
pub enum LedgerParseErrorKind {
    #[error("truncated record frame")]
    Truncated,
    #[error("record length {0} out of range")]
    BadRecordLength(u32),
    #[error("unknown record type {0:#04x}")]
    UnknownRecordType(u8),
    #[error("first record must be the cluster config")]
    MissingCluster,
    #[error("duplicate cluster config record")]
    DuplicateCluster,
    #[error("cluster config invalid: {0}")]
    BadCluster(String),
    #[error("duplicate block for device {0}")]
    DuplicateDevice(PublicKey),
    #[error("record references unknown device {0}")]
    UnknownDevice(PublicKey),
    #[error("{0}")]
    Field(DecodeError),
}

#[derive(Debug, Error)]
pub enum LedgerFileError {
    #[error("cannot read ledger file: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Parse(#[from] LedgerParseError),
}

/// One framed record's position within a serialized ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordSpan {
    /// Offset of the 4-byte length prefix.
    pub offset: usize,
    /// Full framed length: prefix + type byte + body.
    pub len: usize,
    pub record_type: u8,
}

impl fmt::Display for RecordSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "record type {:#04x} at [{}, {})",
            self.record_type,
            self.offset,
            self.offset + self.len
        )
    }
}

/// Walks the record framing without decoding bodies.
pub fn record_spans(bytes: &[u8]) -> Result<Vec<RecordSpan>, LedgerParseError> {
    let mut spans = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let err = |kind| LedgerParseError {
            offset: pos as u64,
            kind,
        };
        if bytes.len() - pos < 4 {
            return Err(err(LedgerParseErrorKind::Truncated));
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if len == 0 || len > MAX_RECORD_LEN {
            return Err(err(LedgerParseErrorKind::BadRecordLength(len)));
        }
        let total = 4 + len as usize;
        if bytes.len() - pos < total {
            return Err(err(LedgerParseErrorKind::Truncated));
        }
        spans.push(RecordSpan {
            offset: pos,
            len: total,
            record_type: bytes[pos + 4],
        });
        pos += total;
    }
    Ok(spans)
}

/// Loads a ledger from serialized bytes (either producer's output).
pub fn read_ledger_bytes(bytes: &[u8]) -> Result<Ledger, LedgerParseError> {
    let spans = record_spans(bytes)?;
    let mut ledger: Option<Ledger> = None;
    for span in spans {
        let body_offset = span.offset + 5;
        let body = &bytes[body_offset..span.offset + span.len];
        let field_err = |e: DecodeError| LedgerParseError {
            offset: (body_offset + e.offset) as u64,
            kind: LedgerParseErrorKind::Field(e),
        };
        let record_err = |kind| LedgerParseError {
            offset: span.offset as u64,
            kind,
        };
        let mut dec = FieldDecoder::new(body);
        match (span.record_type, &mut ledger) {
            (RECORD_CLUSTER, Some(_)) => {
                return Err(record_err(LedgerParseErrorKind::DuplicateCluster))
            }
            (RECORD_CLUSTER, slot @ None) => {
                let max_faulty = dec.take_u32().map_err(field_err)?;
                let n = dec.take_u32().map_err(field_err)?;
                let mut peers = Vec::with_capacity(n.min(1024) as usize);
                for _ in 0..n {
                    peers.push(PublicKey::from_bytes(
                        dec.take_array::<32>().map_err(field_err)?,
                    ));
                }
                dec.expect_end().map_err(field_err)?;
                let config = ConsensusConfig::new(peers, max_faulty as usize)
                    .map_err(|e| record_err(LedgerParseErrorKind::BadCluster(e.to_string())))?;
                *slot = Some(Ledger::new(config));
            }
            (_, None) => return Err(record_err(LedgerParseErrorKind::MissingCluster)),
            (RECORD_HEADER, Some(ledger)) => {
                let header = decode_header(&mut dec).map_err(field_err)?;
                dec.expect_end().map_err(field_err)?;
                if ledger.find_block(&header.device_public_key).is_some() {
                    return Err(record_err(LedgerParseErrorKind::DuplicateDevice(
                        header.device_public_key,
                    )));
                }
                ledger.push_block_unchecked(header);
            }
            (RECORD_TRANSACTION, Some(ledger)) => {
                let device = PublicKey::from_bytes(dec.take_array::<32>().map_err(field_err)?);
                let tx = decode_transaction(&mut dec).map_err(field_err)?;
                dec.expect_end().map_err(field_err)?;
                if !ledger.push_transaction_unchecked(&device, tx) {
                    return Err(record_err(LedgerParseErrorKind::UnknownDevice(device)));
                }
            }
            (RECORD_CERT_APPEND, Some(ledger)) => {
                let device = PublicKey::from_bytes(dec.take_array::<32>().map_err(field_err)?);
                let gateway = PublicKey::from_bytes(dec.take_array::<32>().map_err(field_err)?);
                let signature = Signature::from_bytes(dec.take_array::<64>().map_err(field_err)?);
                dec.expect_end().map_err(field_err)?;
                let entry = CertificateEntry { gateway, signature };
                if ledger.merge_certificate(&device, &[entry]).is_err() {
                    return Err(record_err(LedgerParseErrorKind::UnknownDevice(device)));
                }
            }
            (other, Some(_)) => {
                return Err(record_err(LedgerParseErrorKind::UnknownRecordType(other)))
            }
        }
    }
    ledger.ok_or(LedgerParseError {
        offset: 0,
        kind: LedgerParseErrorKind::MissingCluster,
    })
}

pub fn read_ledger_file(path: &Path) -> Result<Ledger, LedgerFileError> {
    let bytes = fs::read(path)?;
    Ok(read_ledger_bytes(&bytes)?)
}

// ---------------------------------------------------------------------------
// live journal
// ---------------------------------------------------------------------------

/// Append-only journal a running gateway writes as events happen. Records
/// land in arrival order; use `canonical_ledger_bytes` for comparisons.
pub struct LedgerLogWriter {
    out: BufWriter<fs::File>,
}

impl LedgerLogWriter {
    /// Creates (truncating) a journal and writes the cluster record.
    pub fn create(path: &Path, config: &ConsensusConfig) -> io::Result<Self> {
        let file = fs::File::create(path)?;
        let mut writer = Self {
            out: BufWriter::new(file),
        };
        writer.append(RECORD_CLUSTER, &cluster_record_body(config))?;
        Ok(writer)
    }

    fn append(&mut self, record_type: u8, body: &[u8]) -> io::Result<()> {
        let mut framed = Vec::with_capacity(body.len() + 5);
        frame_record(&mut framed, record_type, body);
        self.out.write_all(&framed)?;
        self.out.flush()
    }

    pub fn append_header(&mut self, header: &BlockHeader) -> io::Result<()> {
        self.append(RECORD_HEADER, &header_record_body(header))
    }

    pub fn append_transaction(&mut self, device: &PublicKey, tx: &Transaction) -> io::Result<()> {
        self.append(RECORD_TRANSACTION, &transaction_record_body(device, tx))
    }

    pub fn append_cert_entry(
        &mut self,
        device: &PublicKey,
        entry: &CertificateEntry,
    ) -> io::Result<()> {
        self.append(RECORD_CERT_APPEND, &cert_append_record_body(device, entry))
    }
}

// ---------------------------------------------------------------------------
// JSON export
// ---------------------------------------------------------------------------

/// Human/tooling export: one JSON object per block, all byte fields as
/// lowercase hex.
pub fn to_json(ledger: &Ledger) -> serde_json::Value {
    serde_json::json!({
        "format": "camchain-ledger-v1",
        "cluster": {
            "max_faulty": ledger.cluster().max_faulty(),
            "gateways": ledger.cluster().peers().iter().map(|p| p.to_hex()).collect::<Vec<_>>(),
        },
        "blocks": ledger.blocks().iter().map(block_json).collect::<Vec<_>>(),
    })
}

fn block_json(block: &Block) -> serde_json::Value {
    let header = block.header();
    serde_json::json!({
        "header": {
            "device_public_key": header.device_public_key.to_hex(),
            "previous_header_hash": to_hex(&header.previous_header_hash),
            "created_at_ms": header.created_at,
            "managing_gateway": header.managing_gateway.to_hex(),
            "header_hash": to_hex(&header.header_hash()),
            "consensus_certificate": header.consensus_certificate.iter().map(|e| {
                serde_json::json!({
                    "gateway": e.gateway.to_hex(),
                    "signature": e.signature.to_hex(),
                })
            }).collect::<Vec<_>>(),
        },
        "transactions": block.transactions().iter().map(|tx| {
            serde_json::json!({
                "sequence_number": tx.sequence_number,
                "previous_transaction_hash": to_hex(&tx.previous_transaction_hash),
                "storage_address": tx.payload.storage_address.to_hex(),
                "metadata_hash": to_hex(&tx.payload.metadata_hash),
                "timestamp_ms": tx.payload.timestamp,
                "gateway_signature": tx.gateway_signature.to_hex(),
                "transaction_hash": to_hex(&tx.transaction_hash),
            })
        }).collect::<Vec<_>>(),
    })
}

pub fn to_json_string(ledger: &Ledger) -> String {
    serde_json::to_string_pretty(&to_json(ledger)).expect("json export never fails")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::testutil::{payload, TestCluster};
    use crate::ledger::validate_ledger;

    fn sample_ledger() -> (TestCluster, Ledger) {
        let cluster = TestCluster::new(4, 1);
        let mut ledger = cluster.ledger();
        let d1 = cluster.bootstrap_device(&mut ledger, 1);
        let d2 = cluster.bootstrap_device(&mut ledger, 2);
        for k in 0..3u64 {
            ledger
                .append_transaction(&d1, payload(k as u8, 10 + k), &cluster.gateways[0])
                .unwrap();
        }
        ledger
            .append_transaction(&d2, payload(9, 50), &cluster.gateways[0])
            .unwrap();
        (cluster, ledger)
    }

    #[test]
    fn canonical_roundtrip_preserves_everything() {
        let (_cluster, ledger) = sample_ledger();
        let bytes = canonical_ledger_bytes(&ledger);
        let loaded = read_ledger_bytes(&bytes).unwrap();
        assert_eq!(canonical_ledger_bytes(&loaded), bytes);
        assert_eq!(loaded.transaction_count(), ledger.transaction_count());
        assert!(validate_ledger(&loaded).is_valid());
    }

    #[test]
    fn journal_replay_matches_canonical() {
        let (cluster, ledger) = sample_ledger();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gw.ledger");
        let mut journal = LedgerLogWriter::create(&path, &cluster.config).unwrap();
        for block in ledger.blocks() {
            journal.append_header(block.header()).unwrap();
            for tx in block.transactions() {
                journal
                    .append_transaction(&block.device_public_key(), tx)
                    .unwrap();
            }
        }
        drop(journal);
        let replayed = read_ledger_file(&path).unwrap();
        assert_eq!(replayed.canonical_bytes(), ledger.canonical_bytes());
    }

    #[test]
    fn journal_cert_append_record_merges() {
        let cluster = TestCluster::new(4, 1);
        let mut ledger = cluster.ledger();
        let device = cluster.bootstrap_device(&mut ledger, 1);
        let hash = ledger.find_block(&device).unwrap().header_hash();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gw.ledger");
        let mut journal = LedgerLogWriter::create(&path, &cluster.config).unwrap();
        journal
            .append_header(ledger.find_block(&device).unwrap().header())
            .unwrap();
        let late = CertificateEntry {
            gateway: cluster.gateways[3].public_key(),
            signature: crate::consensus::sign_commit(&hash, &cluster.gateways[3]).unwrap(),
        };
        journal.append_cert_entry(&device, &late).unwrap();
        drop(journal);

        let replayed = read_ledger_file(&path).unwrap();
        assert_eq!(
            replayed
                .find_block(&device)
                .unwrap()
                .header()
                .consensus_certificate
                .len(),
            4
        );
        assert!(validate_ledger(&replayed).is_valid());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let (_cluster, ledger) = sample_ledger();
        let mut bytes = canonical_ledger_bytes(&ledger);
        let cut = bytes.len() - 7;
        bytes.truncate(cut);
        let err = read_ledger_bytes(&bytes).unwrap_err();
        assert!(matches!(err.kind, LedgerParseErrorKind::Truncated));
        assert!(err.offset <= cut as u64);
    }

    #[test]
    fn missing_cluster_record_rejected() {
        let (_cluster, ledger) = sample_ledger();
        let bytes = canonical_ledger_bytes(&ledger);
        let spans = record_spans(&bytes).unwrap();
        // Drop the leading cluster record.
        let rest = bytes[spans[0].len..].to_vec();
        let err = read_ledger_bytes(&rest).unwrap_err();
        assert!(matches!(err.kind, LedgerParseErrorKind::MissingCluster));
    }

    #[test]
    fn transaction_for_unknown_device_rejected_with_offset() {
        let (_cluster, ledger) = sample_ledger();
        let bytes = canonical_ledger_bytes(&ledger);
        let spans = record_spans(&bytes).unwrap();
        // Keep the cluster record, then jump straight to a transaction.
        let tx_span = spans
            .iter()
            .find(|s| s.record_type == RECORD_TRANSACTION)
            .unwrap();
        let mut cut = bytes[..spans[0].len].to_vec();
        cut.extend_from_slice(&bytes[tx_span.offset..tx_span.offset + tx_span.len]);
        let err = read_ledger_bytes(&cut).unwrap_err();
        assert!(matches!(err.kind, LedgerParseErrorKind::UnknownDevice(_)));
        assert_eq!(err.offset, spans[0].len as u64);
    }

    #[test]
    fn record_spans_cover_input_exactly() {
        let (_cluster, ledger) = sample_ledger();
        let bytes = canonical_ledger_bytes(&ledger);
        let spans = record_spans(&bytes).unwrap();
        assert_eq!(spans.iter().map(|s| s.len).sum::<usize>(), bytes.len());
        // 1 cluster + 2 headers + 4 transactions.
        assert_eq!(spans.len(), 7);
        assert_eq!(
            spans
                .iter()
                .filter(|s| s.record_type == RECORD_TRANSACTION)
                .count(),
            4
        );
    }

    #[test]
    fn json_export_shape() {
        let (_cluster, ledger) = sample_ledger();
        let json = to_json(&ledger);
        assert_eq!(json["format"], "camchain-ledger-v1");
        assert_eq!(json["blocks"].as_array().unwrap().len(), 2);
        let b0 = &json["blocks"][0];
        assert_eq!(b0["header"]["device_public_key"].as_str().unwrap().len(), 64);
        assert_eq!(b0["transactions"].as_array().unwrap().len(), 3);
        assert_eq!(b0["transactions"][2]["sequence_number"], 2);
        assert_eq!(
            b0["header"]["consensus_certificate"].as_array().unwrap().len(),
            3
        );
        // Parses back as JSON text.
        let text = to_json_string(&ledger);
        serde_json::from_str::<serde_json::Value>(&text).unwrap();
    }
}
