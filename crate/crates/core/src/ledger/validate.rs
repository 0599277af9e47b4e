//! Structural validation: every invariant the ledger types promise,
//! re-checked from raw field values and reported rather than thrown.

use std::collections::HashSet;
use std::fmt;

use crate::consensus;
use crate::identity::{self, PublicKey};

use super::{Ledger, Transaction, ZERO_HASH};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    HeaderChainBreak,
    DuplicateDevice,
    ManagerNotPeer,
    CertificateQuorum { have: usize, need: usize },
    CertificateUnknownSigner(PublicKey),
    CertificateDuplicateSigner(PublicKey),
    CertificateBadSignature(PublicKey),
    SequenceGap { expected: u64, found: u64 },
    TransactionChainBreak,
    HashMismatch,
    SignatureInvalid,
    TimestampRegression { last: u64, offered: u64 },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::HeaderChainBreak => write!(f, "header does not link to previous block"),
            Self::DuplicateDevice => write!(f, "device already has an earlier block"),
            Self::ManagerNotPeer => write!(f, "managing gateway is not a cluster peer"),
            Self::CertificateQuorum { have, need } => {
                write!(f, "certificate has {have} valid signatures, quorum is {need}")
            }
            Self::CertificateUnknownSigner(pk) => {
                write!(f, "certificate signer {pk} is not a cluster peer")
            }
            Self::CertificateDuplicateSigner(pk) => {
                write!(f, "certificate signer {pk} appears twice")
            }
            Self::CertificateBadSignature(pk) => {
                write!(f, "certificate signature from {pk} does not verify")
            }
            Self::SequenceGap { expected, found } => {
                write!(f, "sequence gap: expected {expected}, found {found}")
            }
            Self::TransactionChainBreak => {
                write!(f, "transaction does not link to its predecessor")
            }
            Self::HashMismatch => write!(f, "hash-mismatch: stored transaction hash does not match content"),
            Self::SignatureInvalid => write!(f, "gateway signature does not verify"),
            Self::TimestampRegression { last, offered } => {
                write!(f, "timestamp {offered} regresses below {last}")
            }
        }
    }
}

/// One invariant breach, pinned to a block and (for transaction-level
/// checks) the position within the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub block_index: usize,
    pub device: PublicKey,
    /// Transaction position within the block, when applicable. This is the
    /// slot the offending record occupies, not whatever sequence number it
    /// claims to carry.
    pub sequence: Option<u64>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {} device {}", self.block_index, self.device)?;
        if let Some(seq) = self.sequence {
            write!(f, " seq {seq}")?;
        }
        write!(f, ": {}", self.kind)
    }
}

/// Everything `validate_ledger` found; empty means valid.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Violations hitting a particular transaction position of a device.
    pub fn at_sequence(&self, device: &PublicKey, sequence: u64) -> Vec<&Violation> {
        self.violations
            .iter()
            .filter(|v| v.device == *device && v.sequence == Some(sequence))
            .collect()
    }
}

/// Re-checks every structural invariant: header chain links, one block per
/// device, certificate quorum and signatures, per-block transaction hash
/// chains, sequence contiguity, gateway signatures, and timestamp
/// monotonicity. Never fails; problems come back as violations.
pub fn validate_ledger(ledger: &Ledger) -> ValidationReport {
    let mut report = ValidationReport::default();
    let cluster = ledger.cluster();
    let mut seen_devices: HashSet<PublicKey> = HashSet::new();
    let mut expected_prev = ZERO_HASH;

    for (block_index, block) in ledger.blocks().iter().enumerate() {
        let header = block.header();
        let device = header.device_public_key;
        let header_hash = header.header_hash();
        let mut push = |sequence: Option<u64>, kind: ViolationKind| {
            report.violations.push(Violation {
                block_index,
                device,
                sequence,
                kind,
            });
        };

        if header.previous_header_hash != expected_prev {
            push(None, ViolationKind::HeaderChainBreak);
        }
        expected_prev = header_hash;

        if !seen_devices.insert(device) {
            push(None, ViolationKind::DuplicateDevice);
        }
        if !cluster.contains(&header.managing_gateway) {
            push(None, ViolationKind::ManagerNotPeer);
        }

        // Certificate: count only entries that are distinct peers with
        // valid commit votes over the recomputed header hash.
        let mut signers: HashSet<PublicKey> = HashSet::new();
        let mut valid_entries = 0usize;
        for entry in &header.consensus_certificate {
            if !cluster.contains(&entry.gateway) {
                push(None, ViolationKind::CertificateUnknownSigner(entry.gateway));
                continue;
            }
            if !signers.insert(entry.gateway) {
                push(None, ViolationKind::CertificateDuplicateSigner(entry.gateway));
                continue;
            }
            if !consensus::verify_commit_entry(&header_hash, entry) {
                push(None, ViolationKind::CertificateBadSignature(entry.gateway));
                continue;
            }
            valid_entries += 1;
        }
        if valid_entries < cluster.quorum() {
            push(
                None,
                ViolationKind::CertificateQuorum {
                    have: valid_entries,
                    need: cluster.quorum(),
                },
            );
        }

        validate_block_transactions(block_index, device, header_hash, header.managing_gateway, block.transactions(), &mut report);
    }
    report
}

fn validate_block_transactions(
    block_index: usize,
    device: PublicKey,
    header_hash: [u8; 32],
    managing_gateway: PublicKey,
    transactions: &[Transaction],
    report: &mut ValidationReport,
) {
    let mut expected_prev = header_hash;
    let mut last_timestamp: Option<u64> = None;
    for (position, tx) in transactions.iter().enumerate() {
        let position = position as u64;
        let mut push = |kind: ViolationKind| {
            report.violations.push(Violation {
                block_index,
                device,
                sequence: Some(position),
                kind,
            });
        };

        if tx.sequence_number != position {
            push(ViolationKind::SequenceGap {
                expected: position,
                found: tx.sequence_number,
            });
        }
        if tx.previous_transaction_hash != expected_prev {
            push(ViolationKind::TransactionChainBreak);
        }
        let recomputed = Transaction::compute_hash(
            &tx.previous_transaction_hash,
            tx.sequence_number,
            &tx.payload,
        );
        if recomputed != tx.transaction_hash {
            push(ViolationKind::HashMismatch);
        }
        if !identity::verify(&managing_gateway, &tx.transaction_hash, &tx.gateway_signature) {
            push(ViolationKind::SignatureInvalid);
        }
        if let Some(last) = last_timestamp {
            if tx.payload.timestamp < last {
                push(ViolationKind::TimestampRegression {
                    last,
                    offered: tx.payload.timestamp,
                });
            }
        }
        // Follow the stored hash so one corrupt transaction does not smear
        // chain-break findings across the rest of the block.
        expected_prev = tx.transaction_hash;
        last_timestamp = Some(tx.payload.timestamp);
    }
}
