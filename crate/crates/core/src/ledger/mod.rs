//! The per-device blockchain.
//!
//! Unlike a classic chain, a block is not a batch of transactions sealed at
//! mining time: every camera gets exactly one block at bootstrap, and all of
//! that camera's transactions are appended into it over time. Blocks link
//! to each other through their header hashes; transactions link within a
//! block, with transaction 0 anchored to the block's header hash.

pub mod codec;
mod validate;

pub use validate::{validate_ledger, ValidationReport, Violation, ViolationKind};

use std::collections::HashMap;

use thiserror::Error;

use crate::cas::ContentAddress;
use crate::consensus::{self, ConsensusConfig};
use crate::encoding::{sha256, FieldEncoder};
use crate::identity::{self, DeviceIdentity, IdentityError, PublicKey, Signature};

pub const ZERO_HASH: [u8; 32] = [0u8; 32];

/// One gateway's commit vote over a header hash; a quorum of these forms
/// the block's consensus certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CertificateEntry {
    pub gateway: PublicKey,
    pub signature: Signature,
}

/// Per-device block header. The certificate is excluded from the header
/// hash so that votes can sign the hash itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHeader {
    pub device_public_key: PublicKey,
    pub previous_header_hash: [u8; 32],
    /// Unix milliseconds at creation, from the proposing gateway's clock.
    pub created_at: u64,
    pub managing_gateway: PublicKey,
    pub consensus_certificate: Vec<CertificateEntry>,
}

impl BlockHeader {
    /// Canonical encoding of the hashed fields, certificate excluded.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = FieldEncoder::with_capacity(96);
        enc.put_bytes(self.device_public_key.as_bytes())
            .put_bytes(&self.previous_header_hash)
            .put_u64(self.created_at)
            .put_bytes(self.managing_gateway.as_bytes());
        enc.finish()
    }

    pub fn header_hash(&self) -> [u8; 32] {
        sha256(&self.canonical_bytes())
    }
}

/// The gateway-signed content of one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransactionPayload {
    pub storage_address: ContentAddress,
    /// The metadata hash (`hash_metadata` output) for the anchored chunk.
    pub metadata_hash: [u8; 32],
    /// Unix milliseconds at signing, from the managing gateway's clock.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub previous_transaction_hash: [u8; 32],
    pub sequence_number: u64,
    pub payload: TransactionPayload,
    pub gateway_signature: Signature,
    pub transaction_hash: [u8; 32],
}

impl Transaction {
    /// Canonical bytes covered by the transaction hash.
    pub fn signing_bytes(
        previous_transaction_hash: &[u8; 32],
        sequence_number: u64,
        payload: &TransactionPayload,
    ) -> Vec<u8> {
        let mut enc = FieldEncoder::with_capacity(128);
        enc.put_bytes(previous_transaction_hash)
            .put_u64(sequence_number)
            .put_bytes(payload.storage_address.digest())
            .put_bytes(&payload.metadata_hash)
            .put_u64(payload.timestamp);
        enc.finish()
    }

    pub fn compute_hash(
        previous_transaction_hash: &[u8; 32],
        sequence_number: u64,
        payload: &TransactionPayload,
    ) -> [u8; 32] {
        sha256(&Self::signing_bytes(
            previous_transaction_hash,
            sequence_number,
            payload,
        ))
    }

    /// Hashes and signs a new transaction with the managing gateway's key.
    pub fn build(
        previous_transaction_hash: [u8; 32],
        sequence_number: u64,
        payload: TransactionPayload,
        gateway: &DeviceIdentity,
    ) -> Result<Self, IdentityError> {
        let transaction_hash =
            Self::compute_hash(&previous_transaction_hash, sequence_number, &payload);
        let gateway_signature = gateway.sign(&transaction_hash)?;
        Ok(Self {
            previous_transaction_hash,
            sequence_number,
            payload,
            gateway_signature,
            transaction_hash,
        })
    }
}

/// A device block: header plus its append-over-time transaction list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    header: BlockHeader,
    header_hash: [u8; 32],
    transactions: Vec<Transaction>,
}

impl Block {
    pub fn new(header: BlockHeader) -> Self {
        let header_hash = header.header_hash();
        Self {
            header,
            header_hash,
            transactions: Vec::new(),
        }
    }

    pub fn header(&self) -> &BlockHeader {
        &self.header
    }

    /// Cached hash of the header as constructed; `validate_ledger`
    /// recomputes it from fields when checking.
    pub fn header_hash(&self) -> [u8; 32] {
        self.header_hash
    }

    pub fn device_public_key(&self) -> PublicKey {
        self.header.device_public_key
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.transactions
    }

    pub fn next_sequence(&self) -> u64 {
        self.transactions.len() as u64
    }

    /// What the next transaction must reference: the last transaction's
    /// hash, or the header hash for an empty block.
    pub fn tip_transaction_hash(&self) -> [u8; 32] {
        self.transactions
            .last()
            .map(|t| t.transaction_hash)
            .unwrap_or(self.header_hash)
    }

    pub fn last_timestamp(&self) -> Option<u64> {
        self.transactions.last().map(|t| t.payload.timestamp)
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("device {0} already has a block")]
    DuplicateDevice(PublicKey),
    #[error("no block for device {0}")]
    UnknownDevice(PublicKey),
    #[error("append rejected: gateway {found} is not the managing gateway {expected}")]
    WrongGateway {
        expected: PublicKey,
        found: PublicKey,
    },
    #[error("append rejected: timestamp {offered} is earlier than last {last}")]
    TimestampRegression { last: u64, offered: u64 },
    #[error("block does not link to the current chain tip")]
    TipMismatch,
    #[error("transaction sequence {found} does not match expected {expected}")]
    SequenceMismatch { expected: u64, found: u64 },
    #[error("transaction does not link to the block tip")]
    ChainMismatch,
    #[error("transaction hash does not match its content")]
    HashMismatch,
    #[error("transaction signature invalid under managing gateway key")]
    SignatureInvalid,
    #[error("consensus certificate invalid: {0}")]
    CertificateInvalid(String),
    #[error("managing gateway {0} is not a cluster peer")]
    ManagerNotPeer(PublicKey),
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

/// The chain: ordered blocks plus a device index. The cluster membership
/// travels with the ledger so that exported files are self-contained for
/// certificate re-verification.
#[derive(Debug, Clone)]
pub struct Ledger {
    cluster: ConsensusConfig,
    blocks: Vec<Block>,
    index: HashMap<PublicKey, usize>,
}

impl Ledger {
    pub fn new(cluster: ConsensusConfig) -> Self {
        Self {
            cluster,
            blocks: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn cluster(&self) -> &ConsensusConfig {
        &self.cluster
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn transaction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.transactions.len()).sum()
    }

    /// Hash of the last block header, or zeros for an empty chain.
    pub fn tip_hash(&self) -> [u8; 32] {
        self.blocks
            .last()
            .map(|b| b.header_hash())
            .unwrap_or(ZERO_HASH)
    }

    pub fn find_block(&self, device: &PublicKey) -> Option<&Block> {
        self.index.get(device).map(|&i| &self.blocks[i])
    }

    fn find_block_mut(&mut self, device: &PublicKey) -> Option<&mut Block> {
        let i = *self.index.get(device)?;
        Some(&mut self.blocks[i])
    }

    /// Builds an uncertified header for a device that has no block yet,
    /// linked to the current tip. Consensus attaches the certificate.
    pub fn build_block_header(
        &self,
        device_public_key: PublicKey,
        created_at: u64,
        managing_gateway: PublicKey,
    ) -> Result<BlockHeader, LedgerError> {
        if self.index.contains_key(&device_public_key) {
            return Err(LedgerError::DuplicateDevice(device_public_key));
        }
        Ok(BlockHeader {
            device_public_key,
            previous_header_hash: self.tip_hash(),
            created_at,
            managing_gateway,
            consensus_certificate: Vec::new(),
        })
    }

    /// Inserts a certified block at the tip. Refuses duplicates, blocks
    /// that do not link to the tip, and certificates below quorum.
    pub fn insert_block(&mut self, header: BlockHeader) -> Result<(), LedgerError> {
        if self.index.contains_key(&header.device_public_key) {
            return Err(LedgerError::DuplicateDevice(header.device_public_key));
        }
        if header.previous_header_hash != self.tip_hash() {
            return Err(LedgerError::TipMismatch);
        }
        if !self.cluster.contains(&header.managing_gateway) {
            return Err(LedgerError::ManagerNotPeer(header.managing_gateway));
        }
        consensus::verify_certificate(&header, &self.cluster)
            .map_err(|e| LedgerError::CertificateInvalid(e.to_string()))?;
        let mut header = header;
        sort_certificate(&mut header.consensus_certificate, &self.cluster);
        self.push_block_unchecked(header);
        Ok(())
    }

    /// Raw insertion used by the file loader; all checking is deferred to
    /// `validate_ledger` so tampered files load and then report violations.
    pub(crate) fn push_block_unchecked(&mut self, header: BlockHeader) {
        let block = Block::new(header);
        self.index
            .insert(block.device_public_key(), self.blocks.len());
        self.blocks.push(block);
    }

    pub(crate) fn push_transaction_unchecked(
        &mut self,
        device: &PublicKey,
        tx: Transaction,
    ) -> bool {
        match self.find_block_mut(device) {
            Some(b) => {
                b.transactions.push(tx);
                true
            }
            None => false,
        }
    }

    /// Hashes, signs, and appends the next transaction for `device`.
    /// Only the managing gateway's identity is accepted.
    pub fn append_transaction(
        &mut self,
        device: &PublicKey,
        payload: TransactionPayload,
        gateway: &DeviceIdentity,
    ) -> Result<&Transaction, LedgerError> {
        let block = self
            .find_block(device)
            .ok_or(LedgerError::UnknownDevice(*device))?;
        if gateway.public_key() != block.header.managing_gateway {
            return Err(LedgerError::WrongGateway {
                expected: block.header.managing_gateway,
                found: gateway.public_key(),
            });
        }
        if let Some(last) = block.last_timestamp() {
            if payload.timestamp < last {
                return Err(LedgerError::TimestampRegression {
                    last,
                    offered: payload.timestamp,
                });
            }
        }
        let tx = Transaction::build(
            block.tip_transaction_hash(),
            block.next_sequence(),
            payload,
            gateway,
        )?;
        let block = self.find_block_mut(device).expect("block exists");
        block.transactions.push(tx);
        Ok(block.transactions.last().expect("just pushed"))
    }

    /// Appends a transaction received from a peer after verifying every
    /// invariant against the local replica of the block.
    pub fn apply_replica_transaction(
        &mut self,
        device: &PublicKey,
        tx: Transaction,
    ) -> Result<(), LedgerError> {
        let block = self
            .find_block(device)
            .ok_or(LedgerError::UnknownDevice(*device))?;
        let expected = block.next_sequence();
        if tx.sequence_number != expected {
            return Err(LedgerError::SequenceMismatch {
                expected,
                found: tx.sequence_number,
            });
        }
        if tx.previous_transaction_hash != block.tip_transaction_hash() {
            return Err(LedgerError::ChainMismatch);
        }
        let recomputed = Transaction::compute_hash(
            &tx.previous_transaction_hash,
            tx.sequence_number,
            &tx.payload,
        );
        if recomputed != tx.transaction_hash {
            return Err(LedgerError::HashMismatch);
        }
        if let Some(last) = block.last_timestamp() {
            if tx.payload.timestamp < last {
                return Err(LedgerError::TimestampRegression {
                    last,
                    offered: tx.payload.timestamp,
                });
            }
        }
        if !identity::verify(
            &block.header.managing_gateway,
            &tx.transaction_hash,
            &tx.gateway_signature,
        ) {
            return Err(LedgerError::SignatureInvalid);
        }
        let block = self.find_block_mut(device).expect("block exists");
        block.transactions.push(tx);
        Ok(())
    }

    /// Folds additional valid commit signatures into a block's certificate.
    /// Returns how many new entries were admitted. Keeps the certificate in
    /// canonical (peer-index) order so replicas serialize identically.
    pub fn merge_certificate(
        &mut self,
        device: &PublicKey,
        entries: &[CertificateEntry],
    ) -> Result<usize, LedgerError> {
        let cluster = self.cluster.clone();
        let block = self
            .find_block_mut(device)
            .ok_or(LedgerError::UnknownDevice(*device))?;
        let hash = block.header_hash;
        let cert = &mut block.header.consensus_certificate;
        let mut added = 0;
        for entry in entries {
            if cert.iter().any(|e| e.gateway == entry.gateway) {
                continue;
            }
            if !cluster.contains(&entry.gateway) {
                continue;
            }
            if !consensus::verify_commit_entry(&hash, entry) {
                continue;
            }
            cert.push(*entry);
            added += 1;
        }
        if added > 0 {
            sort_certificate(cert, &cluster);
        }
        Ok(added)
    }

    /// Canonical serialization of the whole ledger (see [`codec`]).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        codec::canonical_ledger_bytes(self)
    }
}

/// Orders certificate entries by cluster peer index; unknown signers sort
/// last by key bytes (validation flags them separately).
pub(crate) fn sort_certificate(cert: &mut [CertificateEntry], cluster: &ConsensusConfig) {
    cert.sort_by_key(|e| {
        (
            cluster.peer_index(&e.gateway).unwrap_or(usize::MAX),
            *e.gateway.as_bytes(),
        )
    });
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// A single-purpose cluster: `n` gateway identities with fault budget
    /// `f`, plus helpers to certify headers the way consensus would.
    pub struct TestCluster {
        pub gateways: Vec<DeviceIdentity>,
        pub config: ConsensusConfig,
    }

    impl TestCluster {
        pub fn new(n: usize, f: usize) -> Self {
            let gateways: Vec<DeviceIdentity> =
                (0..n).map(|_| DeviceIdentity::generate()).collect();
            let config = ConsensusConfig::new(
                gateways.iter().map(|g| g.public_key()).collect(),
                f,
            )
            .unwrap();
            Self { gateways, config }
        }

        /// Commit signatures from the first `quorum` gateways.
        pub fn certify(&self, header: &mut BlockHeader) {
            let hash = header.header_hash();
            header.consensus_certificate = self
                .gateways
                .iter()
                .take(self.config.quorum())
                .map(|g| CertificateEntry {
                    gateway: g.public_key(),
                    signature: consensus::sign_commit(&hash, g).unwrap(),
                })
                .collect();
        }

        pub fn ledger(&self) -> Ledger {
            Ledger::new(self.config.clone())
        }

        /// Bootstraps a device block managed by gateway 0 and returns the
        /// device key.
        pub fn bootstrap_device(&self, ledger: &mut Ledger, created_at: u64) -> PublicKey {
            let device = DeviceIdentity::generate().public_key();
            let mut header = ledger
                .build_block_header(device, created_at, self.gateways[0].public_key())
                .unwrap();
            self.certify(&mut header);
            ledger.insert_block(header).unwrap();
            device
        }
    }

    pub fn payload(n: u8, timestamp: u64) -> TransactionPayload {
        TransactionPayload {
            storage_address: ContentAddress::from_content(&[n]),
            metadata_hash: sha256(&[n, n]),
            timestamp,
        }
    }
}
