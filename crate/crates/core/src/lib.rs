//! End-to-end integrity layer for surveillance video.
//!
//! Gateways ingest camera chunk streams, anchor each chunk's metadata hash
//! in a per-device hash-chain ledger (admitted by PBFT among the gateway
//! peers at camera bootstrap), push chunk bytes into a content-addressed
//! store, and replicate transactions to peer gateways. An auditor can later
//! prove, from the ledger plus the store, whether stored footage was
//! tampered with — and pinpoint exactly which chunk.
//!
//! Module map:
//! * [`identity`] — Ed25519 keys for cameras and gateways
//! * [`chunk`] — chunk container, metadata extraction, metadata hash
//! * [`cas`] — content-addressed store, plus its wire service
//! * [`ledger`] — the per-device blockchain and its validation
//! * [`consensus`] — PBFT bootstrap among gateways
//! * [`gateway`] — the gateway node tying it all together
//! * [`audit`] — auditor-facing chain and video verification
//! * [`bench`] — the scaling experiment harness

pub mod audit;
pub mod bench;
pub mod cas;
pub mod chunk;
pub mod consensus;
pub mod encoding;
pub mod gateway;
pub mod identity;
pub mod ledger;
pub mod wire;
