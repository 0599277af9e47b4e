//! The transportation-layer node: camera ingestion, bootstrap consensus,
//! the per-chunk protocol, and ledger replication across peers.

mod camera;
mod config;
mod metrics;
mod node;
mod peer;

pub use camera::{CameraClient, CameraError};
pub use config::{ConfigError, GatewayConfig, GatewayFileConfig, PeerEntry};
pub use metrics::{parse_metrics_csv, MetricsWriter, TxTiming, METRICS_CSV_HEADER};
pub use node::{now_ms, CounterSnapshot, GatewayError, GatewayNode};
pub use peer::{PeerMessage, PeerPayload};
