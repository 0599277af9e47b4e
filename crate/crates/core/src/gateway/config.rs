//! Gateway configuration: runtime struct plus the TOML file format
//! consumed by `gatewayd --config`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunk::ChunkingConfig;
use crate::consensus::{ConsensusConfig, ConsensusError};
use crate::identity::{DeviceIdentity, IdentityError, PublicKey};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("own public key {0} is not in the peer table")]
    NotAPeer(PublicKey),
    #[error("interval_ms must be greater than zero")]
    ZeroInterval,
    #[error("tx_update_drop_percent must be <= 100")]
    BadDropPercent,
}

/// One row of the peer table. The table is ordered and shared verbatim by
/// every gateway in the cluster; its order defines consensus membership.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerEntry {
    /// Gateway public key, 64 hex chars.
    pub public_key: String,
    /// `host:port` of the gateway's listener.
    pub address: String,
}

/// Serde image of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayFileConfig {
    /// Path to the 32-byte raw seed file, relative to the config file.
    pub identity_seed: PathBuf,
    pub listen: String,
    /// Address of the content-addressed store service.
    pub store: String,
    #[serde(default = "default_interval_ms")]
    pub interval_ms: u64,
    pub faults_tolerated: usize,
    #[serde(default = "default_consensus_timeout_ms")]
    pub consensus_timeout_ms: u64,
    #[serde(default = "default_hello_timeout_ms")]
    pub hello_timeout_ms: u64,
    #[serde(default = "default_sync_poll_ms")]
    pub sync_poll_ms: u64,
    #[serde(default = "default_store_retry_ms")]
    pub store_retry_ms: u64,
    #[serde(default)]
    pub metrics_csv: Option<PathBuf>,
    #[serde(default)]
    pub ledger_log: Option<PathBuf>,
    /// Fault injection for tests: percentage of outbound TX_UPDATE
    /// broadcasts to drop. Zero in any real deployment.
    #[serde(default)]
    pub tx_update_drop_percent: u8,
    #[serde(default)]
    pub drop_seed: u64,
    #[serde(rename = "peer")]
    pub peers: Vec<PeerEntry>,
}

fn default_interval_ms() -> u64 {
    10_000
}
fn default_consensus_timeout_ms() -> u64 {
    2_000
}
fn default_hello_timeout_ms() -> u64 {
    15_000
}
fn default_sync_poll_ms() -> u64 {
    1_000
}
fn default_store_retry_ms() -> u64 {
    200
}

impl GatewayFileConfig {
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Fully resolved runtime configuration.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub identity: DeviceIdentity,
    pub listen: String,
    pub store: String,
    /// Ordered cluster membership, self included.
    pub peers: Vec<(PublicKey, String)>,
    pub chunking: ChunkingConfig,
    pub max_faulty: usize,
    pub consensus_timeout: Duration,
    pub hello_timeout: Duration,
    pub sync_poll_interval: Duration,
    pub store_retry_backoff: Duration,
    pub metrics_csv: Option<PathBuf>,
    pub ledger_log: Option<PathBuf>,
    pub tx_update_drop_percent: u8,
    pub drop_seed: u64,
}

impl GatewayConfig {
    /// Loads and resolves a config file; the seed path is taken relative
    /// to the config file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let file: GatewayFileConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_file_config(file, base)
    }

    pub fn from_file_config(
        file: GatewayFileConfig,
        base_dir: &Path,
    ) -> Result<Self, ConfigError> {
        let seed_path = if file.identity_seed.is_absolute() {
            file.identity_seed.clone()
        } else {
            base_dir.join(&file.identity_seed)
        };
        let identity = DeviceIdentity::load_seed_file(&seed_path)?;
        let mut peers = Vec::with_capacity(file.peers.len());
        for p in &file.peers {
            peers.push((PublicKey::from_hex(&p.public_key)?, p.address.clone()));
        }
        let resolve = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| {
                if p.is_absolute() {
                    p.clone()
                } else {
                    base_dir.join(p)
                }
            })
        };
        let config = Self {
            identity,
            listen: file.listen,
            store: file.store,
            peers,
            chunking: ChunkingConfig::new(file.interval_ms)
                .map_err(|_| ConfigError::ZeroInterval)?,
            max_faulty: file.faults_tolerated,
            consensus_timeout: Duration::from_millis(file.consensus_timeout_ms),
            hello_timeout: Duration::from_millis(file.hello_timeout_ms),
            sync_poll_interval: Duration::from_millis(file.sync_poll_ms),
            store_retry_backoff: Duration::from_millis(file.store_retry_ms),
            metrics_csv: resolve(&file.metrics_csv),
            ledger_log: resolve(&file.ledger_log),
            tx_update_drop_percent: file.tx_update_drop_percent,
            drop_seed: file.drop_seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.consensus_config()?;
        if !self
            .peers
            .iter()
            .any(|(pk, _)| *pk == self.identity.public_key())
        {
            return Err(ConfigError::NotAPeer(self.identity.public_key()));
        }
        if self.tx_update_drop_percent > 100 {
            return Err(ConfigError::BadDropPercent);
        }
        Ok(())
    }

    /// Consensus membership in peer-table order.
    pub fn consensus_config(&self) -> Result<ConsensusConfig, ConsensusError> {
        ConsensusConfig::new(self.peers.iter().map(|(pk, _)| *pk).collect(), self.max_faulty)
    }

    pub fn peer_address(&self, key: &PublicKey) -> Option<&str> {
        self.peers
            .iter()
            .find(|(pk, _)| pk == key)
            .map(|(_, addr)| addr.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_roundtrip_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let id = DeviceIdentity::generate();
        id.write_seed_file(&dir.path().join("gw.seed")).unwrap();
        let other = DeviceIdentity::generate();

        let file = GatewayFileConfig {
            identity_seed: "gw.seed".into(),
            listen: "127.0.0.1:7001".into(),
            store: "127.0.0.1:7100".into(),
            interval_ms: 10_000,
            faults_tolerated: 0,
            consensus_timeout_ms: 2_000,
            hello_timeout_ms: 15_000,
            sync_poll_ms: 1_000,
            store_retry_ms: 200,
            metrics_csv: Some("metrics.csv".into()),
            ledger_log: None,
            tx_update_drop_percent: 0,
            drop_seed: 0,
            peers: vec![
                PeerEntry {
                    public_key: id.public_key().to_hex(),
                    address: "127.0.0.1:7001".into(),
                },
                PeerEntry {
                    public_key: other.public_key().to_hex(),
                    address: "127.0.0.1:7002".into(),
                },
            ],
        };
        let path = dir.path().join("gateway.toml");
        std::fs::write(&path, file.to_toml_string()).unwrap();

        let cfg = GatewayConfig::from_file(&path).unwrap();
        assert_eq!(cfg.identity.public_key(), id.public_key());
        assert_eq!(cfg.peers.len(), 2);
        assert_eq!(cfg.chunking.interval_ms, 10_000);
        assert_eq!(cfg.metrics_csv.unwrap(), dir.path().join("metrics.csv"));
        assert_eq!(cfg.consensus_config().unwrap().quorum(), 1);
    }

    #[test]
    fn own_key_must_be_a_peer() {
        let dir = tempfile::tempdir().unwrap();
        let id = DeviceIdentity::generate();
        id.write_seed_file(&dir.path().join("gw.seed")).unwrap();
        let file = GatewayFileConfig {
            identity_seed: "gw.seed".into(),
            listen: "127.0.0.1:0".into(),
            store: "127.0.0.1:0".into(),
            interval_ms: 10_000,
            faults_tolerated: 0,
            consensus_timeout_ms: 2_000,
            hello_timeout_ms: 15_000,
            sync_poll_ms: 1_000,
            store_retry_ms: 200,
            metrics_csv: None,
            ledger_log: None,
            tx_update_drop_percent: 0,
            drop_seed: 0,
            peers: vec![PeerEntry {
                public_key: DeviceIdentity::generate().public_key().to_hex(),
                address: "127.0.0.1:7002".into(),
            }],
        };
        let path = dir.path().join("gateway.toml");
        std::fs::write(&path, file.to_toml_string()).unwrap();
        assert!(matches!(
            GatewayConfig::from_file(&path),
            Err(ConfigError::NotAPeer(_))
        ));
    }
}
