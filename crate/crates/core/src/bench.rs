//! Desk-scale reproduction of the scaling experiment: simulated cameras
//! drive a local gateway cluster and the harness aggregates per-transaction
//! creation latency against camera count.
//!
//! Counts are exact and asserted; timings are measurements, reported with
//! mean/median/p95 plus the per-step breakdown (extract, store, sign,
//! append+broadcast) so both the full-protocol and the extract-only views
//! can be computed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::cas::{CasError, CasServer, CasStore};
use crate::chunk::{ChunkGenerator, ChunkingConfig};
use crate::gateway::{
    parse_metrics_csv, CameraClient, CameraError, GatewayConfig, GatewayError, GatewayNode,
    TxTiming,
};
use crate::identity::DeviceIdentity;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("store error: {0}")]
    Store(#[from] CasError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("camera failed: {0}")]
    Camera(#[from] CameraError),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("plan parse error: {0}")]
    PlanParse(#[from] toml::de::Error),
    #[error("baseline camera count {0} not present in results")]
    MissingBaseline(u32),
    #[error("results parse error: {0}")]
    ResultsParse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pacing {
    /// Chunks sent back to back; a 180-chunk stream takes seconds.
    MaxRate,
    /// Chunks sent every `chunk_duration_ms`, mimicking a live stream.
    Realtime,
}

/// The experiment description (TOML-loadable).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Total simulated cameras per row, distributed round-robin over the
    /// gateways.
    #[serde(default = "default_camera_counts")]
    pub camera_counts: Vec<u32>,
    #[serde(default = "default_chunks_per_camera")]
    pub chunks_per_camera: u32,
    #[serde(default = "default_chunk_duration_ms")]
    pub chunk_duration_ms: u64,
    /// Synthetic payload bytes per chunk (pseudo-random, seeded).
    #[serde(default = "default_payload_bytes")]
    pub payload_bytes: usize,
    #[serde(default = "default_gateways")]
    pub gateways: u32,
    #[serde(default = "default_pacing")]
    pub pacing: Pacing,
    #[serde(default)]
    pub payload_seed: u64,
}

fn default_camera_counts() -> Vec<u32> {
    vec![1, 2, 4, 8, 16, 32]
}
fn default_chunks_per_camera() -> u32 {
    180
}
fn default_chunk_duration_ms() -> u64 {
    10_000
}
fn default_payload_bytes() -> usize {
    512 * 1024
}
fn default_gateways() -> u32 {
    4
}
fn default_pacing() -> Pacing {
    Pacing::MaxRate
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            camera_counts: default_camera_counts(),
            chunks_per_camera: default_chunks_per_camera(),
            chunk_duration_ms: default_chunk_duration_ms(),
            payload_bytes: default_payload_bytes(),
            gateways: default_gateways(),
            pacing: default_pacing(),
            payload_seed: 0,
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let plan: Self = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_file(path: &Path) -> Result<Self, BenchError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.camera_counts.is_empty() || self.camera_counts.contains(&0) {
            return Err(BenchError::Plan(
                "camera_counts must be non-empty and positive".into(),
            ));
        }
        if self.chunks_per_camera == 0 {
            return Err(BenchError::Plan("chunks_per_camera must be positive".into()));
        }
        if self.chunk_duration_ms == 0 {
            return Err(BenchError::Plan("chunk_duration_ms must be positive".into()));
        }
        if self.payload_bytes == 0 {
            return Err(BenchError::Plan("payload_bytes must be positive".into()));
        }
        if self.gateways == 0 {
            return Err(BenchError::Plan("gateways must be positive".into()));
        }
        Ok(())
    }
}

/// Aggregates for one camera-count row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowResult {
    pub camera_count: u32,
    pub txn_count: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub extract_ms: f64,
    pub store_ms: f64,
    pub sign_ms: f64,
    pub append_ms: f64,
    /// Camera sends that did not yield a transaction.
    pub errors: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<RowResult>,
    /// True when any row recorded failed transactions.
    pub dirty: bool,
}

impl ExperimentResult {
    pub fn row(&self, camera_count: u32) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.camera_count == camera_count)
    }
}

/// Nearest-rank percentile over an unsorted sample (p in 0..=100).
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(samples: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        sum += s;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// ---------------------------------------------------------------------------
// in-process cluster
// ---------------------------------------------------------------------------

/// Scratch directory under the system temp dir, removed on drop.
pub struct ScratchDir {
    path: PathBuf,
}

impl ScratchDir {
    pub fn new(prefix: &str) -> io::Result<Self> {
        use rand::RngCore;
        let mut tag = [0u8; 8];
        rand::rngs::OsRng.fill_bytes(&mut tag);
        let path = std::env::temp_dir().join(format!(
            "{prefix}-{}-{}",
            std::process::id(),
            hex::encode(tag)
        ));
        fs::create_dir_all(&path)?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for ScratchDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.path);
    }
}

/// Knobs for spinning up a local cluster.
#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub gateways: usize,
    pub max_faulty: usize,
    pub interval_ms: u64,
    pub consensus_timeout: Duration,
    pub hello_timeout: Duration,
    pub sync_poll_interval: Duration,
    pub tx_update_drop_percent: u8,
    pub drop_seed: u64,
    pub metrics: bool,
    pub journal: bool,
}

impl ClusterOptions {
    pub fn new(gateways: usize) -> Self {
        Self {
            gateways,
            max_faulty: gateways.saturating_sub(1) / 3,
            interval_ms: 10_000,
            consensus_timeout: Duration::from_millis(800),
            hello_timeout: Duration::from_secs(20),
            sync_poll_interval: Duration::from_millis(300),
            tx_update_drop_percent: 0,
            drop_seed: 0,
            metrics: true,
            journal: false,
        }
    }
}

/// One store service plus N gateways, all in-process on loopback ports.
pub struct LocalCluster {
    dir: ScratchDir,
    store: Option<CasServer>,
    store_addr: std::net::SocketAddr,
    store_root: PathBuf,
    pub gateways: Vec<GatewayNode>,
    options: ClusterOptions,
}

impl LocalCluster {
    pub fn start(options: ClusterOptions) -> Result<Self, BenchError> {
        let dir = ScratchDir::new("camchain-cluster")?;
        let store_root = dir.path().join("store");
        let store = CasServer::start(CasStore::open(&store_root)?, "127.0.0.1:0")?;
        let store_addr = store.local_addr();

        let identities: Vec<DeviceIdentity> = (0..options.gateways)
            .map(|_| DeviceIdentity::generate())
            .collect();
        let listeners: Vec<std::net::TcpListener> = (0..options.gateways)
            .map(|_| std::net::TcpListener::bind("127.0.0.1:0"))
            .collect::<io::Result<_>>()?;
        let peers: Vec<(crate::identity::PublicKey, String)> = identities
            .iter()
            .zip(&listeners)
            .map(|(id, l)| {
                (
                    id.public_key(),
                    l.local_addr().expect("bound").to_string(),
                )
            })
            .collect();

        let mut gateways = Vec::with_capacity(options.gateways);
        for (i, (identity, listener)) in identities.into_iter().zip(listeners).enumerate() {
            let config = GatewayConfig {
                identity,
                listen: peers[i].1.clone(),
                store: store_addr.to_string(),
                peers: peers.clone(),
                chunking: ChunkingConfig::new(options.interval_ms)
                    .map_err(|e| BenchError::Plan(e.to_string()))?,
                max_faulty: options.max_faulty,
                consensus_timeout: options.consensus_timeout,
                hello_timeout: options.hello_timeout,
                sync_poll_interval: options.sync_poll_interval,
                store_retry_backoff: Duration::from_millis(100),
                metrics_csv: options
                    .metrics
                    .then(|| dir.path().join(format!("metrics-gw{i}.csv"))),
                ledger_log: options
                    .journal
                    .then(|| dir.path().join(format!("gw{i}.ledger"))),
                tx_update_drop_percent: options.tx_update_drop_percent,
                drop_seed: options.drop_seed.wrapping_add(i as u64),
            };
            gateways.push(GatewayNode::start_with_listener(config, listener)?);
        }
        Ok(Self {
            dir,
            store: Some(store),
            store_addr,
            store_root,
            gateways,
            options,
        })
    }

    pub fn gateway_addr(&self, i: usize) -> String {
        self.gateways[i].local_addr().to_string()
    }

    pub fn store_addr(&self) -> String {
        self.store_addr.to_string()
    }

    pub fn store_root(&self) -> &Path {
        &self.store_root
    }

    pub fn scratch(&self) -> &Path {
        self.dir.path()
    }

    pub fn metrics_path(&self, i: usize) -> PathBuf {
        self.dir.path().join(format!("metrics-gw{i}.csv"))
    }

    pub fn journal_path(&self, i: usize) -> PathBuf {
        self.dir.path().join(format!("gw{i}.ledger"))
    }

    /// Takes the store offline (connections severed, port released).
    pub fn stop_store(&mut self) {
        if let Some(s) = self.store.take() {
            s.shutdown();
        }
    }

    /// Brings the store back on the same root and address.
    pub fn restart_store(&mut self) -> Result<(), BenchError> {
        let store = CasStore::open(&self.store_root)?;
        self.store = Some(CasServer::start(store, &self.store_addr.to_string())?);
        Ok(())
    }

    pub fn options(&self) -> &ClusterOptions {
        &self.options
    }
}

// ---------------------------------------------------------------------------
// experiment driver
// ---------------------------------------------------------------------------

/// Drives one camera: bootstrap, then stream `chunks` frames.
fn camera_thread(
    gateway_addr: String,
    plan: ExperimentPlan,
    camera_index: u32,
    errors: Arc<AtomicU64>,
) -> Result<u64, CameraError> {
    let camera = DeviceIdentity::generate().public_key();
    // Light stagger so simultaneous bootstraps do not all collide on the
    // same chain tip.
    std::thread::sleep(Duration::from_millis((camera_index as u64 % 16) * 7));
    let mut client = CameraClient::connect(&gateway_addr, camera, Duration::from_secs(60))?;
    let mut generator = ChunkGenerator::new(
        ChunkingConfig::new(plan.chunk_duration_ms).expect("validated plan"),
        plan.payload_bytes,
        plan.payload_seed ^ (camera_index as u64).wrapping_mul(0x9e37),
    );
    let mut sent = 0u64;
    for _ in 0..plan.chunks_per_camera {
        let frame = generator.next_chunk().encode();
        match client.send_chunk(&frame) {
            Ok(_) => sent += 1,
            Err(e) => {
                log::warn!("camera {camera_index}: chunk failed: {e}");
                errors.fetch_add(1, Ordering::Relaxed);
            }
        }
        if plan.pacing == Pacing::Realtime {
            std::thread::sleep(Duration::from_millis(plan.chunk_duration_ms));
        }
    }
    Ok(sent)
}

fn run_row(plan: &ExperimentPlan, camera_count: u32) -> Result<RowResult, BenchError> {
    let mut options = ClusterOptions::new(plan.gateways as usize);
    options.interval_ms = plan.chunk_duration_ms;
    let cluster = LocalCluster::start(options)?;

    let errors = Arc::new(AtomicU64::new(0));
    let mut handles = Vec::new();
    for cam in 0..camera_count {
        let addr = cluster.gateway_addr(cam as usize % plan.gateways as usize);
        let plan = plan.clone();
        let errors = errors.clone();
        handles.push(
            std::thread::Builder::new()
                .name(format!("camera-{cam}"))
                .spawn(move || camera_thread(addr, plan, cam, errors))?,
        );
    }
    for handle in handles {
        match handle.join() {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => return Err(e.into()),
            Err(_) => return Err(BenchError::Metrics("camera thread panicked".into())),
        }
    }

    // Managing gateways log one row per appended transaction.
    let mut timings: Vec<TxTiming> = Vec::new();
    for i in 0..plan.gateways as usize {
        let text = fs::read_to_string(cluster.metrics_path(i))?;
        timings.extend(parse_metrics_csv(&text).map_err(BenchError::Metrics)?);
    }
    let totals: Vec<f64> = timings.iter().map(|t| t.total_ms).collect();
    let row = RowResult {
        camera_count,
        txn_count: timings.len() as u64,
        mean_ms: mean(totals.iter().copied()),
        median_ms: percentile(&totals, 50.0),
        p95_ms: percentile(&totals, 95.0),
        extract_ms: mean(timings.iter().map(|t| t.extract_ms)),
        store_ms: mean(timings.iter().map(|t| t.store_ms)),
        sign_ms: mean(timings.iter().map(|t| t.sign_ms)),
        append_ms: mean(timings.iter().map(|t| t.append_ms)),
        errors: errors.load(Ordering::Relaxed),
    };
    drop(cluster); // shut gateways down and clean the scratch dir per row
    Ok(row)
}

/// Runs the whole plan, one fresh cluster per camera-count row.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResult, BenchError> {
    plan.validate()?;
    let mut rows = Vec::with_capacity(plan.camera_counts.len());
    for &count in &plan.camera_counts {
        log::info!("bench: running row with {count} cameras");
        rows.push(run_row(plan, count)?);
    }
    let dirty = rows.iter().any(|r| r.errors > 0);
    Ok(ExperimentResult { rows, dirty })
}

// ---------------------------------------------------------------------------
// result CSV
// ---------------------------------------------------------------------------

pub const RESULT_CSV_HEADER: &str =
    "camera_count,txn_count,mean_ms,median_ms,p95_ms,extract_ms,store_ms,sign_ms,append_ms";

pub fn result_csv(result: &ExperimentResult) -> String {
    let mut out = String::from(RESULT_CSV_HEADER);
    out.push('\n');
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
            r.camera_count,
            r.txn_count,
            r.mean_ms,
            r.median_ms,
            r.p95_ms,
            r.extract_ms,
            r.store_ms,
            r.sign_ms,
            r.append_ms
        ));
    }
    out
}

pub fn parse_result_csv(text: &str) -> Result<ExperimentResult, BenchError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULT_CSV_HEADER => {}
        other => {
            return Err(BenchError::ResultsParse(format!(
                "bad results header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(BenchError::ResultsParse(format!(
                "line {}: expected 9 fields",
                lineno + 2
            )));
        }
        let err = |what: &str| BenchError::ResultsParse(format!("line {}: bad {what}", lineno + 2));
        rows.push(RowResult {
            camera_count: f[0].parse().map_err(|_| err("camera_count"))?,
            txn_count: f[1].parse().map_err(|_| err("txn_count"))?,
            mean_ms: f[2].parse().map_err(|_| err("mean_ms"))?,
            median_ms: f[3].parse().map_err(|_| err("median_ms"))?,
            p95_ms: f[4].parse().map_err(|_| err("p95_ms"))?,
            extract_ms: f[5].parse().map_err(|_| err("extract_ms"))?,
            store_ms: f[6].parse().map_err(|_| err("store_ms"))?,
            sign_ms: f[7].parse().map_err(|_| err("sign_ms"))?,
            append_ms: f[8].parse().map_err(|_| err("append_ms"))?,
            errors: 0,
        });
    }
    Ok(ExperimentResult { rows, dirty: false })
}

// ---------------------------------------------------------------------------
// scaling summary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub camera_count: u32,
    pub mean_ms: f64,
    /// mean latency at this count over mean latency at the baseline count.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub baseline_count: u32,
    pub rows: Vec<ScalingRow>,
}

/// Latency ratios against the row with `baseline_count` cameras, sorted by
/// camera count for trend inspection.
pub fn summarize(result: &ExperimentResult, baseline_count: u32) -> Result<ScalingTable, BenchError> {
    let baseline = result
        .row(baseline_count)
        .ok_or(BenchError::MissingBaseline(baseline_count))?;
    let base = baseline.mean_ms;
    let mut rows: Vec<ScalingRow> = result
        .rows
        .iter()
        .map(|r| ScalingRow {
            camera_count: r.camera_count,
            mean_ms: r.mean_ms,
            ratio: if base > 0.0 { r.mean_ms / base } else { f64::NAN },
        })
        .collect();
    rows.sort_by_key(|r| r.camera_count);
    Ok(ScalingTable {
        baseline_count,
        rows,
    })
}

pub fn render_scaling_table(table: &ScalingTable) -> String {
    let mut out = format!(
        "cameras    mean_ms    ratio(vs {} cameras)\n",
        table.baseline_count
    );
    for r in &table.rows {
        out.push_str(&format!(
            "{:<10} {:<10.3} {:.3}\n",
            r.camera_count, r.mean_ms, r.ratio
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// SVG plot
// ---------------------------------------------------------------------------

/// Renders mean latency against camera count as a standalone SVG document.
pub fn plot_svg(result: &ExperimentResult) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 60.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let mut rows: Vec<&RowResult> = result.rows.iter().collect();
    rows.sort_by_key(|r| r.camera_count);
    let max_y = rows
        .iter()
        .map(|r| r.mean_ms)
        .fold(1.0f64, f64::max)
        .ceil();
    let max_x = rows.last().map(|r| r.camera_count).unwrap_or(1) as f64;

    let x_of = |count: f64| ml + (count / max_x) * plot_w;
    let y_of = |ms: f64| mt + plot_h - (ms / max_y) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">Mean transaction creation time vs cameras</text>\n",
        w / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        w - mr,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    // y ticks
    for i in 0..=4 {
        let v = max_y * i as f64 / 4.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.1}</text>\n",
            ml - 8.0,
            y + 4.0
        ));
    }
    // x ticks at the measured counts
    for r in &rows {
        let x = x_of(r.camera_count as f64);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            mt + plot_h,
            mt + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            mt + plot_h + 18.0,
            r.camera_count
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">cameras</text>\n",
        ml + plot_w / 2.0,
        h - 15.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">mean ms</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));
    // polyline + points
    if !rows.is_empty() {
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", x_of(r.camera_count as f64), y_of(r.mean_ms)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for r in &rows {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"#1f77b4\"/>\n",
                x_of(r.camera_count as f64),
                y_of(r.mean_ms)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_matches_experiment_shape() {
        let plan = ExperimentPlan::default();
        assert_eq!(plan.camera_counts, vec![1, 2, 4, 8, 16, 32]);
        assert_eq!(plan.chunks_per_camera, 180);
        assert_eq!(plan.chunk_duration_ms, 10_000);
        assert_eq!(plan.gateways, 4);
        plan.validate().unwrap();
    }

    #[test]
    fn zero_fields_rejected() {
        let mut plan = ExperimentPlan::default();
        plan.chunks_per_camera = 0;
        assert!(matches!(plan.validate(), Err(BenchError::Plan(_))));
        let mut plan = ExperimentPlan::default();
        plan.camera_counts = vec![2, 0];
        assert!(plan.validate().is_err());
    }

    #[test]
    fn plan_toml_roundtrip_with_defaults() {
        let plan = ExperimentPlan::from_toml("camera_counts = [1, 2]\npayload_bytes = 1024\n")
            .unwrap();
        assert_eq!(plan.camera_counts, vec![1, 2]);
        assert_eq!(plan.payload_bytes, 1024);
        assert_eq!(plan.chunks_per_camera, 180);
        assert!(ExperimentPlan::from_toml("pacing = \"sideways\"").is_err());
    }

    #[test]
    fn percentile_nearest_rank() {
        let s = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(percentile(&s, 50.0), 5.0);
        assert_eq!(percentile(&s, 95.0), 10.0);
        assert_eq!(percentile(&s, 100.0), 10.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn result_csv_roundtrip() {
        let result = ExperimentResult {
            rows: vec![RowResult {
                camera_count: 2,
                txn_count: 360,
                mean_ms: 1.5,
                median_ms: 1.25,
                p95_ms: 3.0,
                extract_ms: 0.5,
                store_ms: 0.75,
                sign_ms: 0.05,
                append_ms: 0.2,
                errors: 0,
            }],
            dirty: false,
        };
        let text = result_csv(&result);
        let parsed = parse_result_csv(&text).unwrap();
        assert_eq!(parsed.rows.len(), 1);
        assert_eq!(parsed.rows[0].camera_count, 2);
        assert_eq!(parsed.rows[0].txn_count, 360);
        assert!((parsed.rows[0].p95_ms - 3.0).abs() < 1e-9);
    }

    #[test]
    fn summarize_ratios_and_missing_baseline() {
        let result = ExperimentResult {
            rows: vec![
                RowResult {
                    camera_count: 4,
                    txn_count: 0,
                    mean_ms: 3.0,
                    median_ms: 0.0,
                    p95_ms: 0.0,
                    extract_ms: 0.0,
                    store_ms: 0.0,
                    sign_ms: 0.0,
                    append_ms: 0.0,
                    errors: 0,
                },
                RowResult {
                    camera_count: 1,
                    txn_count: 0,
                    mean_ms: 2.0,
                    median_ms: 0.0,
                    p95_ms: 0.0,
                    extract_ms: 0.0,
                    store_ms: 0.0,
                    sign_ms: 0.0,
                    append_ms: 0.0,
                    errors: 0,
                },
            ],
            dirty: false,
        };
        let table = summarize(&result, 1).unwrap();
        assert_eq!(table.rows[0].camera_count, 1);
        assert!((table.rows[0].ratio - 1.0).abs() < 1e-12);
        assert!((table.rows[1].ratio - 1.5).abs() < 1e-12);
        assert!(matches!(
            summarize(&result, 8),
            Err(BenchError::MissingBaseline(8))
        ));
    }

    #[test]
    fn svg_plot_is_wellformed_enough() {
        let result = parse_result_csv(&format!(
            "{RESULT_CSV_HEADER}\n1,180,2.0,1.8,3.5,0.6,1.0,0.05,0.2\n8,1440,2.4,2.1,4.0,0.6,1.2,0.05,0.25\n"
        ))
        .unwrap();
        let svg = plot_svg(&result);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("polyline"));
    }

    #[test]
    fn tiny_experiment_end_to_end() {
        let plan = ExperimentPlan {
            camera_counts: vec![2],
            chunks_per_camera: 3,
            chunk_duration_ms: 10_000,
            payload_bytes: 2048,
            gateways: 4,
            pacing: Pacing::MaxRate,
            payload_seed: 11,
        };
        let result = run_experiment(&plan).unwrap();
        assert_eq!(result.rows.len(), 1);
        let row = &result.rows[0];
        assert_eq!(row.txn_count, 6, "2 cameras x 3 chunks");
        assert_eq!(row.errors, 0);
        assert!(!result.dirty);
        assert!(row.mean_ms > 0.0);
    }
}
