//! The gateway node: accepts camera streams, runs bootstrap consensus with
//! peer gateways, executes the four per-chunk steps (extract metadata,
//! store chunk, sign transaction, append + notify peers), and keeps its
//! ledger replica synchronized.
//!
//! Threading: one listener thread accepts connections; each connection
//! gets its own handler thread (camera sessions and inbound peer links
//! look the same at this layer). A single ticker thread sweeps consensus
//! timeouts and drives the periodic sync poll. Outbound peer traffic runs
//! on one sender thread per peer (see [`super::peer::PeerLink`]).
//!
//! Locking: the consensus hub mutex may acquire ledger locks; ledger code
//! never takes the hub. Appends are serialized per device block through
//! [`SharedLedger::append_lock`], while sessions for different cameras
//! proceed in parallel.

use std::collections::{BTreeMap, HashMap};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock, RwLockReadGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cas::{CasClient, ClientError};
use crate::chunk::{extract_metadata, hash_metadata, parse_chunk};
use crate::consensus::{ConsensusConfig, ConsensusInstance, ConsensusMessage, Phase};
use crate::identity::PublicKey;
use crate::ledger::{
    codec::LedgerLogWriter, validate_ledger, CertificateEntry, Ledger, LedgerError, Transaction,
    TransactionPayload,
};
use crate::wire::{self, op, Frame, WireError};

use super::config::GatewayConfig;
use super::metrics::{MetricsWriter, TxTiming};
use super::peer::{PeerLink, PeerMessage, PeerPayload, SYNC_BATCH_LIMIT};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_millis() as u64
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
    #[error(transparent)]
    Consensus(#[from] crate::consensus::ConsensusError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// counters
// ---------------------------------------------------------------------------

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        #[derive(Default)]
        struct Counters {
            $($name: AtomicU64,)*
        }

        /// Point-in-time sample of the node's event counters.
        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
        pub struct CounterSnapshot {
            $(pub $name: u64,)*
        }

        impl Counters {
            fn snapshot(&self) -> CounterSnapshot {
                CounterSnapshot {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                }
            }
        }
    };
}

counters!(
    proposals_started,
    blocks_inserted,
    block_insert_failures,
    consensus_timeouts,
    consensus_rejects,
    peer_messages_rejected,
    invalid_tx_updates,
    duplicate_tx_updates,
    tx_updates_applied,
    tx_updates_sent,
    injected_tx_drops,
    sync_requests_sent,
    sync_responses_sent,
    sync_blocks_admitted,
    certificate_merges,
    chunks_processed,
    chunks_rejected,
    store_retries,
);

macro_rules! bump {
    ($inner:expr, $field:ident) => {
        $inner.counters.$field.fetch_add(1, Ordering::Relaxed)
    };
}

// ---------------------------------------------------------------------------
// shared ledger
// ---------------------------------------------------------------------------

/// Concurrency wrapper: many readers, short write sections, and a per-device
/// append mutex so each block has a single writer while different blocks
/// append in parallel.
pub struct SharedLedger {
    inner: RwLock<Ledger>,
    append_locks: Mutex<HashMap<PublicKey, Arc<Mutex<()>>>>,
}

impl SharedLedger {
    fn new(ledger: Ledger) -> Self {
        Self {
            inner: RwLock::new(ledger),
            append_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Ledger> {
        self.inner.read().unwrap()
    }

    fn append_lock(&self, device: PublicKey) -> Arc<Mutex<()>> {
        self.append_locks
            .lock()
            .unwrap()
            .entry(device)
            .or_default()
            .clone()
    }

    fn insert_block(&self, header: crate::ledger::BlockHeader) -> Result<(), LedgerError> {
        self.inner.write().unwrap().insert_block(header)
    }

    fn apply_replica(&self, device: &PublicKey, tx: Transaction) -> Result<(), LedgerError> {
        self.inner.write().unwrap().apply_replica_transaction(device, tx)
    }

    /// Merges certificate entries, returning the ones actually added.
    fn merge_certificate(
        &self,
        device: &PublicKey,
        entries: &[CertificateEntry],
    ) -> Result<Vec<CertificateEntry>, LedgerError> {
        let mut ledger = self.inner.write().unwrap();
        let before: Vec<PublicKey> = ledger
            .find_block(device)
            .map(|b| b.header().consensus_certificate.iter().map(|e| e.gateway).collect())
            .unwrap_or_default();
        ledger.merge_certificate(device, entries)?;
        let added = ledger
            .find_block(device)
            .map(|b| {
                b.header()
                    .consensus_certificate
                    .iter()
                    .filter(|e| !before.contains(&e.gateway))
                    .copied()
                    .collect()
            })
            .unwrap_or_default();
        Ok(added)
    }
}

// ---------------------------------------------------------------------------
// consensus hub
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WaitState {
    Pending,
    Decided,
    Failed,
}

struct BootstrapWaiter {
    state: Mutex<WaitState>,
    cond: Condvar,
}

impl BootstrapWaiter {
    fn new() -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(WaitState::Pending),
            cond: Condvar::new(),
        })
    }

    fn notify(&self, state: WaitState) {
        *self.state.lock().unwrap() = state;
        self.cond.notify_all();
    }

    fn wait_until(&self, deadline: Instant) -> WaitState {
        let mut guard = self.state.lock().unwrap();
        loop {
            if *guard != WaitState::Pending {
                return *guard;
            }
            let now = Instant::now();
            if now >= deadline {
                return *guard;
            }
            let (g, _) = self.cond.wait_timeout(guard, deadline - now).unwrap();
            guard = g;
        }
    }
}

struct InstanceSlot {
    instance: ConsensusInstance,
    deadline: Instant,
    waiter: Arc<BootstrapWaiter>,
    /// The tip this proposal chains from; keys the commit promise.
    prev_hash: [u8; 32],
    decided: bool,
    decided_at: Option<Instant>,
}

/// All in-flight and recently decided consensus state.
struct ConsensusHub {
    instances: HashMap<PublicKey, InstanceSlot>,
    /// header_hash -> device, learned from proposals; retained for decided
    /// instances so late commit votes can still find their block.
    route: HashMap<[u8; 32], PublicKey>,
    /// previous_header_hash -> device currently granted the right to chain
    /// there. One live proposal per tip keeps the chain linear.
    tip_promise: HashMap<[u8; 32], PublicKey>,
    /// device -> announced proposer, from HELLO_ANNOUNCE.
    announced: HashMap<PublicKey, PublicKey>,
    /// Votes that arrived before their proposal; drained on admission.
    early_votes: HashMap<[u8; 32], Vec<(Instant, ConsensusMessage)>>,
}

const DECIDED_SLOT_GRACE: Duration = Duration::from_secs(10);
const EARLY_VOTE_TTL: Duration = Duration::from_secs(10);
const MAX_EARLY_VOTE_HASHES: usize = 128;

impl ConsensusHub {
    fn new() -> Self {
        Self {
            instances: HashMap::new(),
            route: HashMap::new(),
            tip_promise: HashMap::new(),
            announced: HashMap::new(),
            early_votes: HashMap::new(),
        }
    }

    fn bank_early_vote(&mut self, msg: ConsensusMessage) -> bool {
        if !self.early_votes.contains_key(&msg.header_hash)
            && self.early_votes.len() >= MAX_EARLY_VOTE_HASHES
        {
            return false;
        }
        let bucket = self.early_votes.entry(msg.header_hash).or_default();
        if bucket.len() >= 64 {
            return false;
        }
        bucket.push((Instant::now(), msg));
        true
    }
}

/// Consequences of hub work that must happen after bookkeeping: messages
/// to broadcast and waiters to wake are both fine to run under the hub
/// lock, but this keeps the flow explicit.
#[derive(Default)]
struct Effects {
    broadcast: Vec<PeerPayload>,
}

// ---------------------------------------------------------------------------
// node
// ---------------------------------------------------------------------------

struct NodeInner {
    config: GatewayConfig,
    consensus_config: ConsensusConfig,
    ledger: SharedLedger,
    hub: Mutex<ConsensusHub>,
    peers: Vec<PeerLink>,
    metrics: MetricsWriter,
    journal: Option<Mutex<LedgerLogWriter>>,
    sync: Mutex<SyncState>,
    counters: Counters,
    drop_rng: Mutex<ChaCha8Rng>,
    jitter_rng: Mutex<ChaCha8Rng>,
    shutdown: Arc<AtomicBool>,
    conns: Mutex<Vec<TcpStream>>,
    local_addr: SocketAddr,
}

#[derive(Default)]
struct SyncState {
    /// Out-of-order transactions waiting for their predecessors.
    buffered: HashMap<PublicKey, BTreeMap<u64, Transaction>>,
    /// Last reactive sync request per device, for rate limiting.
    last_request: HashMap<PublicKey, Instant>,
}

const MAX_BUFFERED_TXS_PER_DEVICE: usize = 8192;
const SYNC_REQUEST_MIN_GAP: Duration = Duration::from_millis(150);

/// A running gateway. Dropping it (or calling [`shutdown`](Self::shutdown))
/// stops all threads and closes the listener.
pub struct GatewayNode {
    inner: Arc<NodeInner>,
    threads: Vec<JoinHandle<()>>,
}

impl GatewayNode {
    pub fn start(config: GatewayConfig) -> Result<Self, GatewayError> {
        let listener = TcpListener::bind(&config.listen)?;
        Self::start_with_listener(config, listener)
    }

    /// Two-phase start used when peer addresses must be known before the
    /// node runs: bind all listeners first, then start each node.
    pub fn start_with_listener(
        config: GatewayConfig,
        listener: TcpListener,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let consensus_config = config.consensus_config()?;
        let local_addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));

        let me = config.identity.public_key();
        let peers: Vec<PeerLink> = config
            .peers
            .iter()
            .filter(|(pk, _)| *pk != me)
            .map(|(pk, addr)| PeerLink::spawn(*pk, addr.clone(), shutdown.clone()))
            .collect();

        let ledger = Ledger::new(consensus_config.clone());
        let journal = match &config.ledger_log {
            Some(path) => Some(Mutex::new(LedgerLogWriter::create(path, &consensus_config)?)),
            None => None,
        };
        let metrics = MetricsWriter::create(config.metrics_csv.as_deref())?;
        let drop_seed = config.drop_seed;

        let inner = Arc::new(NodeInner {
            consensus_config,
            ledger: SharedLedger::new(ledger),
            hub: Mutex::new(ConsensusHub::new()),
            peers,
            metrics,
            journal,
            sync: Mutex::new(SyncState::default()),
            counters: Counters::default(),
            drop_rng: Mutex::new(ChaCha8Rng::seed_from_u64(drop_seed)),
            jitter_rng: Mutex::new(ChaCha8Rng::seed_from_u64(drop_seed ^ 0x9e3779b97f4a7c15)),
            shutdown: shutdown.clone(),
            conns: Mutex::new(Vec::new()),
            local_addr,
            config,
        });

        let mut threads = Vec::new();
        {
            let inner = inner.clone();
            threads.push(
                std::thread::Builder::new()
                    .name("gw-accept".into())
                    .spawn(move || accept_loop(inner, listener))?,
            );
        }
        {
            let inner = inner.clone();
            threads.push(
                std::thread::Builder::new()
                    .name("gw-ticker".into())
                    .spawn(move || ticker_loop(inner))?,
            );
        }
        info!(
            "gateway {} listening on {}",
            &inner.config.identity.device_id()[..8],
            local_addr
        );
        Ok(Self { inner, threads })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr
    }

    pub fn public_key(&self) -> PublicKey {
        self.inner.config.identity.public_key()
    }

    /// Clone of the current ledger state (consistent snapshot).
    pub fn ledger_snapshot(&self) -> Ledger {
        self.inner.ledger.read().clone()
    }

    /// Canonical serialization of the current ledger.
    pub fn export_ledger(&self) -> Vec<u8> {
        self.inner.ledger.read().canonical_bytes()
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.inner.counters.snapshot()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.inner.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.inner.local_addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        for conn in self.inner.conns.lock().unwrap().drain(..) {
            let _ = conn.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl Drop for GatewayNode {
    fn drop(&mut self) {
        self.stop();
    }
}

// ---------------------------------------------------------------------------
// threads
// ---------------------------------------------------------------------------

fn accept_loop(inner: Arc<NodeInner>, listener: TcpListener) {
    for conn in listener.incoming() {
        if inner.shutdown.load(Ordering::SeqCst) {
            return;
        }
        match conn {
            Ok(stream) => {
                if let Ok(handle) = stream.try_clone() {
                    inner.conns.lock().unwrap().push(handle);
                }
                let inner = inner.clone();
                let _ = std::thread::Builder::new()
                    .name("gw-conn".into())
                    .spawn(move || connection_loop(inner, stream));
            }
            Err(e) => warn!("gateway accept error: {e}"),
        }
    }
}

fn ticker_loop(inner: Arc<NodeInner>) {
    let mut last_poll = Instant::now();
    loop {
        if inner.shutdown.load(Ordering::SeqCst) {
            return;
        }
        std::thread::sleep(Duration::from_millis(50));
        inner.sweep_consensus();
        if last_poll.elapsed() >= inner.config.sync_poll_interval {
            last_poll = Instant::now();
            inner.sync_poll();
        }
    }
}

/// Per-connection server loop. Cameras, peers, and export clients all
/// arrive here; the frames tell them apart.
fn connection_loop(inner: Arc<NodeInner>, stream: TcpStream) {
    stream.set_nodelay(true).ok();
    let mut reader = match stream.try_clone() {
        Ok(r) => r,
        Err(_) => return,
    };
    let mut writer = stream;
    // Camera session state for this connection.
    let mut camera: Option<PublicKey> = None;
    let mut acked = false;
    let mut store: Option<CasClient> = None;

    loop {
        let frame = match wire::read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Closed) => return,
            Err(e) => {
                debug!("gateway connection dropped: {e}");
                return;
            }
        };
        let ok = match frame.opcode {
            op::GW_HELLO => {
                let result = handle_hello(&inner, &frame, &mut camera, &mut acked, &mut writer);
                result
            }
            op::GW_CHUNK => {
                if !acked || camera.is_none() {
                    // Streaming before the bootstrap acknowledgment closes
                    // the session.
                    return;
                }
                let cam = camera.unwrap();
                let store =
                    store.get_or_insert_with(|| CasClient::new(inner.config.store.clone()));
                match inner.process_chunk(store, &cam, &frame.body) {
                    Ok((seq, hash)) => {
                        let mut body = seq.to_be_bytes().to_vec();
                        body.extend_from_slice(&hash);
                        wire::write_frame(&mut writer, op::GW_CHUNK_OK, &body)
                    }
                    Err(ChunkProcessError::ShuttingDown) => return,
                    Err(e) => {
                        bump!(inner, chunks_rejected);
                        wire::write_frame(&mut writer, op::GW_CHUNK_ERR, e.to_string().as_bytes())
                    }
                }
            }
            op::GW_PEER => {
                inner.on_peer_frame(&frame.body);
                Ok(())
            }
            op::GW_EXPORT_LEDGER => {
                let bytes = inner.ledger.read().canonical_bytes();
                wire::write_frame(&mut writer, op::GW_LEDGER, &bytes)
            }
            other => {
                debug!("gateway: unknown opcode {other:#04x}, closing");
                return;
            }
        };
        if ok.is_err() {
            return;
        }
    }
}

fn handle_hello(
    inner: &Arc<NodeInner>,
    frame: &Frame,
    camera: &mut Option<PublicKey>,
    acked: &mut bool,
    writer: &mut TcpStream,
) -> std::io::Result<()> {
    let Ok(pk) = PublicKey::from_slice(&frame.body) else {
        return wire::write_frame(
            writer,
            op::GW_HELLO_RETRY,
            &retry_body(1_000, "hello must carry a 32-byte camera public key"),
        );
    };
    *camera = Some(pk);
    match inner.bootstrap_camera(pk) {
        Ok(()) => {
            *acked = true;
            wire::write_frame(writer, op::GW_HELLO_OK, &[])
        }
        Err(hint) => {
            *acked = false;
            let retry_ms = 300 + inner.jitter(400);
            wire::write_frame(writer, op::GW_HELLO_RETRY, &retry_body(retry_ms, &hint))
        }
    }
}

fn retry_body(retry_ms: u32, hint: &str) -> Vec<u8> {
    let mut body = retry_ms.to_be_bytes().to_vec();
    body.extend_from_slice(hint.as_bytes());
    body
}

// ---------------------------------------------------------------------------
// chunk pipeline (steps 1-4)
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
enum ChunkProcessError {
    #[error("camera is not bootstrapped")]
    NotBootstrapped,
    #[error("camera is managed by a different gateway")]
    NotManaged,
    #[error("chunk rejected: {0}")]
    BadChunk(#[from] crate::chunk::ChunkError),
    #[error("store rejected chunk: {0}")]
    StoreRejected(String),
    #[error("ledger append failed: {0}")]
    Append(#[from] LedgerError),
    #[error("gateway is shutting down")]
    ShuttingDown,
}

impl NodeInner {
    fn public_key(&self) -> PublicKey {
        self.config.identity.public_key()
    }

    fn jitter(&self, spread_ms: u32) -> u32 {
        self.jitter_rng.lock().unwrap().gen_range(0..spread_ms.max(1))
    }

    /// Steps 1-4 for one received chunk frame. Returns the appended
    /// transaction's coordinates for the camera acknowledgment.
    fn process_chunk(
        &self,
        store: &mut CasClient,
        camera: &PublicKey,
        frame: &[u8],
    ) -> Result<(u64, [u8; 32]), ChunkProcessError> {
        let t0 = Instant::now();
        {
            let ledger = self.ledger.read();
            let block = ledger
                .find_block(camera)
                .ok_or(ChunkProcessError::NotBootstrapped)?;
            if block.header().managing_gateway != self.public_key() {
                return Err(ChunkProcessError::NotManaged);
            }
        }

        // Step 1: metadata extraction and the metadata hash.
        let chunk = parse_chunk(frame)?;
        let metadata_hash = hash_metadata(&extract_metadata(&chunk));
        let t1 = Instant::now();

        // Step 2: push the full container frame to the store. An
        // unreachable store buffers the chunk right here: the session
        // retries in order and no transaction exists until the bytes are
        // stored, so the ledger can never reference a dangling address.
        let storage_address = loop {
            match store.put(frame) {
                Ok(addr) => break addr,
                Err(ClientError::Unreachable(e)) => {
                    if self.shutdown.load(Ordering::SeqCst) {
                        return Err(ChunkProcessError::ShuttingDown);
                    }
                    bump!(self, store_retries);
                    debug!("store unreachable, retrying: {e}");
                    std::thread::sleep(self.config.store_retry_backoff);
                }
                Err(e) => return Err(ChunkProcessError::StoreRejected(e.to_string())),
            }
        };
        let t2 = Instant::now();

        // Step 3: build and sign the transaction under the per-device
        // append lock so sequence numbers never race.
        let lock = self.ledger.append_lock(*camera);
        let _append_guard = lock.lock().unwrap();
        let (prev, seq, last_ts) = {
            let ledger = self.ledger.read();
            let block = ledger
                .find_block(camera)
                .ok_or(ChunkProcessError::NotBootstrapped)?;
            (
                block.tip_transaction_hash(),
                block.next_sequence(),
                block.last_timestamp(),
            )
        };
        // Clamp against the block's last timestamp so a clock step back
        // never violates per-block monotonicity.
        let timestamp = now_ms().max(last_ts.unwrap_or(0));
        let payload = TransactionPayload {
            storage_address,
            metadata_hash,
            timestamp,
        };
        let tx = Transaction::build(prev, seq, payload, &self.config.identity)
            .map_err(LedgerError::from)?;
        let t3 = Instant::now();

        // Step 4: append locally, journal, notify peers.
        self.ledger.apply_replica(camera, tx.clone())?;
        self.journal_transaction(camera, &tx);
        self.broadcast(PeerPayload::TxUpdate {
            device: *camera,
            transaction: tx.clone(),
        });
        let t4 = Instant::now();

        self.metrics.record(&TxTiming {
            camera: *camera,
            sequence: seq,
            extract_ms: ms(t0, t1),
            store_ms: ms(t1, t2),
            sign_ms: ms(t2, t3),
            append_ms: ms(t3, t4),
            total_ms: ms(t0, t4),
        });
        bump!(self, chunks_processed);
        Ok((seq, tx.transaction_hash))
    }

    // -----------------------------------------------------------------
    // bootstrap consensus
    // -----------------------------------------------------------------

    /// Blocks until `camera` has a certified block (proposing if nobody
    /// else is) or the hello deadline passes.
    fn bootstrap_camera(&self, camera: PublicKey) -> Result<(), String> {
        let deadline = Instant::now() + self.config.hello_timeout;
        loop {
            if self.ledger.read().find_block(&camera).is_some() {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err("bootstrap consensus did not complete in time".into());
            }

            let plan = {
                let mut hub = self.hub.lock().unwrap();
                if let Some(slot) = hub.instances.get(&camera) {
                    BootstrapPlan::Wait(slot.waiter.clone(), slot.deadline)
                } else {
                    let tip = self.ledger.read().tip_hash();
                    let promise_free = match hub.tip_promise.get(&tip) {
                        None => true,
                        Some(d) => *d == camera,
                    };
                    if !promise_free {
                        BootstrapPlan::Busy
                    } else {
                        match self.start_proposal(&mut hub, camera) {
                            Ok(plan) => plan,
                            Err(e) => return Err(format!("cannot propose: {e}")),
                        }
                    }
                }
            };
            match plan {
                BootstrapPlan::Wait(waiter, instance_deadline) => {
                    let until = (instance_deadline + Duration::from_millis(20)).min(deadline);
                    match waiter.wait_until(until) {
                        WaitState::Decided => {} // loop re-checks the ledger
                        WaitState::Failed | WaitState::Pending => {
                            // Timed out or lost a race: retry with jitter.
                            std::thread::sleep(Duration::from_millis(self.jitter(25) as u64));
                        }
                    }
                }
                BootstrapPlan::Busy => {
                    std::thread::sleep(Duration::from_millis((10 + self.jitter(30)) as u64));
                }
            }
        }
    }

    /// Creates the local instance, proposes, and broadcasts the announce
    /// plus the consensus opening. Caller holds the hub lock and has
    /// checked the tip promise.
    fn start_proposal(
        &self,
        hub: &mut ConsensusHub,
        camera: PublicKey,
    ) -> Result<BootstrapPlan, String> {
        let header = match self.ledger.read().build_block_header(
            camera,
            now_ms(),
            self.public_key(),
        ) {
            Ok(h) => h,
            Err(LedgerError::DuplicateDevice(_)) => {
                // Raced with an insert; the caller's loop will see it.
                return Ok(BootstrapPlan::Busy);
            }
            Err(e) => return Err(e.to_string()),
        };
        let prev_hash = header.previous_header_hash;
        let hash = header.header_hash();
        let mut instance = ConsensusInstance::new(
            self.consensus_config.clone(),
            camera,
            self.config.identity.clone(),
        )
        .map_err(|e| e.to_string())?;
        let msgs = instance.propose(header).map_err(|e| e.to_string())?;
        bump!(self, proposals_started);

        let waiter = BootstrapWaiter::new();
        let slot = InstanceSlot {
            instance,
            deadline: Instant::now() + self.config.consensus_timeout,
            waiter: waiter.clone(),
            prev_hash,
            decided: false,
            decided_at: None,
        };
        let instance_deadline = slot.deadline;
        hub.instances.insert(camera, slot);
        hub.route.insert(hash, camera);
        hub.tip_promise.insert(prev_hash, camera);

        let mut effects = Effects::default();
        effects
            .broadcast
            .push(PeerPayload::HelloAnnounce { camera });
        for m in msgs {
            effects.broadcast.push(PeerPayload::Consensus(m));
        }
        // Single-gateway clusters decide inside propose() itself.
        self.check_instance_decision(hub, camera, &mut effects);
        // Banked votes may already complete this instance (e.g. replays).
        self.drain_early_votes(hub, camera, hash, &mut effects);
        self.send_effects(effects);
        Ok(BootstrapPlan::Wait(waiter, instance_deadline))
    }

    fn drain_early_votes(
        &self,
        hub: &mut ConsensusHub,
        device: PublicKey,
        hash: [u8; 32],
        effects: &mut Effects,
    ) {
        let Some(banked) = hub.early_votes.remove(&hash) else {
            return;
        };
        for (_, msg) in banked {
            self.feed_instance(hub, device, &msg, effects);
        }
    }

    /// Runs one message through a device's instance and handles decision
    /// and certificate growth. Caller holds the hub lock.
    fn feed_instance(
        &self,
        hub: &mut ConsensusHub,
        device: PublicKey,
        msg: &ConsensusMessage,
        effects: &mut Effects,
    ) {
        let Some(slot) = hub.instances.get_mut(&device) else {
            return;
        };
        let outcome = slot.instance.step(msg);
        for m in outcome.outbound {
            effects.broadcast.push(PeerPayload::Consensus(m));
        }
        if outcome.decided.is_some() || outcome.certificate_grew {
            self.check_instance_decision(hub, device, effects);
        }
    }

    /// Inspects an instance for a fresh decision (inserting the block) or
    /// certificate growth (merging the extra votes).
    fn check_instance_decision(
        &self,
        hub: &mut ConsensusHub,
        device: PublicKey,
        _effects: &mut Effects,
    ) {
        let Some(slot) = hub.instances.get_mut(&device) else {
            return;
        };
        if !slot.instance.is_decided() {
            return;
        }
        if !slot.decided {
            // Fresh decision: admit the block.
            slot.decided = true;
            slot.decided_at = Some(Instant::now());
            let header = slot
                .instance
                .certified_header()
                .expect("decided instance has a header");
            hub.tip_promise.remove(&slot.prev_hash);
            hub.announced.remove(&device);
            let waiter = slot.waiter.clone();
            match self.ledger.insert_block(header.clone()) {
                Ok(()) => {
                    self.journal_header(&header);
                    bump!(self, blocks_inserted);
                    waiter.notify(WaitState::Decided);
                    debug!(
                        "gateway {}: admitted block for device {}",
                        &self.config.identity.device_id()[..8],
                        &device.to_hex()[..8]
                    );
                }
                Err(e) => {
                    warn!("decided block failed insertion: {e}");
                    bump!(self, block_insert_failures);
                    waiter.notify(WaitState::Failed);
                    hub.route.remove(&header.header_hash());
                    hub.instances.remove(&device);
                }
            }
        } else {
            // Already inserted: fold any late commit votes into the
            // stored certificate.
            let entries = slot.instance.certificate();
            match self.ledger.merge_certificate(&device, &entries) {
                Ok(added) if !added.is_empty() => {
                    bump!(self, certificate_merges);
                    for entry in added {
                        self.journal_cert_entry(&device, &entry);
                    }
                }
                _ => {}
            }
        }
    }

    /// Gate for a remote `PRE_PREPARE`: admit only proposals for unknown
    /// devices that chain from our current tip where no other live
    /// proposal holds that tip.
    fn admit_pre_prepare(&self, hub: &mut ConsensusHub, msg: &ConsensusMessage) -> bool {
        let Some(header) = &msg.proposed_header else {
            return false;
        };
        let device = header.device_public_key;
        {
            let ledger = self.ledger.read();
            if let Some(existing) = ledger.find_block(&device) {
                // Replay of an admitted block's proposal is harmless noise;
                // anything else is rejected.
                return existing.header_hash() == msg.header_hash;
            }
            if header.previous_header_hash != ledger.tip_hash() {
                return false;
            }
        }
        if let Some(announced) = hub.announced.get(&device) {
            if *announced != msg.sender {
                return false;
            }
        }
        match hub.tip_promise.get(&header.previous_header_hash) {
            Some(d) if *d != device => false,
            _ => {
                hub.tip_promise
                    .insert(header.previous_header_hash, device);
                true
            }
        }
    }

    fn handle_consensus(&self, envelope_sender: PublicKey, msg: ConsensusMessage) {
        if msg.sender != envelope_sender
            || !self.consensus_config.contains(&msg.sender)
            || !msg.verify_signature()
        {
            bump!(self, consensus_rejects);
            return;
        }
        let mut effects = Effects::default();
        {
            let mut hub = self.hub.lock().unwrap();
            match msg.phase {
                Phase::PrePrepare => {
                    let device = msg
                        .proposed_header
                        .as_ref()
                        .map(|h| h.device_public_key);
                    let Some(device) = device else {
                        bump!(self, consensus_rejects);
                        return;
                    };
                    // A stale undecided instance blocks its own proposer's
                    // retry; expire it inline instead of waiting a tick.
                    let stale = hub
                        .instances
                        .get(&device)
                        .is_some_and(|s| !s.decided && Instant::now() >= s.deadline);
                    if stale {
                        self.expire_slot(&mut hub, device);
                    }
                    if !hub.instances.contains_key(&device) {
                        if !self.admit_pre_prepare(&mut hub, &msg) {
                            bump!(self, consensus_rejects);
                            return;
                        }
                        let instance = match ConsensusInstance::new(
                            self.consensus_config.clone(),
                            device,
                            self.config.identity.clone(),
                        ) {
                            Ok(i) => i,
                            Err(_) => return,
                        };
                        hub.instances.insert(
                            device,
                            InstanceSlot {
                                instance,
                                deadline: Instant::now() + self.config.consensus_timeout,
                                waiter: BootstrapWaiter::new(),
                                prev_hash: msg
                                    .proposed_header
                                    .as_ref()
                                    .expect("checked above")
                                    .previous_header_hash,
                                decided: false,
                                decided_at: None,
                            },
                        );
                        hub.route.insert(msg.header_hash, device);
                    }
                    self.feed_instance(&mut hub, device, &msg, &mut effects);
                    self.drain_early_votes(&mut hub, device, msg.header_hash, &mut effects);
                }
                Phase::Prepare | Phase::Commit => {
                    match hub.route.get(&msg.header_hash).copied() {
                        Some(device) => {
                            if hub.instances.contains_key(&device) {
                                self.feed_instance(&mut hub, device, &msg, &mut effects);
                            } else if msg.phase == Phase::Commit {
                                // Instance swept after decision: merge the
                                // late vote straight into the ledger.
                                self.merge_late_commit(&device, &msg);
                            }
                        }
                        None => {
                            if !hub.bank_early_vote(msg) {
                                bump!(self, consensus_rejects);
                            }
                        }
                    }
                }
            }
        }
        self.send_effects(effects);
    }

    fn merge_late_commit(&self, device: &PublicKey, msg: &ConsensusMessage) {
        let matches = {
            let ledger = self.ledger.read();
            ledger
                .find_block(device)
                .map(|b| b.header_hash() == msg.header_hash)
                .unwrap_or(false)
        };
        if !matches {
            return;
        }
        let entry = CertificateEntry {
            gateway: msg.sender,
            signature: msg.signature,
        };
        if let Ok(added) = self.ledger.merge_certificate(device, &[entry]) {
            if !added.is_empty() {
                bump!(self, certificate_merges);
                for e in added {
                    self.journal_cert_entry(device, &e);
                }
            }
        }
    }

    /// Expires undecided instances past their deadline and retires decided
    /// slots after a grace window for late votes.
    fn sweep_consensus(&self) {
        let now = Instant::now();
        let mut hub = self.hub.lock().unwrap();
        let expired: Vec<PublicKey> = hub
            .instances
            .iter()
            .filter(|(_, s)| !s.decided && now >= s.deadline)
            .map(|(d, _)| *d)
            .collect();
        for device in expired {
            self.expire_slot(&mut hub, device);
        }
        hub.instances.retain(|_, s| {
            !(s.decided && s.decided_at.is_some_and(|t| now >= t + DECIDED_SLOT_GRACE))
        });
        for bucket in hub.early_votes.values_mut() {
            bucket.retain(|(at, _)| now < *at + EARLY_VOTE_TTL);
        }
        hub.early_votes.retain(|_, b| !b.is_empty());
    }

    /// Drops a timed-out instance, releasing its tip promise and waking
    /// its waiters so the camera can retry.
    fn expire_slot(&self, hub: &mut ConsensusHub, device: PublicKey) {
        let Some(slot) = hub.instances.remove(&device) else {
            return;
        };
        if hub.tip_promise.get(&slot.prev_hash) == Some(&device) {
            hub.tip_promise.remove(&slot.prev_hash);
        }
        hub.route.retain(|_, d| *d != device);
        hub.announced.remove(&device);
        slot.waiter.notify(WaitState::Failed);
        bump!(self, consensus_timeouts);
        debug!(
            "consensus instance for device {} timed out",
            &device.to_hex()[..8]
        );
    }

    // -----------------------------------------------------------------
    // peer messages
    // -----------------------------------------------------------------

    fn on_peer_frame(&self, body: &[u8]) {
        let msg = match PeerMessage::decode(body) {
            Ok(m) => m,
            Err(e) => {
                debug!("undecodable peer message: {e}");
                bump!(self, peer_messages_rejected);
                return;
            }
        };
        if !self.consensus_config.contains(&msg.sender) || !msg.verify() {
            bump!(self, peer_messages_rejected);
            return;
        }
        if msg.sender == self.public_key() {
            return; // our own echo; nothing to do
        }
        match msg.payload {
            PeerPayload::HelloAnnounce { camera } => {
                let mut hub = self.hub.lock().unwrap();
                hub.announced.entry(camera).or_insert(msg.sender);
            }
            PeerPayload::Consensus(inner_msg) => {
                self.handle_consensus(msg.sender, inner_msg);
            }
            PeerPayload::TxUpdate {
                device,
                transaction,
            } => {
                self.handle_tx_update(msg.sender, device, transaction);
            }
            PeerPayload::SyncRequest {
                device,
                from_sequence,
            } => {
                self.handle_sync_request(msg.sender, device, from_sequence);
            }
            PeerPayload::SyncResponse {
                device,
                header,
                transactions,
            } => {
                self.handle_sync_response(device, header, transactions);
            }
        }
    }

    fn handle_tx_update(&self, sender: PublicKey, device: PublicKey, tx: Transaction) {
        let known = self.ledger.read().find_block(&device).is_some();
        if !known {
            self.buffer_tx(device, tx);
            self.maybe_sync_request(device, 0, sender);
            return;
        }
        let lock = self.ledger.append_lock(device);
        let guard = lock.lock().unwrap();
        let expected = self
            .ledger
            .read()
            .find_block(&device)
            .map(|b| b.next_sequence())
            .unwrap_or(0);
        match tx.sequence_number.cmp(&expected) {
            std::cmp::Ordering::Less => {
                bump!(self, duplicate_tx_updates);
            }
            std::cmp::Ordering::Equal => {
                match self.ledger.apply_replica(&device, tx) {
                    Ok(()) => {
                        bump!(self, tx_updates_applied);
                        // Journal while still holding the append lock so the
                        // journal preserves per-block order.
                        self.journal_latest_tx(&device);
                        drop(guard);
                        self.drain_buffered(device);
                    }
                    Err(e) => {
                        warn!("peer transaction failed verification: {e}");
                        bump!(self, invalid_tx_updates);
                    }
                }
            }
            std::cmp::Ordering::Greater => {
                drop(guard);
                self.buffer_tx(device, tx);
                self.maybe_sync_request(device, expected, sender);
            }
        }
    }

    fn buffer_tx(&self, device: PublicKey, tx: Transaction) {
        let mut sync = self.sync.lock().unwrap();
        let bucket = sync.buffered.entry(device).or_default();
        if bucket.len() < MAX_BUFFERED_TXS_PER_DEVICE {
            bucket.insert(tx.sequence_number, tx);
        }
    }

    /// Applies any buffered successors that became contiguous.
    fn drain_buffered(&self, device: PublicKey) {
        loop {
            let next = {
                let ledger = self.ledger.read();
                match ledger.find_block(&device) {
                    Some(b) => b.next_sequence(),
                    None => return,
                }
            };
            let tx = {
                let mut sync = self.sync.lock().unwrap();
                let Some(bucket) = sync.buffered.get_mut(&device) else {
                    return;
                };
                // Anything at or below the replica tip is stale.
                while let Some((&seq, _)) = bucket.first_key_value() {
                    if seq < next {
                        bucket.pop_first();
                    } else {
                        break;
                    }
                }
                match bucket.first_key_value() {
                    Some((&seq, _)) if seq == next => bucket.pop_first().map(|(_, t)| t),
                    _ => {
                        if bucket.is_empty() {
                            sync.buffered.remove(&device);
                        }
                        return;
                    }
                }
            };
            let Some(tx) = tx else { return };
            let lock = self.ledger.append_lock(device);
            let _guard = lock.lock().unwrap();
            match self.ledger.apply_replica(&device, tx) {
                Ok(()) => {
                    bump!(self, tx_updates_applied);
                    self.journal_latest_tx(&device);
                }
                Err(e) => {
                    debug!("buffered transaction no longer applies: {e}");
                    bump!(self, invalid_tx_updates);
                    return;
                }
            }
        }
    }

    fn maybe_sync_request(&self, device: PublicKey, from_sequence: u64, target: PublicKey) {
        {
            let mut sync = self.sync.lock().unwrap();
            let now = Instant::now();
            if let Some(last) = sync.last_request.get(&device) {
                if now.duration_since(*last) < SYNC_REQUEST_MIN_GAP {
                    return;
                }
            }
            sync.last_request.insert(device, now);
        }
        bump!(self, sync_requests_sent);
        self.send_to(
            &target,
            PeerPayload::SyncRequest {
                device,
                from_sequence,
            },
        );
    }

    fn handle_sync_request(&self, requester: PublicKey, device: PublicKey, from_sequence: u64) {
        let response = {
            let ledger = self.ledger.read();
            let Some(block) = ledger.find_block(&device) else {
                return;
            };
            let from = (from_sequence as usize).min(block.transactions().len());
            let transactions: Vec<Transaction> = block.transactions()[from..]
                .iter()
                .take(SYNC_BATCH_LIMIT)
                .cloned()
                .collect();
            PeerPayload::SyncResponse {
                device,
                header: Some(block.header().clone()),
                transactions,
            }
        };
        bump!(self, sync_responses_sent);
        self.send_to(&requester, response);
    }

    fn handle_sync_response(
        &self,
        device: PublicKey,
        header: Option<crate::ledger::BlockHeader>,
        transactions: Vec<Transaction>,
    ) {
        if let Some(header) = header {
            let known = self.ledger.read().find_block(&device).is_some();
            if !known {
                match self.ledger.insert_block(header.clone()) {
                    Ok(()) => {
                        self.journal_header(&header);
                        bump!(self, sync_blocks_admitted);
                        bump!(self, blocks_inserted);
                        // Keep late commit routing alive for this block.
                        let mut hub = self.hub.lock().unwrap();
                        hub.route.insert(header.header_hash(), device);
                    }
                    Err(LedgerError::TipMismatch) => {
                        // A deeper gap; future polls fill ancestors first.
                        debug!("sync block for {} does not chain yet", &device.to_hex()[..8]);
                        return;
                    }
                    Err(e) => {
                        warn!("sync block rejected: {e}");
                        bump!(self, invalid_tx_updates);
                        return;
                    }
                }
            } else {
                let entries = header.consensus_certificate;
                if let Ok(added) = self.ledger.merge_certificate(&device, &entries) {
                    if !added.is_empty() {
                        bump!(self, certificate_merges);
                        for e in added {
                            self.journal_cert_entry(&device, &e);
                        }
                    }
                }
            }
        }
        for tx in transactions {
            let expected = {
                let ledger = self.ledger.read();
                match ledger.find_block(&device) {
                    Some(b) => b.next_sequence(),
                    None => return,
                }
            };
            if tx.sequence_number < expected {
                continue;
            }
            if tx.sequence_number > expected {
                self.buffer_tx(device, tx);
                continue;
            }
            let lock = self.ledger.append_lock(device);
            let _guard = lock.lock().unwrap();
            match self.ledger.apply_replica(&device, tx) {
                Ok(()) => {
                    bump!(self, tx_updates_applied);
                    self.journal_latest_tx(&device);
                }
                Err(e) => {
                    debug!("sync transaction rejected: {e}");
                    bump!(self, invalid_tx_updates);
                    return;
                }
            }
        }
        self.drain_buffered(device);
    }

    /// Periodic anti-entropy: ask each managed-elsewhere block's gateway
    /// for anything newer than our replica, which also repairs dropped
    /// final updates that no later TX_UPDATE would reveal.
    fn sync_poll(&self) {
        let targets: Vec<(PublicKey, PublicKey, u64)> = {
            let ledger = self.ledger.read();
            ledger
                .blocks()
                .iter()
                .filter(|b| b.header().managing_gateway != self.public_key())
                .map(|b| {
                    (
                        b.device_public_key(),
                        b.header().managing_gateway,
                        b.next_sequence(),
                    )
                })
                .collect()
        };
        for (device, manager, from_sequence) in targets {
            self.send_to(
                &manager,
                PeerPayload::SyncRequest {
                    device,
                    from_sequence,
                },
            );
        }
    }

    // -----------------------------------------------------------------
    // outbound
    // -----------------------------------------------------------------

    fn send_effects(&self, effects: Effects) {
        for payload in effects.broadcast {
            self.broadcast(payload);
        }
    }

    /// Signs and enqueues `payload` to every peer. TX_UPDATE broadcasts
    /// honor the configured injected drop rate (per peer, not per message).
    fn broadcast(&self, payload: PeerPayload) {
        let is_tx_update = payload.is_tx_update();
        let msg = match PeerMessage::sign(&self.config.identity, payload) {
            Ok(m) => m,
            Err(e) => {
                warn!("cannot sign peer message: {e}");
                return;
            }
        };
        let body = msg.encode();
        for link in &self.peers {
            if is_tx_update && self.roll_drop() {
                bump!(self, injected_tx_drops);
                continue;
            }
            if link.enqueue(body.clone()) && is_tx_update {
                bump!(self, tx_updates_sent);
            }
        }
    }

    fn send_to(&self, peer: &PublicKey, payload: PeerPayload) {
        let Some(link) = self.peers.iter().find(|l| l.peer == *peer) else {
            return;
        };
        let msg = match PeerMessage::sign(&self.config.identity, payload) {
            Ok(m) => m,
            Err(e) => {
                warn!("cannot sign peer message: {e}");
                return;
            }
        };
        link.enqueue(msg.encode());
    }

    fn roll_drop(&self) -> bool {
        let percent = self.config.tx_update_drop_percent;
        if percent == 0 {
            return false;
        }
        self.drop_rng.lock().unwrap().gen_range(0..100u8) < percent
    }

    // -----------------------------------------------------------------
    // journal
    // -----------------------------------------------------------------

    fn journal_header(&self, header: &crate::ledger::BlockHeader) {
        if let Some(journal) = &self.journal {
            if let Err(e) = journal.lock().unwrap().append_header(header) {
                warn!("journal write failed: {e}");
            }
        }
    }

    /// Journals the last transaction of a device's block. Callers hold the
    /// device append lock, so "last" is exactly the one they appended.
    fn journal_latest_tx(&self, device: &PublicKey) {
        if self.journal.is_none() {
            return;
        }
        let tx = {
            let ledger = self.ledger.read();
            ledger
                .find_block(device)
                .and_then(|b| b.transactions().last().cloned())
        };
        if let Some(tx) = tx {
            self.journal_transaction(device, &tx);
        }
    }

    fn journal_transaction(&self, device: &PublicKey, tx: &Transaction) {
        if let Some(journal) = &self.journal {
            if let Err(e) = journal.lock().unwrap().append_transaction(device, tx) {
                warn!("journal write failed: {e}");
            }
        }
    }

    fn journal_cert_entry(&self, device: &PublicKey, entry: &CertificateEntry) {
        if let Some(journal) = &self.journal {
            if let Err(e) = journal.lock().unwrap().append_cert_entry(device, entry) {
                warn!("journal write failed: {e}");
            }
        }
    }
}

/// What a camera hello should do next.
enum BootstrapPlan {
    /// Wait on this instance's outcome (second field: its deadline).
    Wait(Arc<BootstrapWaiter>, Instant),
    /// Another proposal holds the tip; back off briefly and retry.
    Busy,
}

fn ms(from: Instant, to: Instant) -> f64 {
    to.duration_since(from).as_secs_f64() * 1_000.0
}

// The node intentionally exposes a tiny test hook: validation of its own
// ledger, used by integration tests between scenario phases.
impl GatewayNode {
    pub fn validate_own_ledger(&self) -> crate::ledger::ValidationReport {
        validate_ledger(&self.inner.ledger.read())
    }
}
