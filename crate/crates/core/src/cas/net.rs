//! Wire protocol for the store service: `PUT(content) -> address`,
//! `GET(address) -> content | NOT_FOUND | INTEGRITY_FAIL`, carried as
//! frames from [`crate::wire`].

use std::io::BufWriter;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use super::{CasError, CasStore, ContentAddress};
use crate::wire::{self, op, Frame, WireError};

/// TCP front-end for a [`CasStore`]; one handler thread per connection.
pub struct CasServer {
    local_addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept_thread: Option<JoinHandle<()>>,
}

impl CasServer {
    /// Binds `listen` and starts serving `store`.
    pub fn start(store: CasStore, listen: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        Self::start_with_listener(store, listener)
    }

    pub fn start_with_listener(store: CasStore, listener: TcpListener) -> std::io::Result<Self> {
        let local_addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::new(Mutex::new(Vec::new()));
        let store = Arc::new(store);
        let accept_shutdown = shutdown.clone();
        let accept_conns = conns.clone();
        let accept_thread = std::thread::Builder::new()
            .name("casd-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if accept_shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            if let Ok(handle) = stream.try_clone() {
                                accept_conns.lock().unwrap().push(handle);
                            }
                            let store = store.clone();
                            let _ = std::thread::Builder::new()
                                .name("casd-conn".into())
                                .spawn(move || serve_connection(&store, stream));
                        }
                        Err(e) => {
                            warn!("casd accept error: {e}");
                        }
                    }
                }
            })?;
        Ok(Self {
            local_addr,
            shutdown,
            conns,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stops accepting, severs open connections, releases the port.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop so it observes the flag and exits.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        for conn in self.conns.lock().unwrap().drain(..) {
            let _ = conn.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl Drop for CasServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(store: &CasStore, stream: TcpStream) {
    let peer = stream.peer_addr().ok();
    let mut reader = stream.try_clone().expect("clone tcp stream");
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match wire::read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Closed) => return,
            Err(e) => {
                debug!("casd connection {peer:?} dropped: {e}");
                return;
            }
        };
        let ok = match frame.opcode {
            op::CAS_PUT => handle_put(store, &mut writer, &frame.body),
            op::CAS_GET => handle_get(store, &mut writer, &frame.body),
            other => {
                wire::write_frame(&mut writer, op::CAS_ERR, format!("unknown opcode {other:#04x}").as_bytes())
            }
        };
        if ok.is_err() {
            return;
        }
    }
}

fn handle_put(
    store: &CasStore,
    w: &mut impl std::io::Write,
    body: &[u8],
) -> std::io::Result<()> {
    match store.put(body) {
        Ok(addr) => wire::write_frame(w, op::CAS_PUT_OK, addr.digest()),
        Err(e) => wire::write_frame(w, op::CAS_ERR, e.to_string().as_bytes()),
    }
}

fn handle_get(store: &CasStore, w: &mut impl std::io::Write, body: &[u8]) -> std::io::Result<()> {
    let Ok(digest) = <[u8; 32]>::try_from(body) else {
        return wire::write_frame(w, op::CAS_ERR, b"address must be 32 bytes");
    };
    match store.get(&ContentAddress::from_digest(digest)) {
        Ok(content) => wire::write_frame(w, op::CAS_GET_OK, &content),
        Err(CasError::NotFound(_)) => wire::write_frame(w, op::CAS_NOT_FOUND, b""),
        Err(CasError::IntegrityFailure { .. }) => wire::write_frame(w, op::CAS_INTEGRITY_FAIL, b""),
        Err(e) => wire::write_frame(w, op::CAS_ERR, e.to_string().as_bytes()),
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("store unreachable: {0}")]
    Unreachable(String),
    #[error("store protocol error: {0}")]
    Protocol(String),
    #[error("store rejected request: {0}")]
    Rejected(String),
    #[error("object not found")]
    NotFound,
    #[error("store reported integrity failure for requested object")]
    IntegrityFailure,
}

/// Outcome of fetching one object, shaped for audit verdicts: `Missing`
/// and `Unreachable` mean "cannot check", `IntegrityFail` is evidence.
#[derive(Debug)]
pub enum FetchResult {
    Found(Vec<u8>),
    Missing,
    IntegrityFail,
    Unreachable(String),
}

/// Blocking client for the store protocol. Reconnects lazily; any network
/// error invalidates the cached connection so the next call redials.
#[derive(Debug)]
pub struct CasClient {
    addr: String,
    timeout: Duration,
    conn: Option<TcpStream>,
}

impl CasClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: Duration::from_secs(30),
            conn: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connection(&mut self) -> Result<&mut TcpStream, ClientError> {
        if self.conn.is_none() {
            let sockaddr = self
                .addr
                .to_socket_addrs()
                .map_err(|e| ClientError::Unreachable(e.to_string()))?
                .next()
                .ok_or_else(|| ClientError::Unreachable("address resolves to nothing".into()))?;
            let stream = TcpStream::connect_timeout(&sockaddr, self.timeout)
                .map_err(|e| ClientError::Unreachable(e.to_string()))?;
            stream
                .set_read_timeout(Some(self.timeout))
                .map_err(|e| ClientError::Unreachable(e.to_string()))?;
            stream.set_nodelay(true).ok();
            self.conn = Some(stream);
        }
        Ok(self.conn.as_mut().unwrap())
    }

    fn request(&mut self, opcode: u8, body: &[u8]) -> Result<Frame, ClientError> {
        let stream = self.connection()?;
        let io_result = (|| -> Result<Frame, WireError> {
            wire::write_frame(stream, opcode, body)?;
            wire::read_frame(stream)
        })();
        match io_result {
            Ok(frame) => Ok(frame),
            Err(e) => {
                self.conn = None;
                Err(ClientError::Unreachable(e.to_string()))
            }
        }
    }

    /// Stores `content` and returns the address the store derived. The
    /// client re-derives the address locally and refuses a mismatching
    /// answer, so a lying store cannot plant a bad reference in the ledger.
    pub fn put(&mut self, content: &[u8]) -> Result<ContentAddress, ClientError> {
        let frame = self.request(op::CAS_PUT, content)?;
        match frame.opcode {
            op::CAS_PUT_OK => {
                let digest: [u8; 32] = frame.body.as_slice().try_into().map_err(|_| {
                    ClientError::Protocol("PUT_OK body must be a 32-byte digest".into())
                })?;
                let remote = ContentAddress::from_digest(digest);
                let local = ContentAddress::from_content(content);
                if remote != local {
                    return Err(ClientError::Protocol(format!(
                        "store returned address {remote} but content hashes to {local}"
                    )));
                }
                Ok(remote)
            }
            op::CAS_ERR => Err(ClientError::Rejected(
                String::from_utf8_lossy(&frame.body).into_owned(),
            )),
            other => Err(ClientError::Protocol(format!(
                "unexpected response opcode {other:#04x}"
            ))),
        }
    }

    pub fn get(&mut self, address: &ContentAddress) -> Result<Vec<u8>, ClientError> {
        let frame = self.request(op::CAS_GET, address.digest())?;
        match frame.opcode {
            op::CAS_GET_OK => Ok(frame.body),
            op::CAS_NOT_FOUND => Err(ClientError::NotFound),
            op::CAS_INTEGRITY_FAIL => Err(ClientError::IntegrityFailure),
            op::CAS_ERR => Err(ClientError::Rejected(
                String::from_utf8_lossy(&frame.body).into_owned(),
            )),
            other => Err(ClientError::Protocol(format!(
                "unexpected response opcode {other:#04x}"
            ))),
        }
    }

    /// [`get`](Self::get) folded into an audit-friendly shape.
    pub fn fetch(&mut self, address: &ContentAddress) -> FetchResult {
        match self.get(address) {
            Ok(bytes) => FetchResult::Found(bytes),
            Err(ClientError::NotFound) => FetchResult::Missing,
            Err(ClientError::IntegrityFailure) => FetchResult::IntegrityFail,
            Err(e) => FetchResult::Unreachable(e.to_string()),
        }
    }
}
