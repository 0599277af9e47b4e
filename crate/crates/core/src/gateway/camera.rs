//! Camera-side client for the gateway's ingestion protocol: one `HELLO`
//! carrying the camera public key, then a stream of container frames, each
//! acknowledged with the appended transaction's coordinates.

use std::net::TcpStream;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::identity::PublicKey;
use crate::wire::{self, op, WireError};

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("cannot reach gateway: {0}")]
    Unreachable(String),
    #[error("gateway refused bootstrap within the deadline: {0}")]
    BootstrapTimeout(String),
    #[error("gateway rejected chunk: {0}")]
    ChunkRejected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// A bootstrapped camera session. Construction blocks until the gateway
/// acknowledges the camera's block (retrying on NACK hints).
pub struct CameraClient {
    stream: TcpStream,
    camera: PublicKey,
}

impl CameraClient {
    pub fn connect(
        gateway_addr: &str,
        camera: PublicKey,
        overall_timeout: Duration,
    ) -> Result<Self, CameraError> {
        let deadline = Instant::now() + overall_timeout;
        let mut last_hint = String::from("no response yet");
        loop {
            if Instant::now() >= deadline {
                return Err(CameraError::BootstrapTimeout(last_hint));
            }
            let mut stream = match TcpStream::connect(gateway_addr) {
                Ok(s) => s,
                Err(e) => {
                    last_hint = format!("dial failed: {e}");
                    std::thread::sleep(Duration::from_millis(100));
                    continue;
                }
            };
            stream.set_nodelay(true).ok();
            match Self::hello_once(&mut stream, &camera, deadline) {
                Ok(true) => return Ok(Self { stream, camera }),
                Ok(false) => continue, // retry hint honored; redial
                Err(e) => {
                    last_hint = e.to_string();
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
    }

    /// Sends HELLO and waits for the verdict. `Ok(true)` means acknowledged,
    /// `Ok(false)` means a retry hint was honored.
    fn hello_once(
        stream: &mut TcpStream,
        camera: &PublicKey,
        deadline: Instant,
    ) -> Result<bool, CameraError> {
        wire::write_frame(stream, op::GW_HELLO, camera.as_bytes())
            .map_err(|e| CameraError::Unreachable(e.to_string()))?;
        let frame = wire::read_frame(stream).map_err(|e| CameraError::Unreachable(e.to_string()))?;
        match frame.opcode {
            op::GW_HELLO_OK => Ok(true),
            op::GW_HELLO_RETRY => {
                let retry_ms = if frame.body.len() >= 4 {
                    u32::from_be_bytes(frame.body[..4].try_into().unwrap()) as u64
                } else {
                    500
                };
                let wait = Duration::from_millis(retry_ms.min(5_000));
                if Instant::now() + wait >= deadline {
                    let hint = String::from_utf8_lossy(frame.body.get(4..).unwrap_or(&[]))
                        .into_owned();
                    return Err(CameraError::BootstrapTimeout(hint));
                }
                std::thread::sleep(wait);
                Ok(false)
            }
            other => Err(CameraError::Protocol(format!(
                "unexpected hello response opcode {other:#04x}"
            ))),
        }
    }

    pub fn camera(&self) -> PublicKey {
        self.camera
    }

    /// Streams one encoded container frame; returns the sequence number and
    /// transaction hash the gateway appended.
    pub fn send_chunk(&mut self, frame_bytes: &[u8]) -> Result<(u64, [u8; 32]), CameraError> {
        wire::write_frame(&mut self.stream, op::GW_CHUNK, frame_bytes)
            .map_err(|e| CameraError::Unreachable(e.to_string()))?;
        let frame = match wire::read_frame(&mut self.stream) {
            Ok(f) => f,
            Err(WireError::Closed) => {
                return Err(CameraError::Unreachable("gateway closed session".into()))
            }
            Err(e) => return Err(CameraError::Unreachable(e.to_string())),
        };
        match frame.opcode {
            op::GW_CHUNK_OK => {
                if frame.body.len() != 8 + 32 {
                    return Err(CameraError::Protocol("bad CHUNK_OK body".into()));
                }
                let seq = u64::from_be_bytes(frame.body[..8].try_into().unwrap());
                let hash: [u8; 32] = frame.body[8..].try_into().unwrap();
                Ok((seq, hash))
            }
            op::GW_CHUNK_ERR => Err(CameraError::ChunkRejected(
                String::from_utf8_lossy(&frame.body).into_owned(),
            )),
            other => Err(CameraError::Protocol(format!(
                "unexpected chunk response opcode {other:#04x}"
            ))),
        }
    }
}
