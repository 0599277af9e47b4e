//! Length-prefixed frame codec shared by every TCP surface.
//!
//! ```text
//! frame = u32 BE length | u8 opcode | body
//! ```
//!
//! The length counts the opcode byte plus the body, so a body-less frame has
//! length 1. Frames above [`MAX_FRAME_LEN`] are rejected before allocation.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

/// Opcode assignments across the three services. Opcodes are unique across
/// the whole artifact so a misdirected frame fails loudly.
pub mod op {
    // content-addressed store
    pub const CAS_PUT: u8 = 0x01;
    pub const CAS_GET: u8 = 0x02;
    pub const CAS_PUT_OK: u8 = 0x81;
    pub const CAS_GET_OK: u8 = 0x82;
    pub const CAS_NOT_FOUND: u8 = 0x83;
    pub const CAS_INTEGRITY_FAIL: u8 = 0x84;
    pub const CAS_ERR: u8 = 0x8F;

    // gateway, camera-facing
    pub const GW_HELLO: u8 = 0x10;
    pub const GW_CHUNK: u8 = 0x11;
    pub const GW_HELLO_OK: u8 = 0x90;
    pub const GW_HELLO_RETRY: u8 = 0x91;
    pub const GW_CHUNK_OK: u8 = 0x92;
    pub const GW_CHUNK_ERR: u8 = 0x93;

    // gateway, peer-facing
    pub const GW_PEER: u8 = 0x20;

    // gateway, operator/audit-facing
    pub const GW_EXPORT_LEDGER: u8 = 0x30;
    pub const GW_LEDGER: u8 = 0x94;
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection closed")]
    Closed,
    #[error("frame length {0} exceeds limit")]
    Oversized(u32),
    #[error("zero-length frame")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub body: Vec<u8>,
}

/// Writes one frame and flushes.
pub fn write_frame(w: &mut impl Write, opcode: u8, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len() + 1).expect("frame too large");
    assert!(len <= MAX_FRAME_LEN, "frame exceeds protocol limit");
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&[opcode])?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame. A clean EOF at a frame boundary maps to
/// [`WireError::Closed`]; EOF mid-frame is an I/O error.
pub fn read_frame(r: &mut impl Read) -> Result<Frame, WireError> {
    let mut len_buf = [0u8; 4];
    if let Err(e) = read_exact_or_closed(r, &mut len_buf)? {
        return Err(e);
    }
    let len = u32::from_be_bytes(len_buf);
    if len == 0 {
        return Err(WireError::Empty);
    }
    if len > MAX_FRAME_LEN {
        return Err(WireError::Oversized(len));
    }
    let mut opcode = [0u8; 1];
    r.read_exact(&mut opcode)?;
    let mut body = vec![0u8; len as usize - 1];
    r.read_exact(&mut body)?;
    Ok(Frame {
        opcode: opcode[0],
        body,
    })
}

/// Distinguishes EOF-before-any-byte (clean close) from a short read.
fn read_exact_or_closed(
    r: &mut impl Read,
    buf: &mut [u8],
) -> Result<Result<(), WireError>, WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return if filled == 0 {
                    Ok(Err(WireError::Closed))
                } else {
                    Err(WireError::Io(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "eof inside frame header",
                    )))
                };
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(WireError::Io(e)),
        }
    }
    Ok(Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn frame_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, op::CAS_PUT, b"hello").unwrap();
        assert_eq!(&buf[..4], &6u32.to_be_bytes());
        let frame = read_frame(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(frame.opcode, op::CAS_PUT);
        assert_eq!(frame.body, b"hello");
    }

    #[test]
    fn empty_body_frame() {
        let mut buf = Vec::new();
        write_frame(&mut buf, op::CAS_NOT_FOUND, b"").unwrap();
        let frame = read_frame(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(frame.opcode, op::CAS_NOT_FOUND);
        assert!(frame.body.is_empty());
    }

    #[test]
    fn clean_eof_is_closed() {
        let err = read_frame(&mut Cursor::new(&[])).unwrap_err();
        assert!(matches!(err, WireError::Closed));
    }

    #[test]
    fn eof_inside_frame_is_io_error() {
        let mut buf = Vec::new();
        write_frame(&mut buf, 0x01, b"hello").unwrap();
        buf.truncate(6);
        let err = read_frame(&mut Cursor::new(&buf)).unwrap_err();
        assert!(matches!(err, WireError::Io(_)));
    }

    #[test]
    fn oversized_frame_rejected_without_allocation() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_FRAME_LEN + 1).to_be_bytes());
        buf.push(0x01);
        let err = read_frame(&mut Cursor::new(&buf)).unwrap_err();
        assert!(matches!(err, WireError::Oversized(_)));
    }
}
