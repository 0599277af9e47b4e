//! Canonical byte encoding used for every hashed, signed, or persisted value.
//!
//! The rules are deliberately small so that an auditor can re-derive any
//! digest with a few lines of scripting:
//!
//! * a value is encoded as its fields in declaration order;
//! * every field is length-prefixed: a 4-byte big-endian length followed by
//!   the field's content bytes;
//! * integer content is fixed-width big-endian (`u32` -> 4 bytes,
//!   `u64` -> 8 bytes, `u8` -> 1 byte).
//!
//! There is no padding, no tags, and no self-description beyond the length
//! prefixes. Nested structures are flattened: their fields are appended in
//! order as if declared inline.

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Computes the SHA-256 digest of `data`.
pub fn sha256(data: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(data);
    hasher.finalize().into()
}

/// Renders a digest (or any byte string) as lowercase hex.
pub fn to_hex(bytes: &[u8]) -> String {
    hex::encode(bytes)
}

/// Parses a lowercase or uppercase hex string into a fixed-size array.
pub fn from_hex<const N: usize>(s: &str) -> Result<[u8; N], DecodeError> {
    let v = hex::decode(s.trim()).map_err(|_| DecodeError {
        offset: 0,
        kind: DecodeErrorKind::BadHex,
    })?;
    v.as_slice().try_into().map_err(|_| DecodeError {
        offset: 0,
        kind: DecodeErrorKind::BadFieldLength {
            expected: N,
            found: v.len(),
        },
    })
}

/// Incremental writer for the canonical field encoding.
#[derive(Debug, Default)]
pub struct FieldEncoder {
    buf: Vec<u8>,
}

impl FieldEncoder {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self {
            buf: Vec::with_capacity(cap),
        }
    }

    /// Appends a length-prefixed byte-string field.
    pub fn put_bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("field exceeds u32 length");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn put_u8(&mut self, v: u8) -> &mut Self {
        self.put_bytes(&[v])
    }

    pub fn put_u32(&mut self, v: u32) -> &mut Self {
        self.put_bytes(&v.to_be_bytes())
    }

    pub fn put_u64(&mut self, v: u64) -> &mut Self {
        self.put_bytes(&v.to_be_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

/// Where a decode failed, as a byte offset into the decoded slice.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte {offset}: {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeErrorKind {
    #[error("input truncated: need {needed} more bytes")]
    Truncated { needed: usize },
    #[error("field length {found} does not match expected {expected}")]
    BadFieldLength { expected: usize, found: usize },
    #[error("{0} trailing bytes after final field")]
    TrailingBytes(usize),
    #[error("field length {0} exceeds limit")]
    OversizedField(u32),
    #[error("invalid hex")]
    BadHex,
    #[error("invalid value: {0}")]
    BadValue(String),
}

/// Upper bound on a single field length; anything larger is corrupt input.
const MAX_FIELD_LEN: u32 = 256 * 1024 * 1024;

/// Cursor-based reader for the canonical field encoding.
#[derive(Debug)]
pub struct FieldDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> FieldDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn err(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError {
            offset: self.pos,
            kind,
        }
    }

    /// Reads the next length-prefixed field.
    pub fn take_bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < 4 {
            return Err(self.err(DecodeErrorKind::Truncated {
                needed: 4 - (self.buf.len() - self.pos),
            }));
        }
        let len = u32::from_be_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        if len > MAX_FIELD_LEN {
            return Err(self.err(DecodeErrorKind::OversizedField(len)));
        }
        let len = len as usize;
        let start = self.pos + 4;
        if self.buf.len() - start < len {
            return Err(self.err(DecodeErrorKind::Truncated {
                needed: len - (self.buf.len() - start),
            }));
        }
        self.pos = start + len;
        Ok(&self.buf[start..start + len])
    }

    /// Reads a field that must be exactly `N` bytes long.
    pub fn take_array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let at = self.pos;
        let field = self.take_bytes()?;
        field.try_into().map_err(|_| DecodeError {
            offset: at,
            kind: DecodeErrorKind::BadFieldLength {
                expected: N,
                found: field.len(),
            },
        })
    }

    pub fn take_u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take_array::<1>()?[0])
    }

    pub fn take_u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take_array::<4>()?))
    }

    pub fn take_u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take_array::<8>()?))
    }

    /// Asserts that the cursor consumed the whole input.
    pub fn expect_end(&self) -> Result<(), DecodeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(self.err(DecodeErrorKind::TrailingBytes(self.buf.len() - self.pos)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_fields() {
        let mut enc = FieldEncoder::new();
        enc.put_bytes(b"abc").put_u32(7).put_u64(9).put_u8(3);
        let bytes = enc.finish();

        let mut dec = FieldDecoder::new(&bytes);
        assert_eq!(dec.take_bytes().unwrap(), b"abc");
        assert_eq!(dec.take_u32().unwrap(), 7);
        assert_eq!(dec.take_u64().unwrap(), 9);
        assert_eq!(dec.take_u8().unwrap(), 3);
        dec.expect_end().unwrap();
    }

    #[test]
    fn layout_is_length_prefixed_big_endian() {
        let mut enc = FieldEncoder::new();
        enc.put_bytes(b"ab").put_u32(0x01020304);
        assert_eq!(
            enc.finish(),
            vec![0, 0, 0, 2, b'a', b'b', 0, 0, 0, 4, 1, 2, 3, 4]
        );
    }

    #[test]
    fn truncated_input_reports_offset() {
        let mut enc = FieldEncoder::new();
        enc.put_bytes(b"abcdef");
        let mut bytes = enc.finish();
        bytes.truncate(7);

        let mut dec = FieldDecoder::new(&bytes);
        let err = dec.take_bytes().unwrap_err();
        assert_eq!(err.offset, 0);
        assert!(matches!(err.kind, DecodeErrorKind::Truncated { .. }));
    }

    #[test]
    fn wrong_fixed_length_rejected() {
        let mut enc = FieldEncoder::new();
        enc.put_bytes(&[0u8; 16]);
        let bytes = enc.finish();
        let mut dec = FieldDecoder::new(&bytes);
        let err = dec.take_array::<32>().unwrap_err();
        assert!(matches!(
            err.kind,
            DecodeErrorKind::BadFieldLength {
                expected: 32,
                found: 16
            }
        ));
    }

    #[test]
    fn trailing_bytes_detected() {
        let mut enc = FieldEncoder::new();
        enc.put_u8(1).put_u8(2);
        let bytes = enc.finish();
        let mut dec = FieldDecoder::new(&bytes);
        dec.take_u8().unwrap();
        assert!(dec.expect_end().is_err());
    }

    #[test]
    fn sha256_standard_vector() {
        assert_eq!(
            to_hex(&sha256(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
