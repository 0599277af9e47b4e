//! Video chunk container, metadata extraction, and the metadata hash.
//!
//! Chunks travel in a fixed binary container so the pipeline stays
//! codec-agnostic:
//!
//! ```text
//! magic "SVC1" (4) | width u32 BE | height u32 BE | frame_rate_milli u32 BE
//! | position_ms u64 BE | payload_len u64 BE | payload bytes
//! ```
//!
//! The metadata hash is SHA-256 over the ASCII string
//! `"Wi|He|Fr|Po|vh_hex"` where the first four fields are decimal integers
//! (frame rate in milli-fps) and `vh_hex` is the lowercase hex of the
//! payload's SHA-256. No whitespace, no trailing separator. The string form
//! makes the value reproducible from any tooling in one line.

use thiserror::Error;

use crate::encoding::{sha256, to_hex};

pub const CHUNK_MAGIC: [u8; 4] = *b"SVC1";
/// Fixed container header size: magic + three u32 fields + two u64 fields.
pub const CHUNK_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8;
/// Sanity cap on declared payload length; larger frames are rejected.
pub const MAX_PAYLOAD_LEN: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChunkError {
    #[error("bad magic {found:02x?}, expected \"SVC1\"")]
    BadMagic { found: [u8; 4] },
    #[error("frame truncated: have {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("{field} must be greater than zero")]
    ZeroField { field: &'static str },
    #[error("payload must not be empty")]
    EmptyPayload,
    #[error("declared payload length {0} exceeds limit")]
    OversizedPayload(u64),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

/// A parsed video chunk: the four scalar metadata fields plus the opaque
/// encoded payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoChunk {
    pub width_px: u32,
    pub height_px: u32,
    /// Frame rate in frames/s x 1000, so 29.97 fps is carried as 29970.
    pub frame_rate_milli: u32,
    /// Stream position of the chunk start, in milliseconds.
    pub position_ms: u64,
    pub payload: Vec<u8>,
}

impl VideoChunk {
    pub fn new(
        width_px: u32,
        height_px: u32,
        frame_rate_milli: u32,
        position_ms: u64,
        payload: Vec<u8>,
    ) -> Result<Self, ChunkError> {
        if width_px == 0 {
            return Err(ChunkError::ZeroField { field: "width_px" });
        }
        if height_px == 0 {
            return Err(ChunkError::ZeroField { field: "height_px" });
        }
        if frame_rate_milli == 0 {
            return Err(ChunkError::ZeroField {
                field: "frame_rate_milli",
            });
        }
        if payload.is_empty() {
            return Err(ChunkError::EmptyPayload);
        }
        Ok(Self {
            width_px,
            height_px,
            frame_rate_milli,
            position_ms,
            payload,
        })
    }

    /// Serializes to the container format.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHUNK_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&CHUNK_MAGIC);
        out.extend_from_slice(&self.width_px.to_be_bytes());
        out.extend_from_slice(&self.height_px.to_be_bytes());
        out.extend_from_slice(&self.frame_rate_milli.to_be_bytes());
        out.extend_from_slice(&self.position_ms.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Decodes one container frame. The frame must contain exactly one chunk.
pub fn parse_chunk(frame: &[u8]) -> Result<VideoChunk, ChunkError> {
    if frame.len() < CHUNK_HEADER_LEN {
        return Err(ChunkError::Truncated {
            have: frame.len(),
            need: CHUNK_HEADER_LEN,
        });
    }
    let magic: [u8; 4] = frame[0..4].try_into().unwrap();
    if magic != CHUNK_MAGIC {
        return Err(ChunkError::BadMagic { found: magic });
    }
    let width_px = u32::from_be_bytes(frame[4..8].try_into().unwrap());
    let height_px = u32::from_be_bytes(frame[8..12].try_into().unwrap());
    let frame_rate_milli = u32::from_be_bytes(frame[12..16].try_into().unwrap());
    let position_ms = u64::from_be_bytes(frame[16..24].try_into().unwrap());
    let payload_len = u64::from_be_bytes(frame[24..32].try_into().unwrap());
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(ChunkError::OversizedPayload(payload_len));
    }
    let need = CHUNK_HEADER_LEN + payload_len as usize;
    if frame.len() < need {
        return Err(ChunkError::Truncated {
            have: frame.len(),
            need,
        });
    }
    if frame.len() > need {
        return Err(ChunkError::TrailingBytes(frame.len() - need));
    }
    let payload = frame[CHUNK_HEADER_LEN..need].to_vec();
    VideoChunk::new(width_px, height_px, frame_rate_milli, position_ms, payload)
}

/// Metadata extracted from a chunk; the anchored quantity is
/// [`hash_metadata`] over these five fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoMetadata {
    pub width_px: u32,
    pub height_px: u32,
    pub frame_rate_milli: u32,
    pub position_ms: u64,
    /// SHA-256 of the chunk payload bytes.
    pub chunk_hash: [u8; 32],
}

impl VideoMetadata {
    /// The exact ASCII string hashed by [`hash_metadata`].
    pub fn canonical_string(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}",
            self.width_px,
            self.height_px,
            self.frame_rate_milli,
            self.position_ms,
            to_hex(&self.chunk_hash)
        )
    }
}

/// Copies the scalar fields and hashes the payload.
pub fn extract_metadata(chunk: &VideoChunk) -> VideoMetadata {
    VideoMetadata {
        width_px: chunk.width_px,
        height_px: chunk.height_px,
        frame_rate_milli: chunk.frame_rate_milli,
        position_ms: chunk.position_ms,
        chunk_hash: sha256(&chunk.payload),
    }
}

/// The metadata hash anchored in the ledger.
pub fn hash_metadata(vm: &VideoMetadata) -> [u8; 32] {
    sha256(vm.canonical_string().as_bytes())
}

/// How often a stream is cut into chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkingConfig {
    pub interval_ms: u64,
}

impl ChunkingConfig {
    pub fn new(interval_ms: u64) -> Result<Self, ChunkError> {
        if interval_ms == 0 {
            return Err(ChunkError::ZeroField {
                field: "interval_ms",
            });
        }
        Ok(Self { interval_ms })
    }
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { interval_ms: 10_000 }
    }
}

/// Synthetic chunk stream generator for tests and benchmarks.
///
/// Payloads are pseudo-random bytes from a seeded stream cipher RNG, so a
/// generated stream is reproducible from (seed, payload_len) alone.
#[derive(Debug)]
pub struct ChunkGenerator {
    width_px: u32,
    height_px: u32,
    frame_rate_milli: u32,
    interval_ms: u64,
    payload_len: usize,
    next_index: u64,
    rng: rand_chacha::ChaCha8Rng,
}

impl ChunkGenerator {
    pub fn new(config: ChunkingConfig, payload_len: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            width_px: 1920,
            height_px: 1080,
            frame_rate_milli: 30_000,
            interval_ms: config.interval_ms,
            payload_len: payload_len.max(1),
            next_index: 0,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_dimensions(mut self, width_px: u32, height_px: u32, frame_rate_milli: u32) -> Self {
        self.width_px = width_px;
        self.height_px = height_px;
        self.frame_rate_milli = frame_rate_milli;
        self
    }

    /// Emits the next chunk in the stream; position advances by the interval.
    pub fn next_chunk(&mut self) -> VideoChunk {
        use rand::RngCore;
        let mut payload = vec![0u8; self.payload_len];
        self.rng.fill_bytes(&mut payload);
        let chunk = VideoChunk {
            width_px: self.width_px,
            height_px: self.height_px,
            frame_rate_milli: self.frame_rate_milli,
            position_ms: self.next_index * self.interval_ms,
            payload,
        };
        self.next_index += 1;
        chunk
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::from_hex;

    const ABC_SHA256: &str = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
    // sha256("1920|1080|30000|0|" + ABC_SHA256), derived with
    // python3 -c 'import hashlib; h=hashlib.sha256(b"abc").hexdigest();
    //   print(hashlib.sha256(f"1920|1080|30000|0|{h}".encode()).hexdigest())'
    const VECTOR_HASHVM: &str = "05e7a6a27ae5e42ce359241168f4efadde2365b42e41096ab12aa8c3d6833b84";

    fn golden_frame() -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(b"SVC1");
        f.extend_from_slice(&1920u32.to_be_bytes());
        f.extend_from_slice(&1080u32.to_be_bytes());
        f.extend_from_slice(&30_000u32.to_be_bytes());
        f.extend_from_slice(&0u64.to_be_bytes());
        f.extend_from_slice(&16u64.to_be_bytes());
        f.extend_from_slice(&[0xAB; 16]);
        f
    }

    #[test]
    fn parse_well_formed_frame() {
        let chunk = parse_chunk(&golden_frame()).unwrap();
        assert_eq!(chunk.width_px, 1920);
        assert_eq!(chunk.height_px, 1080);
        assert_eq!(chunk.frame_rate_milli, 30_000);
        assert_eq!(chunk.position_ms, 0);
        assert_eq!(chunk.payload, vec![0xAB; 16]);
    }

    #[test]
    fn golden_container_bytes() {
        // Full container for (1920, 1080, 30000, 0, "abc").
        let chunk = VideoChunk::new(1920, 1080, 30_000, 0, b"abc".to_vec()).unwrap();
        assert_eq!(
            hex::encode(chunk.encode()),
            "5356433100000780000004380000753000000000000000000000000000000003616263"
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let mut f = golden_frame();
        f[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            parse_chunk(&f),
            Err(ChunkError::BadMagic { found }) if &found == b"XXXX"
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut f = golden_frame();
        f.truncate(f.len() - 4);
        assert!(matches!(parse_chunk(&f), Err(ChunkError::Truncated { .. })));
    }

    #[test]
    fn truncated_header_rejected() {
        assert!(matches!(
            parse_chunk(&golden_frame()[..20]),
            Err(ChunkError::Truncated { have: 20, .. })
        ));
    }

    #[test]
    fn zero_dimensions_rejected() {
        let mut f = golden_frame();
        f[4..8].copy_from_slice(&0u32.to_be_bytes());
        assert!(matches!(
            parse_chunk(&f),
            Err(ChunkError::ZeroField { field: "width_px" })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut f = golden_frame();
        f.push(0);
        assert!(matches!(parse_chunk(&f), Err(ChunkError::TrailingBytes(1))));
    }

    #[test]
    fn empty_payload_rejected_at_construction() {
        assert!(matches!(
            VideoChunk::new(1, 1, 1, 0, vec![]),
            Err(ChunkError::EmptyPayload)
        ));
    }

    #[test]
    fn extract_metadata_hashes_payload_only() {
        let chunk = VideoChunk::new(1920, 1080, 30_000, 0, b"abc".to_vec()).unwrap();
        let vm = extract_metadata(&chunk);
        assert_eq!(vm.chunk_hash, from_hex::<32>(ABC_SHA256).unwrap());
    }

    #[test]
    fn same_payload_different_position_same_chunk_hash() {
        let a = VideoChunk::new(1920, 1080, 30_000, 0, b"abc".to_vec()).unwrap();
        let b = VideoChunk::new(1920, 1080, 30_000, 10_000, b"abc".to_vec()).unwrap();
        let (ma, mb) = (extract_metadata(&a), extract_metadata(&b));
        assert_eq!(ma.chunk_hash, mb.chunk_hash);
        assert_ne!(ma, mb);
        assert_ne!(hash_metadata(&ma), hash_metadata(&mb));
    }

    #[test]
    fn metadata_hash_matches_two_stage_oracle() {
        let chunk = VideoChunk::new(1920, 1080, 30_000, 0, b"abc".to_vec()).unwrap();
        let vm = extract_metadata(&chunk);
        assert_eq!(
            vm.canonical_string(),
            format!("1920|1080|30000|0|{ABC_SHA256}")
        );
        assert_eq!(hex::encode(hash_metadata(&vm)), VECTOR_HASHVM);
    }

    #[test]
    fn metadata_hash_deterministic() {
        let vm = VideoMetadata {
            width_px: 640,
            height_px: 480,
            frame_rate_milli: 29_970,
            position_ms: 123,
            chunk_hash: [9u8; 32],
        };
        assert_eq!(hash_metadata(&vm), hash_metadata(&vm.clone()));
    }

    #[test]
    fn any_single_field_change_changes_metadata_hash() {
        let base = VideoMetadata {
            width_px: 1920,
            height_px: 1080,
            frame_rate_milli: 30_000,
            position_ms: 0,
            chunk_hash: sha256(b"abc"),
        };
        let h = hash_metadata(&base);
        let mut m = base.clone();
        m.width_px += 1;
        assert_ne!(hash_metadata(&m), h);
        let mut m = base.clone();
        m.height_px += 1;
        assert_ne!(hash_metadata(&m), h);
        let mut m = base.clone();
        m.frame_rate_milli += 1;
        assert_ne!(hash_metadata(&m), h);
        let mut m = base.clone();
        m.position_ms += 1;
        assert_ne!(hash_metadata(&m), h);
        let mut m = base;
        m.chunk_hash[0] ^= 1;
        assert_ne!(hash_metadata(&m), h);
    }

    #[test]
    fn zero_interval_rejected() {
        assert!(ChunkingConfig::new(0).is_err());
        assert_eq!(ChunkingConfig::default().interval_ms, 10_000);
    }

    #[test]
    fn generator_is_reproducible_and_positions_advance() {
        let cfg = ChunkingConfig::default();
        let mut g1 = ChunkGenerator::new(cfg, 64, 42);
        let mut g2 = ChunkGenerator::new(cfg, 64, 42);
        for k in 0..5u64 {
            let (a, b) = (g1.next_chunk(), g2.next_chunk());
            assert_eq!(a, b);
            assert_eq!(a.position_ms, k * 10_000);
            parse_chunk(&a.encode()).unwrap();
        }
    }
}
