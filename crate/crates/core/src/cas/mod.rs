//! Content-addressed chunk store.
//!
//! An object's address is the SHA-256 of its bytes, rendered as 64 lowercase
//! hex characters. The store re-hashes on every read, so bytes that rot or
//! are edited on disk surface as an integrity failure instead of silently
//! flowing into an audit.
//!
//! Objects live under a two-level fan-out keyed by the first two address
//! characters: `<root>/<c0>/<c1>/<hex64>`.

mod net;

pub use net::{CasClient, CasServer, ClientError, FetchResult};

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::encoding::{from_hex, sha256, to_hex};

/// SHA-256-derived storage address of an object.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentAddress([u8; 32]);

impl ContentAddress {
    pub fn from_content(content: &[u8]) -> Self {
        Self(sha256(content))
    }

    pub fn from_digest(digest: [u8; 32]) -> Self {
        Self(digest)
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.0
    }

    /// Lowercase hex, exactly 64 characters.
    pub fn to_hex(&self) -> String {
        to_hex(&self.0)
    }
}

impl fmt::Display for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentAddress({}..)", &self.to_hex()[..8])
    }
}

impl FromStr for ContentAddress {
    type Err = CasError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        from_hex::<32>(s)
            .map(Self)
            .map_err(|_| CasError::BadAddress(s.to_string()))
    }
}

/// True iff `content` hashes to `address`.
pub fn verify_address(address: &ContentAddress, content: &[u8]) -> bool {
    sha256(content) == *address.digest()
}

#[derive(Debug, Error)]
pub enum CasError {
    #[error("content must not be empty")]
    EmptyContent,
    #[error("object {0} not found")]
    NotFound(ContentAddress),
    #[error("object {address} failed integrity check: stored bytes hash to {actual}")]
    IntegrityFailure {
        address: ContentAddress,
        actual: ContentAddress,
    },
    #[error("not a valid content address: {0:?}")]
    BadAddress(String),
    #[error("{class} storage error: {source}")]
    Storage {
        class: StorageErrorClass,
        #[source]
        source: io::Error,
    },
}

/// Whether a storage I/O failure is worth retrying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageErrorClass {
    Transient,
    Permanent,
}

impl fmt::Display for StorageErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Transient => f.write_str("transient"),
            Self::Permanent => f.write_str("permanent"),
        }
    }
}

fn classify(source: io::Error) -> CasError {
    let class = match source.kind() {
        io::ErrorKind::Interrupted
        | io::ErrorKind::WouldBlock
        | io::ErrorKind::TimedOut
        | io::ErrorKind::ResourceBusy => StorageErrorClass::Transient,
        _ => StorageErrorClass::Permanent,
    };
    CasError::Storage { class, source }
}

/// Filesystem-backed store. Clone-free handle; safe to share behind a
/// reference across threads (all methods take `&self`).
#[derive(Debug)]
pub struct CasStore {
    root: PathBuf,
}

impl CasStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CasError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(classify)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, address: &ContentAddress) -> PathBuf {
        let hex = address.to_hex();
        self.root.join(&hex[0..1]).join(&hex[1..2]).join(hex)
    }

    /// Stores `content`, returning its address. Idempotent: storing the same
    /// bytes twice leaves a single object behind.
    pub fn put(&self, content: &[u8]) -> Result<ContentAddress, CasError> {
        if content.is_empty() {
            return Err(CasError::EmptyContent);
        }
        let address = ContentAddress::from_content(content);
        let path = self.object_path(&address);
        if path.exists() {
            return Ok(address);
        }
        let dir = path.parent().expect("object path has a parent");
        fs::create_dir_all(dir).map_err(classify)?;

        // Write-to-temp plus atomic rename: concurrent puts of the same
        // content converge on one object, and readers never see a partial
        // write.
        let tmp = dir.join(format!(
            ".tmp-{}-{:x}",
            std::process::id(),
            thread_token()
        ));
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(content)?;
            f.sync_data()?;
            fs::rename(&tmp, &path)
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(classify(e));
        }
        Ok(address)
    }

    /// Fetches an object, re-hashing before returning.
    pub fn get(&self, address: &ContentAddress) -> Result<Vec<u8>, CasError> {
        let path = self.object_path(address);
        let content = match fs::read(&path) {
            Ok(c) => c,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CasError::NotFound(*address))
            }
            Err(e) => return Err(classify(e)),
        };
        let actual = ContentAddress::from_content(&content);
        if actual != *address {
            return Err(CasError::IntegrityFailure {
                address: *address,
                actual,
            });
        }
        Ok(content)
    }

    pub fn contains(&self, address: &ContentAddress) -> bool {
        self.object_path(address).exists()
    }

    /// Number of stored objects; walks the fan-out, test/ops use only.
    pub fn object_count(&self) -> Result<usize, CasError> {
        let mut count = 0;
        for l1 in fs::read_dir(&self.root).map_err(classify)? {
            let l1 = l1.map_err(classify)?;
            if !l1.file_type().map_err(classify)?.is_dir() {
                continue;
            }
            for l2 in fs::read_dir(l1.path()).map_err(classify)? {
                let l2 = l2.map_err(classify)?;
                for obj in fs::read_dir(l2.path()).map_err(classify)? {
                    let obj = obj.map_err(classify)?;
                    if obj.file_name().to_string_lossy().len() == 64 {
                        count += 1;
                    }
                }
            }
        }
        Ok(count)
    }
}

fn thread_token() -> u64 {
    use std::collections::hash_map::RandomState;
    use std::hash::{BuildHasher, Hash, Hasher};
    let mut h = RandomState::new().build_hasher();
    std::thread::current().id().hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ABC_ADDRESS: &str = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";

    fn store() -> (tempfile::TempDir, CasStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = CasStore::open(dir.path().join("objects")).unwrap();
        (dir, store)
    }

    #[test]
    fn put_abc_matches_sha256_vector() {
        let (_d, store) = store();
        let addr = store.put(b"abc").unwrap();
        assert_eq!(addr.to_hex(), ABC_ADDRESS);
    }

    #[test]
    fn put_is_idempotent_single_object() {
        let (_d, store) = store();
        let a1 = store.put(b"same bytes").unwrap();
        let a2 = store.put(b"same bytes").unwrap();
        assert_eq!(a1, a2);
        assert_eq!(store.object_count().unwrap(), 1);
    }

    #[test]
    fn distinct_contents_distinct_addresses() {
        let (_d, store) = store();
        let a = store.put(b"one").unwrap();
        let b = store.put(b"two").unwrap();
        assert_ne!(a, b);
        assert_eq!(store.object_count().unwrap(), 2);
    }

    #[test]
    fn get_roundtrip() {
        let (_d, store) = store();
        let content = b"roundtrip me".to_vec();
        let addr = store.put(&content).unwrap();
        assert_eq!(store.get(&addr).unwrap(), content);
    }

    #[test]
    fn unknown_address_not_found() {
        let (_d, store) = store();
        let addr = ContentAddress::from_digest([0x42; 32]);
        assert!(matches!(store.get(&addr), Err(CasError::NotFound(_))));
    }

    #[test]
    fn empty_content_rejected() {
        let (_d, store) = store();
        assert!(matches!(store.put(b""), Err(CasError::EmptyContent)));
    }

    #[test]
    fn corrupted_backing_file_fails_integrity() {
        let (_d, store) = store();
        let addr = store.put(b"pristine bytes").unwrap();
        let path = store.object_path(&addr);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            store.get(&addr),
            Err(CasError::IntegrityFailure { .. })
        ));
    }

    #[test]
    fn verify_address_cases() {
        let addr: ContentAddress = ABC_ADDRESS.parse().unwrap();
        assert!(verify_address(&addr, b"abc"));
        assert!(!verify_address(&addr, b"abd"));
        let mut flipped = b"abc".to_vec();
        flipped[0] ^= 0x01;
        assert!(!verify_address(&addr, &flipped));
    }

    #[test]
    fn address_hex_roundtrip() {
        let addr = ContentAddress::from_content(b"whatever");
        let parsed: ContentAddress = addr.to_hex().parse().unwrap();
        assert_eq!(parsed, addr);
        assert_eq!(addr.to_hex().len(), 64);
        assert!("zz".parse::<ContentAddress>().is_err());
    }

    #[test]
    fn fanout_layout_uses_first_two_chars() {
        let (_d, store) = store();
        let addr = store.put(b"abc").unwrap();
        let expected = store
            .root()
            .join("b")
            .join("a")
            .join(ABC_ADDRESS);
        assert!(expected.exists());
        assert_eq!(store.object_path(&addr), expected);
    }

    #[test]
    fn concurrent_puts_of_identical_content_converge() {
        let (_d, store) = store();
        let store = std::sync::Arc::new(store);
        let content = vec![7u8; 32 * 1024];
        let mut handles = Vec::new();
        for _ in 0..8 {
            let store = store.clone();
            let content = content.clone();
            handles.push(std::thread::spawn(move || store.put(&content).unwrap()));
        }
        let addrs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(addrs.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(store.object_count().unwrap(), 1);
        assert_eq!(store.get(&addrs[0]).unwrap(), content);
    }
}
