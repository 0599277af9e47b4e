//! Ed25519 device identities.
//!
//! Cameras are identified by their public key alone; gateways additionally
//! hold the secret half and sign transactions and consensus votes with it.
//! The device id shown to humans and CLI flags is the lowercase hex of the
//! public key, always 64 characters.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use ed25519_dalek::{Signer, Verifier};
use rand::rngs::OsRng;
use rand::RngCore;
use thiserror::Error;

use crate::encoding;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SEED_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("seed must be exactly {SEED_LEN} bytes, got {0}")]
    BadSeedLength(usize),
    #[error("public key must be exactly {PUBLIC_KEY_LEN} bytes, got {0}")]
    BadKeyLength(usize),
    #[error("signature must be exactly {SIGNATURE_LEN} bytes, got {0}")]
    BadSignatureLength(usize),
    #[error("invalid hex public key")]
    BadHex,
    #[error("identity has no secret key; cannot sign")]
    MissingSecret,
    #[error("seed file {path}: {source}")]
    SeedFile {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// A 32-byte Ed25519 public key. Doubles as the device id.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_bytes(bytes: [u8; PUBLIC_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, IdentityError> {
        bytes
            .try_into()
            .map(Self)
            .map_err(|_| IdentityError::BadKeyLength(bytes.len()))
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let bytes: [u8; PUBLIC_KEY_LEN] =
            encoding::from_hex(s).map_err(|_| IdentityError::BadHex)?;
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    /// Lowercase hex rendering, 64 characters.
    pub fn to_hex(&self) -> String {
        encoding::to_hex(&self.0)
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}..)", &self.to_hex()[..8])
    }
}

/// A 64-byte Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature([u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_bytes(bytes: [u8; SIGNATURE_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, IdentityError> {
        bytes
            .try_into()
            .map(Self)
            .map_err(|_| IdentityError::BadSignatureLength(bytes.len()))
    }

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        encoding::to_hex(&self.0)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", &self.to_hex()[..8])
    }
}

/// A camera or gateway identity. Remote identities carry no secret.
#[derive(Clone)]
pub struct DeviceIdentity {
    public: PublicKey,
    seed: Option<[u8; SEED_LEN]>,
}

impl DeviceIdentity {
    /// Generates a fresh identity from the system CSPRNG.
    pub fn generate() -> Self {
        let mut seed = [0u8; SEED_LEN];
        OsRng.fill_bytes(&mut seed);
        Self::from_seed(&seed).expect("seed length is fixed")
    }

    /// Derives the identity deterministically from a 32-byte seed.
    pub fn from_seed(seed: &[u8]) -> Result<Self, IdentityError> {
        let seed: [u8; SEED_LEN] = seed
            .try_into()
            .map_err(|_| IdentityError::BadSeedLength(seed.len()))?;
        let signing = ed25519_dalek::SigningKey::from_bytes(&seed);
        let public = PublicKey(signing.verifying_key().to_bytes());
        Ok(Self {
            public,
            seed: Some(seed),
        })
    }

    /// Wraps a bare public key (no signing capability).
    pub fn remote(public: PublicKey) -> Self {
        Self { public, seed: None }
    }

    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    /// Lowercase hex of the public key; the canonical device id.
    pub fn device_id(&self) -> String {
        self.public.to_hex()
    }

    pub fn has_secret(&self) -> bool {
        self.seed.is_some()
    }

    /// Signs `message`, failing if this identity is public-only.
    pub fn sign(&self, message: &[u8]) -> Result<Signature, IdentityError> {
        let seed = self.seed.ok_or(IdentityError::MissingSecret)?;
        let signing = ed25519_dalek::SigningKey::from_bytes(&seed);
        Ok(Signature(signing.sign(message).to_bytes()))
    }

    /// Writes the raw 32-byte seed, owner-readable only where supported.
    pub fn write_seed_file(&self, path: &Path) -> Result<(), IdentityError> {
        let seed = self.seed.ok_or(IdentityError::MissingSecret)?;
        let wrap = |source| IdentityError::SeedFile {
            path: path.display().to_string(),
            source,
        };
        fs::write(path, seed).map_err(wrap)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(path, fs::Permissions::from_mode(0o600)).map_err(wrap)?;
        }
        Ok(())
    }

    /// Loads an identity from a raw 32-byte seed file.
    pub fn load_seed_file(path: &Path) -> Result<Self, IdentityError> {
        let bytes = fs::read(path).map_err(|source| IdentityError::SeedFile {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_seed(&bytes)
    }
}

impl fmt::Debug for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceIdentity")
            .field("public", &self.public)
            .field("has_secret", &self.has_secret())
            .finish()
    }
}

/// Checks `sig` over `message` under `public_key`.
pub fn verify(public_key: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(public_key.as_bytes()) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(sig.as_bytes());
    vk.verify(message, &sig).is_ok()
}

/// Length-tolerant verification for audit paths: malformed inputs are
/// reported as `false`, never as an error.
pub fn verify_bytes(public_key: &[u8], message: &[u8], sig: &[u8]) -> bool {
    let (Ok(pk), Ok(sig)) = (PublicKey::from_slice(public_key), Signature::from_slice(sig))
    else {
        return false;
    };
    verify(&pk, message, &sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    // RFC 8032 section 7.1 test vectors.
    const TV1_SEED: &str = "9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60";
    const TV1_PUBLIC: &str = "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a";
    const TV1_SIG: &str = "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b";
    const TV3_SEED: &str = "c5aa8df43f9f837bedb7442f31dcb7b166d38535076f094b85ce3a2e0b4458f7";
    const TV3_PUBLIC: &str = "fc51cd8e6218a1a38da47ed00230f0580816ed13ba3303ac5deb911548908025";
    const TV3_MSG: &[u8] = &[0xaf, 0x82];
    const TV3_SIG: &str = "6291d657deec24024827e69c3abe01a30ce548a284743a445e3680d7db5ac3ac18ff9b538d16f290ae67f760984dc6594a7c15e9716ed28dc027beceea1ec40a";

    fn hex32(s: &str) -> [u8; 32] {
        encoding::from_hex(s).unwrap()
    }

    #[test]
    fn rfc8032_vector_1_public_key() {
        let id = DeviceIdentity::from_seed(&hex32(TV1_SEED)).unwrap();
        assert_eq!(id.device_id(), TV1_PUBLIC);
    }

    #[test]
    fn rfc8032_vector_1_signature() {
        let id = DeviceIdentity::from_seed(&hex32(TV1_SEED)).unwrap();
        let sig = id.sign(b"").unwrap();
        assert_eq!(sig.to_hex(), TV1_SIG);
    }

    #[test]
    fn rfc8032_vector_3_sign_and_verify() {
        let id = DeviceIdentity::from_seed(&hex32(TV3_SEED)).unwrap();
        assert_eq!(id.device_id(), TV3_PUBLIC);
        let sig = id.sign(TV3_MSG).unwrap();
        assert_eq!(sig.to_hex(), TV3_SIG);
        assert!(verify(&id.public_key(), TV3_MSG, &sig));
    }

    #[test]
    fn random_identities_are_distinct() {
        let a = DeviceIdentity::generate();
        let b = DeviceIdentity::generate();
        assert_ne!(a.public_key(), b.public_key());
    }

    #[test]
    fn same_seed_same_identity() {
        let seed = [7u8; 32];
        let a = DeviceIdentity::from_seed(&seed).unwrap();
        let b = DeviceIdentity::from_seed(&seed).unwrap();
        assert_eq!(a.public_key(), b.public_key());
    }

    #[test]
    fn bad_seed_length_rejected() {
        assert!(matches!(
            DeviceIdentity::from_seed(&[0u8; 31]),
            Err(IdentityError::BadSeedLength(31))
        ));
    }

    #[test]
    fn device_id_is_64_hex_chars() {
        let id = DeviceIdentity::generate();
        let rendered = id.device_id();
        assert_eq!(rendered.len(), 64);
        assert!(rendered.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    }

    #[test]
    fn remote_identity_cannot_sign() {
        let id = DeviceIdentity::remote(DeviceIdentity::generate().public_key());
        assert!(matches!(id.sign(b"x"), Err(IdentityError::MissingSecret)));
    }

    #[test]
    fn different_messages_different_signatures() {
        let id = DeviceIdentity::generate();
        let s1 = id.sign(b"one").unwrap();
        let s2 = id.sign(b"two").unwrap();
        assert_ne!(s1.as_bytes(), s2.as_bytes());
    }

    #[test]
    fn flipped_message_bit_fails_verification() {
        let id = DeviceIdentity::generate();
        let msg = b"surveillance chunk 42".to_vec();
        let sig = id.sign(&msg).unwrap();
        for i in 0..msg.len() {
            for bit in 0..8 {
                let mut m = msg.clone();
                m[i] ^= 1 << bit;
                assert!(!verify(&id.public_key(), &m, &sig));
            }
        }
    }

    #[test]
    fn flipped_signature_bit_fails_verification() {
        let id = DeviceIdentity::generate();
        let msg = b"chunk";
        let sig = id.sign(msg).unwrap();
        for i in 0..SIGNATURE_LEN {
            let mut s = *sig.as_bytes();
            s[i] ^= 0x01;
            assert!(!verify(&id.public_key(), msg, &Signature::from_bytes(s)));
        }
    }

    #[test]
    fn malformed_lengths_verify_false_not_error() {
        let id = DeviceIdentity::generate();
        let sig = id.sign(b"m").unwrap();
        assert!(!verify_bytes(&[0u8; 31], b"m", sig.as_bytes()));
        assert!(!verify_bytes(id.public_key().as_bytes(), b"m", &[0u8; 63]));
        assert!(verify_bytes(id.public_key().as_bytes(), b"m", sig.as_bytes()));
    }

    #[test]
    fn seed_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gw.seed");
        let id = DeviceIdentity::generate();
        id.write_seed_file(&path).unwrap();
        let loaded = DeviceIdentity::load_seed_file(&path).unwrap();
        assert_eq!(loaded.public_key(), id.public_key());
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = std::fs::metadata(&path).unwrap().permissions().mode();
            assert_eq!(mode & 0o777, 0o600);
        }
    }
}
