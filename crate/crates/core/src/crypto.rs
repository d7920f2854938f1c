//! Authenticated encryption, the chain hash and emulated TEE key derivation.
//!
//! Every byte that crosses a trust boundary (client <-> context messages and
//! the sealed blobs handed to the untrusted host) goes through
//! [`auth_encrypt`] / [`auth_decrypt`]. The cipher is AES-128-GCM with a
//! fresh random 96-bit nonce per call.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const DIGEST_LEN: usize = 32;

/// Bytes an [`Envelope`] adds on top of its plaintext.
pub const ENVELOPE_OVERHEAD: usize = NONCE_LEN + TAG_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failure")]
    AuthenticationFailure,
}

/// A 128-bit symmetric key.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey([u8; KEY_LEN]);

impl SymKey {
    pub const fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn generate() -> Self {
        Self::generate_with(&mut OsRng)
    }

    pub fn generate_with<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

/// Output of [`auth_encrypt`]. Byte layout: `nonce (12) || ciphertext || tag (16)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl Envelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    /// Splits a raw buffer into its fields. Anything shorter than nonce + tag
    /// cannot be a valid envelope.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < ENVELOPE_OVERHEAD {
            return Err(CryptoError::AuthenticationFailure);
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(Self {
            nonce: nonce.try_into().expect("split at nonce length"),
            ciphertext: ciphertext.to_vec(),
            tag: tag.try_into().expect("split at tag length"),
        })
    }

    pub fn encoded_len(&self) -> usize {
        ENVELOPE_OVERHEAD + self.ciphertext.len()
    }
}

/// A SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    /// The chain origin: 32 zero bytes. Serves both as the clients' initial
    /// `h_c` and the context's initial `h`.
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Software stand-in for a TEE's hardware-rooted key material.
#[derive(Clone)]
pub struct PlatformIdentity {
    pub platform_id: String,
    platform_secret: [u8; 32],
}

impl PlatformIdentity {
    pub fn new(platform_id: impl Into<String>, platform_secret: [u8; 32]) -> Self {
        Self {
            platform_id: platform_id.into(),
            platform_secret,
        }
    }

    pub fn generate(platform_id: impl Into<String>) -> Self {
        Self::generate_with(platform_id, &mut OsRng)
    }

    pub fn generate_with<R: RngCore + CryptoRng>(platform_id: impl Into<String>, rng: &mut R) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self::new(platform_id, secret)
    }
}

impl fmt::Debug for PlatformIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlatformIdentity")
            .field("platform_id", &self.platform_id)
            .finish_non_exhaustive()
    }
}

pub fn auth_encrypt(plaintext: &[u8], key: &SymKey) -> Envelope {
    let cipher = Aes128Gcm::new(key.0.as_slice().into());
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    let mut sealed = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext)
        .expect("AES-GCM encryption cannot fail for in-memory buffers");
    let tag_start = sealed.len() - TAG_LEN;
    let tag: [u8; TAG_LEN] = sealed[tag_start..].try_into().expect("tag length");
    sealed.truncate(tag_start);
    Envelope {
        nonce,
        ciphertext: sealed,
        tag,
    }
}

pub fn auth_decrypt(envelope: &Envelope, key: &SymKey) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes128Gcm::new(key.0.as_slice().into());
    let mut sealed = Vec::with_capacity(envelope.ciphertext.len() + TAG_LEN);
    sealed.extend_from_slice(&envelope.ciphertext);
    sealed.extend_from_slice(&envelope.tag);
    cipher
        .decrypt(Nonce::from_slice(&envelope.nonce), sealed.as_slice())
        .map_err(|_| CryptoError::AuthenticationFailure)
}

/// Extends the hash chain by one operation.
///
/// Input encoding: `prev (32) || len(op) as u32 BE || op || t as u64 BE || client as u32 BE`.
/// The length prefix keeps `(op, t)` boundaries unambiguous.
pub fn chain_hash(prev: &Digest, op_bytes: &[u8], t: u64, client_id: u32) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update(prev.0);
    hasher.update((op_bytes.len() as u32).to_be_bytes());
    hasher.update(op_bytes);
    hasher.update(t.to_be_bytes());
    hasher.update(client_id.to_be_bytes());
    Digest(hasher.finalize().into())
}

/// Emulated `get-key`: HKDF-SHA256 keyed by the platform secret with the
/// program identity as the info string.
pub fn get_key(platform: &PlatformIdentity, program_id: &[u8]) -> SymKey {
    let hk = Hkdf::<Sha256>::new(Some(b"lcm-get-key"), &platform.platform_secret);
    let mut okm = [0u8; KEY_LEN];
    hk.expand(program_id, &mut okm)
        .expect("16 bytes is a valid HKDF-SHA256 output length");
    SymKey(okm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_message_round_trips() {
        let k = SymKey::generate();
        let env = auth_encrypt(b"", &k);
        assert!(env.ciphertext.is_empty());
        assert_eq!(auth_decrypt(&env, &k).unwrap(), b"");
    }

    #[test]
    fn wrong_key_fails() {
        let k1 = SymKey::generate();
        let k2 = SymKey::generate();
        let env = auth_encrypt(b"hello", &k1);
        assert_eq!(auth_decrypt(&env, &k2), Err(CryptoError::AuthenticationFailure));
    }

    #[test]
    fn flipped_ciphertext_bit_fails() {
        let k = SymKey::generate();
        let mut env = auth_encrypt(b"payload", &k);
        env.ciphertext[3] ^= 0x10;
        assert_eq!(auth_decrypt(&env, &k), Err(CryptoError::AuthenticationFailure));
    }

    #[test]
    fn truncated_tag_fails() {
        let k = SymKey::generate();
        let env = auth_encrypt(b"payload", &k);
        let mut bytes = env.to_bytes();
        bytes.pop();
        // Dropping a tag byte shifts the last ciphertext byte into the tag.
        let parsed = Envelope::from_bytes(&bytes).unwrap();
        assert_eq!(auth_decrypt(&parsed, &k), Err(CryptoError::AuthenticationFailure));
        assert!(Envelope::from_bytes(&bytes[..ENVELOPE_OVERHEAD - 1]).is_err());
    }

    #[test]
    fn envelope_layout_is_nonce_ciphertext_tag() {
        let k = SymKey::generate();
        let env = auth_encrypt(b"abc", &k);
        let bytes = env.to_bytes();
        assert_eq!(bytes.len(), 3 + ENVELOPE_OVERHEAD);
        assert_eq!(&bytes[..NONCE_LEN], &env.nonce);
        assert_eq!(&bytes[NONCE_LEN..NONCE_LEN + 3], env.ciphertext.as_slice());
        assert_eq!(&bytes[NONCE_LEN + 3..], &env.tag);
        assert_eq!(Envelope::from_bytes(&bytes).unwrap(), env);
    }

    #[test]
    fn nonces_are_fresh() {
        let k = SymKey::generate();
        let a = auth_encrypt(b"same", &k);
        let b = auth_encrypt(b"same", &k);
        assert_ne!(a.nonce, b.nonce);
    }

    #[test]
    fn chain_binds_client_id() {
        let a = chain_hash(&Digest::ZERO, b"op_a", 1, 1);
        let b = chain_hash(&Digest::ZERO, b"op_a", 1, 2);
        assert_ne!(a, b);
        assert_eq!(a, chain_hash(&Digest::ZERO, b"op_a", 1, 1));
    }

    #[test]
    fn get_key_binds_platform_and_program() {
        let p1 = PlatformIdentity::new("p1", [1; 32]);
        let p2 = PlatformIdentity::new("p2", [2; 32]);
        assert_eq!(get_key(&p1, b"lcm"), get_key(&p1, b"lcm"));
        assert_ne!(get_key(&p1, b"lcm"), get_key(&p2, b"lcm"));
        assert_ne!(get_key(&p1, b"lcm"), get_key(&p1, b"other"));
    }

    #[test]
    fn digest_hex_round_trip() {
        let d = chain_hash(&Digest::ZERO, b"x", 1, 1);
        assert_eq!(Digest::from_hex(&d.to_hex()), Some(d));
        assert_eq!(Digest::from_hex("zz"), None);
    }
}
