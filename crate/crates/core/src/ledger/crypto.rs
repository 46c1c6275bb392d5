//! Pluggable transaction and message signing.
//!
//! Ed25519 is the reference scheme. [`InsecureTestSigner`] exists so that
//! large randomized suites can sign quickly; anyone holding a public key
//! can forge its signatures, so it must never protect real data.

use std::fmt;
use std::sync::Arc;

use ed25519_dalek::{Signer as _, Verifier as _};
use thiserror::Error;

use super::codec::{Canonical, DecodeError, Reader};
use super::types::{hash32, AccountId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchemeId {
    Ed25519,
    InsecureTest,
}

impl SchemeId {
    fn tag(self) -> u8 {
        match self {
            SchemeId::Ed25519 => 0,
            SchemeId::InsecureTest => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("secret key must be 32 bytes, got {0}")]
    SecretLength(usize),
    #[error("public key must be 32 bytes, got {0}")]
    PublicLength(usize),
    #[error("public key is not a valid curve point")]
    InvalidPoint,
    #[error("key file: {0}")]
    Format(String),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey {
    scheme: SchemeId,
    bytes: [u8; 32],
}

impl PublicKey {
    pub fn from_bytes(scheme: SchemeId, bytes: &[u8]) -> Result<Self, KeyError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| KeyError::PublicLength(bytes.len()))?;
        if scheme == SchemeId::Ed25519 {
            ed25519_dalek::VerifyingKey::from_bytes(&arr).map_err(|_| KeyError::InvalidPoint)?;
        }
        Ok(Self { scheme, bytes: arr })
    }

    pub fn scheme(&self) -> SchemeId {
        self.scheme
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    pub fn account_id(&self) -> AccountId {
        AccountId::from_public_key_bytes(&self.to_canonical_bytes())
    }

    /// Malformed signature bytes verify as `false`, never as an error.
    pub fn verify(&self, msg: &[u8], sig: &[u8]) -> bool {
        match self.scheme {
            SchemeId::Ed25519 => {
                let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&self.bytes) else {
                    return false;
                };
                let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
                    return false;
                };
                vk.verify(msg, &sig).is_ok()
            }
            SchemeId::InsecureTest => sig == insecure_tag(&self.bytes, msg),
        }
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({:?}, {})", self.scheme, hex::encode(&self.bytes[..4]))
    }
}

impl Canonical for PublicKey {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.scheme.tag());
        out.extend_from_slice(&self.bytes);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let scheme = match r.u8()? {
            0 => SchemeId::Ed25519,
            1 => SchemeId::InsecureTest,
            tag => return Err(DecodeError::InvalidTag { ty: "signature scheme", tag }),
        };
        // Point validity is checked at verification time so that decoding
        // stays a pure structural step.
        Ok(PublicKey { scheme, bytes: r.array()? })
    }
}

/// Anything that can produce signatures for one public key.
pub trait Signer: Send + Sync {
    fn public_key(&self) -> PublicKey;
    fn sign(&self, msg: &[u8]) -> Vec<u8>;

    fn account_id(&self) -> AccountId {
        self.public_key().account_id()
    }
}

pub type SharedSigner = Arc<dyn Signer>;

pub struct Ed25519Signer {
    key: ed25519_dalek::SigningKey,
}

impl Ed25519Signer {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { key: ed25519_dalek::SigningKey::from_bytes(&seed) }
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        let seed: [u8; 32] = bytes.try_into().map_err(|_| KeyError::SecretLength(bytes.len()))?;
        Ok(Self::from_seed(seed))
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.key.to_bytes()
    }
}

impl Signer for Ed25519Signer {
    fn public_key(&self) -> PublicKey {
        PublicKey { scheme: SchemeId::Ed25519, bytes: self.key.verifying_key().to_bytes() }
    }

    fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.key.sign(msg).to_bytes().to_vec()
    }
}

fn insecure_tag(pk: &[u8; 32], msg: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(48 + msg.len());
    buf.extend_from_slice(b"insecure-test-signer");
    buf.extend_from_slice(pk);
    buf.extend_from_slice(msg);
    hash32(&buf).0.to_vec()
}

/// Keyed-hash "signature" whose public key equals its secret.
pub struct InsecureTestSigner {
    key: [u8; 32],
}

impl InsecureTestSigner {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { key: seed }
    }
}

impl Signer for InsecureTestSigner {
    fn public_key(&self) -> PublicKey {
        PublicKey { scheme: SchemeId::InsecureTest, bytes: self.key }
    }

    fn sign(&self, msg: &[u8]) -> Vec<u8> {
        insecure_tag(&self.key, msg)
    }
}

/// Builds a signer of the given scheme from a 32-byte seed.
pub fn signer_from_seed(scheme: SchemeId, seed: [u8; 32]) -> SharedSigner {
    match scheme {
        SchemeId::Ed25519 => Arc::new(Ed25519Signer::from_seed(seed)),
        SchemeId::InsecureTest => Arc::new(InsecureTestSigner::from_seed(seed)),
    }
}

/// Deterministic seed for a named identity, e.g. a node id or a demo account.
pub fn seed_from_label(label: &str) -> [u8; 32] {
    hash32(format!("chainlog-key:{label}").as_bytes()).0
}

/// Reads an Ed25519 key file: 64 hex characters of secret seed.
pub fn load_key_file(path: &std::path::Path) -> Result<Ed25519Signer, KeyError> {
    let text = std::fs::read_to_string(path).map_err(|e| KeyError::Format(format!("{}: {e}", path.display())))?;
    let bytes = hex::decode(text.trim()).map_err(|e| KeyError::Format(e.to_string()))?;
    Ed25519Signer::from_secret_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ed25519_sign_verify() {
        let s = Ed25519Signer::from_seed([7; 32]);
        let sig = s.sign(b"hello");
        assert!(s.public_key().verify(b"hello", &sig));
        assert!(!s.public_key().verify(b"hellp", &sig));
        assert!(!s.public_key().verify(b"hello", &sig[..10]));
    }

    #[test]
    fn malformed_secret_is_an_error() {
        assert_eq!(Ed25519Signer::from_secret_bytes(&[1, 2, 3]).err(), Some(KeyError::SecretLength(3)));
        assert_eq!(PublicKey::from_bytes(SchemeId::Ed25519, &[0; 31]).err(), Some(KeyError::PublicLength(31)));
    }

    #[test]
    fn schemes_do_not_cross_verify() {
        let a = Ed25519Signer::from_seed([1; 32]);
        let b = InsecureTestSigner::from_seed([1; 32]);
        assert_ne!(a.account_id(), b.account_id());
        assert!(!b.public_key().verify(b"m", &a.sign(b"m")));
    }
}
