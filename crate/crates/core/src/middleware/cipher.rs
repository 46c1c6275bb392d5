//! Payload encryption for client operations.
//!
//! TEXT values are sealed column by column while table and column names stay
//! plaintext, so consensus, replay and permission checks keep working on
//! ciphertext. Every scheme here is deterministic: the same key and plaintext
//! give the same ciphertext, which keeps equality filters on encrypted
//! columns usable and simulated scenarios reproducible.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

use crate::ledger::{Literal, Predicate, SqlOperation};
use crate::sqlvm::RowView;

/// Prefix marking an encrypted TEXT value.
pub const ENC_PREFIX: &str = "enc1:";

const NONCE_LEN: usize = 12;
const TEST_TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncryptionMode {
    None,
    Symmetric { key_id: String },
    Asymmetric { recipient: [u8; 32] },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CipherError {
    #[error("no key {0:?} in the keyring")]
    MissingKey(String),
    #[error("no private key for recipient {0}")]
    MissingRecipient(String),
    #[error("ciphertext failed authentication")]
    Integrity,
    #[error("ciphertext is malformed")]
    Malformed,
    #[error("decrypted value is not UTF-8")]
    NotText,
}

/// A sealing scheme bound to its key material.
pub trait PayloadCipher {
    fn seal(&self, plaintext: &[u8]) -> Vec<u8>;
    fn open(&self, ciphertext: &[u8]) -> Result<Vec<u8>, CipherError>;
}

fn hmac256(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac takes any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// ChaCha20-Poly1305 with a synthetic nonce: the nonce is an HMAC of the
/// plaintext, and it is rechecked after decryption.
pub struct SymmetricCipher {
    key: [u8; 32],
}

impl SymmetricCipher {
    pub fn new(key: [u8; 32]) -> Self {
        Self { key }
    }

    fn nonce_key(&self) -> [u8; 32] {
        hmac256(&self.key, &[b"chainlog-siv-nonce"])
    }
}

impl PayloadCipher for SymmetricCipher {
    fn seal(&self, plaintext: &[u8]) -> Vec<u8> {
        let nonce = hmac256(&self.nonce_key(), &[plaintext]);
        let nonce = &nonce[..NONCE_LEN];
        let aead = ChaCha20Poly1305::new(Key::from_slice(&self.key));
        let ct = aead.encrypt(Nonce::from_slice(nonce), plaintext).expect("chacha20poly1305 seal is infallible");
        let mut out = nonce.to_vec();
        out.extend_from_slice(&ct);
        out
    }

    fn open(&self, ciphertext: &[u8]) -> Result<Vec<u8>, CipherError> {
        if ciphertext.len() < NONCE_LEN + 16 {
            return Err(CipherError::Malformed);
        }
        let (nonce, ct) = ciphertext.split_at(NONCE_LEN);
        let aead = ChaCha20Poly1305::new(Key::from_slice(&self.key));
        let pt = aead.decrypt(Nonce::from_slice(nonce), ct).map_err(|_| CipherError::Integrity)?;
        if hmac256(&self.nonce_key(), &[&pt])[..NONCE_LEN] != *nonce {
            return Err(CipherError::Integrity);
        }
        Ok(pt)
    }
}

/// X25519 key agreement, HKDF-SHA256 and ChaCha20-Poly1305. The ephemeral
/// key is derived from the recipient and the plaintext.
pub struct HybridSealer {
    recipient: [u8; 32],
}

impl HybridSealer {
    pub fn new(recipient: [u8; 32]) -> Self {
        Self { recipient }
    }
}

fn hybrid_key(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    let mut salt = eph.to_vec();
    salt.extend_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(b"chainlog-hybrid-v1", &mut okm).expect("32 bytes is a valid hkdf output length");
    okm
}

impl PayloadCipher for HybridSealer {
    fn seal(&self, plaintext: &[u8]) -> Vec<u8> {
        let eph_secret = StaticSecret::from(hmac256(&self.recipient, &[b"chainlog-hybrid-eph", plaintext]));
        let eph_public = XPublic::from(&eph_secret).to_bytes();
        let shared = eph_secret.diffie_hellman(&XPublic::from(self.recipient)).to_bytes();
        let key = hybrid_key(&shared, &eph_public, &self.recipient);
        let mut out = eph_public.to_vec();
        out.extend_from_slice(&SymmetricCipher::new(key).seal(plaintext));
        out
    }

    fn open(&self, _ciphertext: &[u8]) -> Result<Vec<u8>, CipherError> {
        Err(CipherError::MissingRecipient(hex::encode(self.recipient)))
    }
}

pub struct HybridOpener {
    secret: StaticSecret,
}

impl HybridOpener {
    pub fn new(secret: [u8; 32]) -> Self {
        Self { secret: StaticSecret::from(secret) }
    }

    pub fn public_key(&self) -> [u8; 32] {
        XPublic::from(&self.secret).to_bytes()
    }
}

impl PayloadCipher for HybridOpener {
    fn seal(&self, plaintext: &[u8]) -> Vec<u8> {
        HybridSealer::new(self.public_key()).seal(plaintext)
    }

    fn open(&self, ciphertext: &[u8]) -> Result<Vec<u8>, CipherError> {
        if ciphertext.len() < 32 {
            return Err(CipherError::Malformed);
        }
        let (eph, rest) = ciphertext.split_at(32);
        let eph: [u8; 32] = eph.try_into().expect("split at 32");
        let shared = self.secret.diffie_hellman(&XPublic::from(eph)).to_bytes();
        let key = hybrid_key(&shared, &eph, &self.public_key());
        SymmetricCipher::new(key).open(rest)
    }
}

/// Fast keyed stream cipher with a truncated MAC. For test suites only.
pub struct TestCipher {
    key: [u8; 32],
}

impl TestCipher {
    pub fn new(key: [u8; 32]) -> Self {
        Self { key }
    }

    fn keystream(&self, tag: &[u8], len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len + 32);
        let mut ctr = 0u64;
        while out.len() < len {
            let mut h = Sha256::new();
            h.update(self.key);
            h.update(tag);
            h.update(ctr.to_be_bytes());
            out.extend_from_slice(&h.finalize());
            ctr += 1;
        }
        out.truncate(len);
        out
    }
}

impl PayloadCipher for TestCipher {
    fn seal(&self, plaintext: &[u8]) -> Vec<u8> {
        let tag = &hmac256(&self.key, &[plaintext])[..TEST_TAG_LEN];
        let mut out = tag.to_vec();
        out.extend(plaintext.iter().zip(self.keystream(tag, plaintext.len())).map(|(p, k)| p ^ k));
        out
    }

    fn open(&self, ciphertext: &[u8]) -> Result<Vec<u8>, CipherError> {
        if ciphertext.len() < TEST_TAG_LEN {
            return Err(CipherError::Malformed);
        }
        let (tag, body) = ciphertext.split_at(TEST_TAG_LEN);
        let pt: Vec<u8> = body.iter().zip(self.keystream(tag, body.len())).map(|(c, k)| c ^ k).collect();
        if hmac256(&self.key, &[&pt])[..TEST_TAG_LEN] != *tag {
            return Err(CipherError::Integrity);
        }
        Ok(pt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetricScheme {
    ChaCha20Poly1305,
    Test,
}

#[derive(Clone, Default)]
pub struct Keyring {
    symmetric: BTreeMap<String, (SymmetricScheme, [u8; 32])>,
    secrets: BTreeMap<[u8; 32], [u8; 32]>,
}

impl std::fmt::Debug for Keyring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Keyring")
            .field("symmetric", &self.symmetric.keys().collect::<Vec<_>>())
            .field("recipients", &self.secrets.keys().map(hex::encode).collect::<Vec<_>>())
            .finish()
    }
}

impl Keyring {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_symmetric(&mut self, key_id: impl Into<String>, scheme: SymmetricScheme, key: [u8; 32]) {
        self.symmetric.insert(key_id.into(), (scheme, key));
    }

    /// Stores an X25519 private key and returns its public half.
    pub fn add_recipient_secret(&mut self, secret: [u8; 32]) -> [u8; 32] {
        let public = HybridOpener::new(secret).public_key();
        self.secrets.insert(public, secret);
        public
    }

    pub fn cipher(&self, mode: &EncryptionMode) -> Result<Option<Box<dyn PayloadCipher>>, CipherError> {
        Ok(match mode {
            EncryptionMode::None => None,
            EncryptionMode::Symmetric { key_id } => {
                let (scheme, key) =
                    *self.symmetric.get(key_id).ok_or_else(|| CipherError::MissingKey(key_id.clone()))?;
                Some(match scheme {
                    SymmetricScheme::ChaCha20Poly1305 => Box::new(SymmetricCipher::new(key)),
                    SymmetricScheme::Test => Box::new(TestCipher::new(key)),
                })
            }
            EncryptionMode::Asymmetric { recipient } => match self.secrets.get(recipient) {
                Some(secret) => Some(Box::new(HybridOpener::new(*secret))),
                None => Some(Box::new(HybridSealer::new(*recipient))),
            },
        })
    }
}

pub fn encrypt_payload(keys: &Keyring, mode: &EncryptionMode, plaintext: &[u8]) -> Result<Vec<u8>, CipherError> {
    Ok(match keys.cipher(mode)? {
        None => plaintext.to_vec(),
        Some(c) => c.seal(plaintext),
    })
}

pub fn decrypt_payload(keys: &Keyring, mode: &EncryptionMode, ciphertext: &[u8]) -> Result<Vec<u8>, CipherError> {
    match keys.cipher(mode)? {
        None => Ok(ciphertext.to_vec()),
        Some(c) => c.open(ciphertext),
    }
}

fn seal_literal(c: &dyn PayloadCipher, v: &Literal) -> Literal {
    match v {
        Literal::Text(s) => Literal::Text(format!("{ENC_PREFIX}{}", B64.encode(c.seal(s.as_bytes())))),
        other => other.clone(),
    }
}

fn open_literal(c: &dyn PayloadCipher, v: &Literal) -> Result<Literal, CipherError> {
    match v {
        Literal::Text(s) => match s.strip_prefix(ENC_PREFIX) {
            Some(b) => {
                let ct = B64.decode(b).map_err(|_| CipherError::Malformed)?;
                Ok(Literal::Text(String::from_utf8(c.open(&ct)?).map_err(|_| CipherError::NotText)?))
            }
            None => Ok(v.clone()),
        },
        other => Ok(other.clone()),
    }
}

fn seal_filter(c: &dyn PayloadCipher, filter: &[Predicate]) -> Vec<Predicate> {
    filter.iter().map(|p| Predicate { column: p.column.clone(), value: seal_literal(c, &p.value) }).collect()
}

/// Seals TEXT values in INSERT, UPDATE and the filters of UPDATE and DELETE.
pub fn encrypt_operation(keys: &Keyring, mode: &EncryptionMode, op: &SqlOperation) -> Result<SqlOperation, CipherError> {
    let Some(c) = keys.cipher(mode)? else {
        return Ok(op.clone());
    };
    let c = c.as_ref();
    Ok(match op {
        SqlOperation::Insert { table, values } => SqlOperation::Insert {
            table: table.clone(),
            values: values.iter().map(|(k, v)| (k.clone(), seal_literal(c, v))).collect(),
        },
        SqlOperation::Update { table, filter, set } => SqlOperation::Update {
            table: table.clone(),
            filter: seal_filter(c, filter),
            set: set.iter().map(|(k, v)| (k.clone(), seal_literal(c, v))).collect(),
        },
        SqlOperation::Delete { table, filter } => {
            SqlOperation::Delete { table: table.clone(), filter: seal_filter(c, filter) }
        }
        other => other.clone(),
    })
}

pub fn encrypt_filter(keys: &Keyring, mode: &EncryptionMode, filter: &[Predicate]) -> Result<Vec<Predicate>, CipherError> {
    Ok(match keys.cipher(mode)? {
        None => filter.to_vec(),
        Some(c) => seal_filter(c.as_ref(), filter),
    })
}

/// Opens every `enc1:` value in the rows; other values pass through.
pub fn decrypt_rows(keys: &Keyring, mode: &EncryptionMode, rows: &[RowView]) -> Result<Vec<RowView>, CipherError> {
    let Some(c) = keys.cipher(mode)? else {
        return Ok(rows.to_vec());
    };
    rows.iter()
        .map(|r| {
            let values = r
                .values
                .iter()
                .map(|(k, v)| Ok((k.clone(), open_literal(c.as_ref(), v)?)))
                .collect::<Result<_, CipherError>>()?;
            Ok(RowView { row_id: r.row_id, values })
        })
        .collect()
}
