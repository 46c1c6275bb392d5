//! On-disk chain layout.
//!
//! Each ledger lives in `ledger_<seq>.blk` as a big-endian `u32` length
//! followed by its canonical bytes. `chain.manifest` holds one
//! `<seq> <header-hash-hex>` line per ledger ever written.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::block::{verify_chain, verify_chain_from, BrokenReason, ChainAnchor, ChainError, Ledger};
use super::codec::{Canonical, DecodeError};
use super::types::Hash32;

pub const MANIFEST: &str = "chain.manifest";

pub fn ledger_file_name(seq: u64) -> String {
    format!("ledger_{seq}.blk")
}

/// Minimal named-blob storage backing a node's data directory.
pub trait FileStore: Send + Sync + fmt::Debug {
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>>;
    fn write(&self, name: &str, data: &[u8]) -> io::Result<()>;
    fn append(&self, name: &str, data: &[u8]) -> io::Result<()>;
    fn remove(&self, name: &str) -> io::Result<()>;
    fn list(&self) -> io::Result<Vec<String>>;
}

pub type SharedStore = Arc<dyn FileStore>;

/// A real directory.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FileStore for DirStore {
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        match std::fs::read(self.root.join(name)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn write(&self, name: &str, data: &[u8]) -> io::Result<()> {
        let tmp = self.root.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, data)?;
        std::fs::rename(tmp, self.root.join(name))
    }

    fn append(&self, name: &str, data: &[u8]) -> io::Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(self.root.join(name))?;
        f.write_all(data)
    }

    fn remove(&self, name: &str) -> io::Result<()> {
        match std::fs::remove_file(self.root.join(name)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    fn list(&self) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    if !name.starts_with('.') {
                        out.push(name.to_string());
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// In-memory store; clones share contents, so a simulated node can be
/// killed and revived against the same "disk".
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    files: Arc<Mutex<BTreeMap<String, Vec<u8>>>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Copies every file of `other` into a fresh in-memory store.
    pub fn snapshot_of(other: &dyn FileStore) -> io::Result<Self> {
        let out = MemStore::new();
        for name in other.list()? {
            if let Some(data) = other.read(&name)? {
                out.write(&name, &data)?;
            }
        }
        Ok(out)
    }

    pub fn mutate(&self, name: &str, f: impl FnOnce(&mut Vec<u8>)) -> bool {
        let mut files = self.files.lock().expect("memstore poisoned");
        match files.get_mut(name) {
            Some(data) => {
                f(data);
                true
            }
            None => false,
        }
    }
}

impl FileStore for MemStore {
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(self.files.lock().expect("memstore poisoned").get(name).cloned())
    }

    fn write(&self, name: &str, data: &[u8]) -> io::Result<()> {
        self.files.lock().expect("memstore poisoned").insert(name.to_string(), data.to_vec());
        Ok(())
    }

    fn append(&self, name: &str, data: &[u8]) -> io::Result<()> {
        self.files
            .lock()
            .expect("memstore poisoned")
            .entry(name.to_string())
            .or_default()
            .extend_from_slice(data);
        Ok(())
    }

    fn remove(&self, name: &str) -> io::Result<()> {
        self.files.lock().expect("memstore poisoned").remove(name);
        Ok(())
    }

    fn list(&self) -> io::Result<Vec<String>> {
        Ok(self.files.lock().expect("memstore poisoned").keys().cloned().collect())
    }
}

pub fn encode_block_file(ledger: &Ledger) -> Vec<u8> {
    let body = ledger.to_canonical_bytes();
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(u32::try_from(body.len()).expect("ledger exceeds u32 length")).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn decode_block_file(bytes: &[u8]) -> Result<Ledger, DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::UnexpectedEof);
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body = &bytes[4..];
    if body.len() != len {
        return Err(DecodeError::Invalid(format!("length prefix {len} but {} body bytes", body.len())));
    }
    Ledger::from_canonical_bytes(body)
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed manifest line {line}: {text:?}")]
    Manifest { line: usize, text: String },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("ledger {0} not stored")]
    Missing(u64),
    #[error("decode ledger {seq}: {err}")]
    Decode { seq: u64, err: DecodeError },
}

/// Writes a ledger file and appends its manifest entry.
pub fn write_ledger(store: &dyn FileStore, ledger: &Ledger) -> io::Result<()> {
    store.write(&ledger_file_name(ledger.seq()), &encode_block_file(ledger))?;
    store.append(MANIFEST, format!("{} {}\n", ledger.seq(), ledger.hash().to_hex()).as_bytes())
}

pub fn read_ledger(store: &dyn FileStore, seq: u64) -> Result<Ledger, StoreError> {
    let bytes = store.read(&ledger_file_name(seq))?.ok_or(StoreError::Missing(seq))?;
    decode_block_file(&bytes).map_err(|err| StoreError::Decode { seq, err })
}

/// Parses the manifest. Later lines for the same seq override earlier ones
/// (a node that resynced may rewrite history it never validated).
pub fn read_manifest(store: &dyn FileStore) -> Result<BTreeMap<u64, Hash32>, StoreError> {
    let mut out = BTreeMap::new();
    let Some(bytes) = store.read(MANIFEST)? else {
        return Ok(out);
    };
    let text = String::from_utf8_lossy(&bytes);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || StoreError::Manifest { line: i + 1, text: line.to_string() };
        let (seq, hash) = line.split_once(' ').ok_or_else(bad)?;
        let seq: u64 = seq.parse().map_err(|_| bad())?;
        let hash: Hash32 = hash.parse().map_err(|_| bad())?;
        out.insert(seq, hash);
    }
    Ok(out)
}

/// Sequence numbers of every `ledger_<seq>.blk` present, ascending.
pub fn stored_ledger_seqs(store: &dyn FileStore) -> io::Result<Vec<u64>> {
    let mut seqs: Vec<u64> = store
        .list()?
        .iter()
        .filter_map(|n| n.strip_prefix("ledger_")?.strip_suffix(".blk")?.parse().ok())
        .collect();
    seqs.sort_unstable();
    Ok(seqs)
}

/// Result of verifying a stored chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredChain {
    pub genesis: Option<Ledger>,
    /// Contiguous run of ledgers after genesis (possibly starting above 1
    /// when older blocks were pruned).
    pub ledgers: Vec<Ledger>,
}

impl StoredChain {
    pub fn tip(&self) -> Option<&Ledger> {
        self.ledgers.last().or(self.genesis.as_ref())
    }

    pub fn is_pruned(&self) -> bool {
        self.ledgers.first().is_some_and(|l| l.seq() > 1)
    }
}

/// Loads and verifies every stored block against the chain rules and the
/// manifest. Layout accepted: genesis, then one contiguous run; a run that
/// starts above seq 1 is anchored at the manifest hash of its predecessor.
/// Error indices count stored blocks in ascending seq order.
pub fn verify_stored_chain(store: &dyn FileStore) -> Result<StoredChain, StoreError> {
    let manifest = read_manifest(store)?;
    let seqs = stored_ledger_seqs(store)?;
    if seqs.is_empty() {
        return Err(ChainError::Empty.into());
    }
    let mut ledgers = Vec::with_capacity(seqs.len());
    for (index, seq) in seqs.iter().enumerate() {
        let bytes = store.read(&ledger_file_name(*seq))?.ok_or(StoreError::Missing(*seq))?;
        match decode_block_file(&bytes) {
            Ok(l) if l.seq() == *seq => ledgers.push(l),
            Ok(_) => return Err(ChainError::broken(index, BrokenReason::OrderGap).into()),
            Err(_) => return Err(ChainError::broken(index, BrokenReason::Malformed).into()),
        }
    }
    let check_manifest = |offset: usize, run: &[Ledger]| -> Result<(), ChainError> {
        for (i, l) in run.iter().enumerate() {
            if manifest.get(&l.seq()) != Some(&l.hash()) {
                return Err(ChainError::broken(offset + i, BrokenReason::HashMismatch));
            }
        }
        Ok(())
    };

    let starts_at_genesis = seqs[0] == 0;
    let pruned_gap = starts_at_genesis && seqs.len() > 1 && seqs[1] > 1;
    if !starts_at_genesis {
        return Err(ChainError::broken(0, BrokenReason::BadGenesis).into());
    }
    if pruned_gap {
        verify_chain(&ledgers[..1])?;
        check_manifest(0, &ledgers[..1])?;
        let run = &ledgers[1..];
        let anchor_seq = run[0].seq() - 1;
        let anchor_hash = manifest.get(&anchor_seq).copied().unwrap_or(Hash32::ZERO);
        verify_chain_from(ChainAnchor { seq: anchor_seq, hash: anchor_hash }, run).map_err(|e| match e {
            ChainError::BrokenAt { index, reason } => ChainError::broken(index + 1, reason),
            other => other,
        })?;
        check_manifest(1, run)?;
    } else {
        verify_chain(&ledgers)?;
        check_manifest(0, &ledgers)?;
    }
    let mut it = ledgers.into_iter();
    let genesis = it.next();
    Ok(StoredChain { genesis, ledgers: it.collect() })
}
