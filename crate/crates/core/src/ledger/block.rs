use std::fmt;

use serde::Serialize;
use thiserror::Error;

use super::codec::{put_u32, Canonical, DecodeError, Reader};
use super::tx::Transaction;
use super::types::{hash32, Hash32};
use super::LedgerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LedgerHeader {
    pub seq: u64,
    pub parent_hash: Hash32,
    pub tx_set_hash: Hash32,
    pub state_hash: Hash32,
    pub close_time: u64,
}

impl LedgerHeader {
    pub fn hash(&self) -> Hash32 {
        hash32(&self.to_canonical_bytes())
    }
}

impl Canonical for LedgerHeader {
    fn encode(&self, out: &mut Vec<u8>) {
        self.seq.encode(out);
        self.parent_hash.encode(out);
        self.tx_set_hash.encode(out);
        self.state_hash.encode(out);
        self.close_time.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            seq: u64::decode(r)?,
            parent_hash: Hash32::decode(r)?,
            tx_set_hash: Hash32::decode(r)?,
            state_hash: Hash32::decode(r)?,
            close_time: u64::decode(r)?,
        })
    }
}

/// Hash of the canonical list encoding of `txs` (full transactions,
/// signatures included).
pub fn tx_set_hash(txs: &[Transaction]) -> Hash32 {
    let mut out = Vec::new();
    put_u32(&mut out, u32::try_from(txs.len()).expect("tx list exceeds u32 length"));
    for tx in txs {
        tx.encode(&mut out);
    }
    hash32(&out)
}

/// A hash-chained block of canonically ordered transactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ledger {
    header: LedgerHeader,
    txs: Vec<Transaction>,
}

impl Ledger {
    pub fn genesis(state_hash: Hash32) -> Self {
        let txs = Vec::new();
        let header = LedgerHeader {
            seq: 0,
            parent_hash: Hash32::ZERO,
            tx_set_hash: tx_set_hash(&txs),
            state_hash,
            close_time: 0,
        };
        Ledger { header, txs }
    }

    pub fn header(&self) -> &LedgerHeader {
        &self.header
    }

    pub fn seq(&self) -> u64 {
        self.header.seq
    }

    pub fn hash(&self) -> Hash32 {
        self.header.hash()
    }

    pub fn txs(&self) -> &[Transaction] {
        &self.txs
    }

    /// Assembles a ledger from already-ordered parts, without any checks.
    /// Used by tests that need malformed chains.
    pub fn from_parts_unchecked(header: LedgerHeader, txs: Vec<Transaction>) -> Self {
        Ledger { header, txs }
    }

    fn is_canonically_ordered(&self) -> bool {
        self.txs.windows(2).all(|w| w[0].order_key() < w[1].order_key())
    }
}

impl Canonical for Ledger {
    fn encode(&self, out: &mut Vec<u8>) {
        self.header.encode(out);
        self.txs.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ledger = Ledger { header: LedgerHeader::decode(r)?, txs: Vec::decode(r)? };
        if !ledger.is_canonically_ordered() {
            return Err(DecodeError::NonCanonical("ledger transactions out of canonical order"));
        }
        Ok(ledger)
    }
}

/// Builds the successor of `parent` holding `txs` in canonical order.
/// Exact duplicates collapse; every transaction must carry a valid signature.
pub fn build_ledger(
    parent: &LedgerHeader,
    txs: impl IntoIterator<Item = Transaction>,
    state_hash: Hash32,
    close_time: u64,
) -> Result<Ledger, LedgerError> {
    let mut txs: Vec<Transaction> = txs.into_iter().collect();
    if let Some(bad) = txs.iter().find(|tx| !tx.verify()) {
        return Err(LedgerError::InvalidTransaction(bad.tx_id()));
    }
    txs.sort();
    txs.dedup_by(|a, b| a.tx_id() == b.tx_id());
    let header = LedgerHeader {
        seq: parent.seq + 1,
        parent_hash: parent.hash(),
        tx_set_hash: tx_set_hash(&txs),
        state_hash,
        close_time,
    };
    Ok(Ledger { header, txs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BrokenReason {
    ParentMismatch,
    TxsetMismatch,
    BadGenesis,
    OrderGap,
    /// Stored bytes did not decode as a canonical ledger.
    Malformed,
    /// Header hash differs from the externally recorded one.
    HashMismatch,
}

impl fmt::Display for BrokenReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BrokenReason::ParentMismatch => "parent_mismatch",
            BrokenReason::TxsetMismatch => "txset_mismatch",
            BrokenReason::BadGenesis => "bad_genesis",
            BrokenReason::OrderGap => "order_gap",
            BrokenReason::Malformed => "malformed",
            BrokenReason::HashMismatch => "hash_mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("empty chain")]
    Empty,
    #[error("chain broken at index {index}: {reason}")]
    BrokenAt { index: usize, reason: BrokenReason },
}

impl ChainError {
    pub fn broken(index: usize, reason: BrokenReason) -> Self {
        ChainError::BrokenAt { index, reason }
    }
}

/// A trusted (seq, header hash) pair that a chain suffix must extend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainAnchor {
    pub seq: u64,
    pub hash: Hash32,
}

impl From<&LedgerHeader> for ChainAnchor {
    fn from(h: &LedgerHeader) -> Self {
        ChainAnchor { seq: h.seq, hash: h.hash() }
    }
}

fn check_body(index: usize, ledger: &Ledger) -> Result<(), ChainError> {
    if !ledger.is_canonically_ordered() || tx_set_hash(&ledger.txs) != ledger.header.tx_set_hash {
        return Err(ChainError::broken(index, BrokenReason::TxsetMismatch));
    }
    Ok(())
}

fn check_links(start: usize, mut prev: ChainAnchor, ledgers: &[Ledger]) -> Result<(), ChainError> {
    for (i, ledger) in ledgers.iter().enumerate() {
        let index = start + i;
        if ledger.header.seq != prev.seq + 1 {
            return Err(ChainError::broken(index, BrokenReason::OrderGap));
        }
        if ledger.header.parent_hash != prev.hash {
            return Err(ChainError::broken(index, BrokenReason::ParentMismatch));
        }
        check_body(index, ledger)?;
        prev = ChainAnchor::from(&ledger.header);
    }
    Ok(())
}

/// Verifies a chain starting at genesis. On failure, reports the first
/// failing index.
pub fn verify_chain(ledgers: &[Ledger]) -> Result<(), ChainError> {
    let genesis = ledgers.first().ok_or(ChainError::Empty)?;
    if genesis.header.seq != 0 || genesis.header.parent_hash != Hash32::ZERO {
        return Err(ChainError::broken(0, BrokenReason::BadGenesis));
    }
    check_body(0, genesis)?;
    check_links(1, ChainAnchor::from(&genesis.header), &ledgers[1..])
}

/// Verifies that `ledgers` extend `anchor` contiguously. Indices in the
/// error are positions within `ledgers`.
pub fn verify_chain_from(anchor: ChainAnchor, ledgers: &[Ledger]) -> Result<(), ChainError> {
    if ledgers.is_empty() {
        return Err(ChainError::Empty);
    }
    check_links(0, anchor, ledgers)
}
