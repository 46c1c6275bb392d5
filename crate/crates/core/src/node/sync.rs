//! Verifying shipped ledgers and rebuilding state from stored chain files.

use serde::Serialize;
use thiserror::Error;

use crate::ledger::store::{read_manifest, verify_stored_chain, FileStore, StoreError};
use crate::ledger::{
    verify_chain_from, BrokenReason, Canonical, ChainAnchor, ChainError, Hash32, Ledger, LedgerHeader,
};
use crate::sqlvm::{decode_checkpoint_file, checkpoint_file_name, Checkpoint, ReplayError, TableStore, TxOutcome};

use super::message::{CheckpointData, LedgerData};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SyncError {
    #[error("chain broken at index {index}: {reason}")]
    Broken { index: usize, reason: BrokenReason },
    #[error("state hash mismatch at ledger {seq}")]
    StateMismatch { seq: u64 },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(ReplayError),
    #[error("replay: {0}")]
    Replay(ReplayError),
    #[error("peer tip {peer} is behind local tip {local}")]
    PeerBehind { peer: u64, local: u64 },
    #[error("peer advertised tip {0} without shipping the ledgers")]
    Incomplete(u64),
    #[error("peer did not answer")]
    Timeout,
}

impl SyncError {
    pub fn broken_reason(&self) -> Option<BrokenReason> {
        match self {
            SyncError::Broken { reason, .. } => Some(*reason),
            _ => None,
        }
    }
}

/// Ledgers that passed chain, quorum and replay checks, with the store
/// they produce.
#[derive(Debug, Clone)]
pub struct VerifiedSync {
    pub store: TableStore,
    pub ledgers: Vec<Ledger>,
    pub outcomes: Vec<(u64, Vec<TxOutcome>)>,
    pub checkpoint: Option<CheckpointData>,
    pub tip: LedgerHeader,
}

/// Checks `data` against the local tip and, ledger by ledger, against the
/// hashes a validation quorum already signed (`known`). Nothing is adopted
/// here; the caller swaps state in only on success.
pub fn verify_ledger_data(
    local_tip: &LedgerHeader,
    local_store: &TableStore,
    data: &LedgerData,
    known: &dyn Fn(u64) -> Option<Hash32>,
) -> Result<VerifiedSync, SyncError> {
    let cp = data.checkpoint.as_ref().filter(|cp| cp.ledger_seq > local_tip.seq);
    let (anchor, mut store) = match cp {
        Some(cp) => {
            let checkpoint = Checkpoint {
                ledger_seq: cp.ledger_seq,
                snapshot: cp.snapshot.clone(),
                snapshot_hash: cp.snapshot_hash,
            };
            let store = TableStore::restore_checkpoint(&checkpoint).map_err(SyncError::Checkpoint)?;
            if known(cp.ledger_seq).is_some_and(|h| h != cp.anchor_hash) {
                return Err(SyncError::Broken { index: 0, reason: BrokenReason::HashMismatch });
            }
            (ChainAnchor { seq: cp.ledger_seq, hash: cp.anchor_hash }, store)
        }
        None => (ChainAnchor::from(local_tip), local_store.clone()),
    };
    if data.tip.seq < local_tip.seq {
        return Err(SyncError::PeerBehind { peer: data.tip.seq, local: local_tip.seq });
    }

    let mut decoded: Vec<(usize, Ledger)> = Vec::new();
    for (i, blob) in data.ledgers.iter().enumerate() {
        let ledger = Ledger::from_canonical_bytes(&blob.0)
            .map_err(|_| SyncError::Broken { index: i, reason: BrokenReason::Malformed })?;
        if ledger.seq() > anchor.seq {
            decoded.push((i, ledger));
        }
    }
    let ledgers: Vec<Ledger> = decoded.iter().map(|(_, l)| l.clone()).collect();
    let index_of = |k: usize| decoded.get(k).map_or(k, |(i, _)| *i);

    match ledgers.last() {
        None => {
            if data.tip.hash() != anchor.hash {
                return Err(if data.tip.seq == anchor.seq {
                    SyncError::Broken { index: 0, reason: BrokenReason::HashMismatch }
                } else {
                    SyncError::Incomplete(data.tip.seq)
                });
            }
        }
        Some(last) => {
            verify_chain_from(anchor, &ledgers).map_err(|e| match e {
                ChainError::BrokenAt { index, reason } => SyncError::Broken { index: index_of(index), reason },
                ChainError::Empty => SyncError::Incomplete(data.tip.seq),
            })?;
            if last.hash() != data.tip.hash() {
                return Err(SyncError::Broken { index: index_of(ledgers.len() - 1), reason: BrokenReason::HashMismatch });
            }
        }
    }
    for (i, l) in &decoded {
        if known(l.seq()).is_some_and(|h| h != l.hash()) {
            return Err(SyncError::Broken { index: *i, reason: BrokenReason::HashMismatch });
        }
    }

    let mut outcomes = Vec::with_capacity(ledgers.len());
    for l in &ledgers {
        let out = store.apply_ledger(l).map_err(SyncError::Replay)?;
        if store.state_hash() != l.header().state_hash {
            return Err(SyncError::StateMismatch { seq: l.seq() });
        }
        outcomes.push((l.seq(), out));
    }
    if store.state_hash() != data.tip.state_hash {
        return Err(SyncError::StateMismatch { seq: data.tip.seq });
    }
    Ok(VerifiedSync { store, ledgers, outcomes, checkpoint: cp.cloned(), tip: data.tip })
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("genesis does not match the empty database")]
    ForeignGenesis,
    #[error("blocks before {first} were pruned and no usable checkpoint exists")]
    NoCheckpoint { first: u64 },
    #[error("checkpoint {seq}: {err}")]
    Checkpoint { seq: u64, err: ReplayError },
    #[error("state hash mismatch at ledger {seq}")]
    StateMismatch { seq: u64 },
    #[error("replay: {0}")]
    Replay(ReplayError),
}

/// A checkpoint together with the header hash of the ledger it follows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredCheckpoint {
    pub checkpoint: Checkpoint,
    pub anchor_hash: Hash32,
}

impl AnchoredCheckpoint {
    pub fn to_data(&self) -> CheckpointData {
        CheckpointData {
            ledger_seq: self.checkpoint.ledger_seq,
            anchor_hash: self.anchor_hash,
            snapshot_hash: self.checkpoint.snapshot_hash,
            snapshot: self.checkpoint.snapshot.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedChain {
    pub genesis: Ledger,
    /// Retained ledgers after genesis, ascending.
    pub ledgers: Vec<Ledger>,
    pub store: TableStore,
    pub checkpoint: Option<AnchoredCheckpoint>,
    pub tip: LedgerHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReplayReport {
    pub tip_seq: u64,
    pub replayed: u64,
    pub from_checkpoint: Option<u64>,
    pub state_hash: Hash32,
}

pub fn checkpoint_seqs(disk: &dyn FileStore) -> std::io::Result<Vec<u64>> {
    let mut seqs: Vec<u64> = disk
        .list()?
        .iter()
        .filter_map(|n| n.strip_prefix("ckpt_")?.strip_suffix(".snap")?.parse().ok())
        .collect();
    seqs.sort_unstable();
    Ok(seqs)
}

/// Rebuilds the database from chain files. With `use_checkpoints` false
/// the replay always starts from genesis, which fails on pruned stores.
/// Returns `Ok(None)` for an empty store.
pub fn load_chain(disk: &dyn FileStore, use_checkpoints: bool) -> Result<Option<(LoadedChain, ReplayReport)>, LoadError> {
    if crate::ledger::store::stored_ledger_seqs(disk).map_err(StoreError::Io)?.is_empty() {
        return Ok(None);
    }
    let chain = verify_stored_chain(disk)?;
    let genesis = chain.genesis.clone().ok_or(LoadError::ForeignGenesis)?;
    if genesis != Ledger::genesis(TableStore::new().state_hash()) {
        return Err(LoadError::ForeignGenesis);
    }
    let tip = *chain.tip().expect("genesis present").header();
    let first = chain.ledgers.first().map_or(tip.seq + 1, |l| l.seq());

    let mut checkpoint = None;
    if use_checkpoints {
        let manifest = read_manifest(disk)?;
        let usable = checkpoint_seqs(disk)
            .map_err(StoreError::Io)?
            .into_iter()
            .filter(|c| *c + 1 >= first && *c <= tip.seq && *c > 0)
            .next_back();
        if let Some(seq) = usable {
            let bytes = disk.read(&checkpoint_file_name(seq)).map_err(StoreError::Io)?.unwrap_or_default();
            let cp = decode_checkpoint_file(seq, &bytes).map_err(|err| LoadError::Checkpoint { seq, err })?;
            let anchor_hash = manifest.get(&seq).copied().ok_or(LoadError::NoCheckpoint { first })?;
            checkpoint = Some(AnchoredCheckpoint { checkpoint: cp, anchor_hash });
        }
    }
    if first > 1 && checkpoint.is_none() {
        return Err(LoadError::NoCheckpoint { first });
    }

    let (mut store, start) = match &checkpoint {
        Some(a) => {
            let seq = a.checkpoint.ledger_seq;
            let store = TableStore::restore_checkpoint(&a.checkpoint).map_err(|err| LoadError::Checkpoint { seq, err })?;
            if let Some(l) = chain.ledgers.iter().find(|l| l.seq() == seq) {
                if l.header().state_hash != store.state_hash() || l.hash() != a.anchor_hash {
                    return Err(LoadError::StateMismatch { seq });
                }
            }
            (store, seq)
        }
        None => (TableStore::new(), 0),
    };
    let mut replayed = 0;
    for l in chain.ledgers.iter().filter(|l| l.seq() > start) {
        store.apply_ledger(l).map_err(LoadError::Replay)?;
        if store.state_hash() != l.header().state_hash {
            return Err(LoadError::StateMismatch { seq: l.seq() });
        }
        replayed += 1;
    }
    let report = ReplayReport {
        tip_seq: tip.seq,
        replayed,
        from_checkpoint: checkpoint.as_ref().map(|c| c.checkpoint.ledger_seq),
        state_hash: store.state_hash(),
    };
    Ok(Some((LoadedChain { genesis, ledgers: chain.ledgers, store, checkpoint, tip }, report)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::types::Blob;
    use crate::ledger::store::{write_ledger, MemStore};
    use crate::ledger::{build_ledger, sign_transaction, ColumnDef, ColumnType, Ed25519Signer, Signer, SqlOperation, TxBody};
    use crate::sqlvm::encode_checkpoint_file;

    fn build(n: u64) -> (Vec<Ledger>, Vec<TableStore>) {
        let signer = Ed25519Signer::from_seed([9; 32]);
        let mut store = TableStore::new();
        let mut chain = vec![Ledger::genesis(store.state_hash())];
        let mut stores = vec![store.clone()];
        for seq in 1..=n {
            let op = SqlOperation::CreateTable {
                table: format!("t{seq}"),
                columns: vec![ColumnDef::new("a", ColumnType::Int)],
            };
            let tx = sign_transaction(TxBody::new(signer.account_id(), seq, op), &signer).unwrap();
            store.apply_block(seq, std::slice::from_ref(&tx)).unwrap();
            let l = build_ledger(chain.last().unwrap().header(), [tx], store.state_hash(), seq * 1000).unwrap();
            chain.push(l);
            stores.push(store.clone());
        }
        (chain, stores)
    }

    fn data(chain: &[Ledger], from: usize) -> LedgerData {
        LedgerData {
            tip: *chain.last().unwrap().header(),
            checkpoint: None,
            ledgers: chain[from..].iter().map(|l| Blob(l.to_canonical_bytes())).collect(),
        }
    }

    #[test]
    fn clean_suffix_verifies() {
        let (chain, stores) = build(4);
        let v = verify_ledger_data(chain[1].header(), &stores[1], &data(&chain, 2), &|_| None).unwrap();
        assert_eq!(v.ledgers.len(), 3);
        assert_eq!(v.store.state_hash(), stores[4].state_hash());
    }

    #[test]
    fn tampered_tip_is_hash_mismatch() {
        let (chain, stores) = build(4);
        let mut d = data(&chain, 1);
        let mut h = *chain[4].header();
        h.state_hash.0[0] ^= 1;
        d.ledgers[3] = Blob(Ledger::from_parts_unchecked(h, chain[4].txs().to_vec()).to_canonical_bytes());
        let e = verify_ledger_data(chain[0].header(), &stores[0], &d, &|_| None).unwrap_err();
        assert_eq!(e, SyncError::Broken { index: 3, reason: BrokenReason::HashMismatch });
    }

    #[test]
    fn garbage_blob_is_malformed() {
        let (chain, stores) = build(2);
        let mut d = data(&chain, 1);
        d.ledgers[1].0.truncate(10);
        let e = verify_ledger_data(chain[0].header(), &stores[0], &d, &|_| None).unwrap_err();
        assert_eq!(e, SyncError::Broken { index: 1, reason: BrokenReason::Malformed });
    }

    #[test]
    fn quorum_hash_disagreement_is_caught() {
        let (chain, stores) = build(2);
        let d = data(&chain, 1);
        let e = verify_ledger_data(chain[0].header(), &stores[0], &d, &|s| (s == 2).then_some(Hash32([1; 32])))
            .unwrap_err();
        assert_eq!(e, SyncError::Broken { index: 1, reason: BrokenReason::HashMismatch });
    }

    #[test]
    fn checkpoint_plus_suffix() {
        let (chain, stores) = build(5);
        let cp = stores[3].make_checkpoint().unwrap();
        let mut d = data(&chain, 4);
        d.checkpoint = Some(CheckpointData {
            ledger_seq: 3,
            anchor_hash: chain[3].hash(),
            snapshot_hash: cp.snapshot_hash,
            snapshot: cp.snapshot.clone(),
        });
        let v = verify_ledger_data(chain[0].header(), &stores[0], &d, &|_| None).unwrap();
        assert_eq!(v.store.state_hash(), stores[5].state_hash());
        d.checkpoint.as_mut().unwrap().snapshot[0] ^= 1;
        assert!(matches!(
            verify_ledger_data(chain[0].header(), &stores[0], &d, &|_| None),
            Err(SyncError::Checkpoint(_))
        ));
    }

    #[test]
    fn load_full_and_pruned() {
        let (chain, stores) = build(6);
        let disk = MemStore::new();
        for l in &chain {
            write_ledger(&disk, l).unwrap();
        }
        let (full, report) = load_chain(&disk, false).unwrap().unwrap();
        assert_eq!(full.store.state_hash(), stores[6].state_hash());
        assert_eq!(report.replayed, 6);

        let cp = stores[4].make_checkpoint().unwrap();
        disk.write(&checkpoint_file_name(4), &encode_checkpoint_file(&cp)).unwrap();
        for seq in 1..=4 {
            disk.remove(&crate::ledger::store::ledger_file_name(seq)).unwrap();
        }
        assert!(matches!(load_chain(&disk, false), Err(LoadError::NoCheckpoint { first: 5 })));
        let (pruned, report) = load_chain(&disk, true).unwrap().unwrap();
        assert_eq!(pruned.store.state_hash(), stores[6].state_hash());
        assert_eq!((report.replayed, report.from_checkpoint), (2, Some(4)));
    }
}
