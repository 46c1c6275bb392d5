use crate::ledger::codec::Canonical;
use crate::ledger::Hash32;

use super::{ReplayError, TableStore};

pub fn checkpoint_file_name(ledger_seq: u64) -> String {
    format!("ckpt_{ledger_seq}.snap")
}

/// A full snapshot of a store at a ledger boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub ledger_seq: u64,
    pub snapshot: Vec<u8>,
    pub snapshot_hash: Hash32,
}

impl TableStore {
    pub fn make_checkpoint(&self) -> Result<Checkpoint, ReplayError> {
        if self.has_pending() {
            return Err(ReplayError::NestedPending);
        }
        let snapshot = self.to_canonical_bytes();
        let snapshot_hash = crate::ledger::hash32(&snapshot);
        Ok(Checkpoint { ledger_seq: self.applied_ledger_seq, snapshot, snapshot_hash })
    }

    pub fn restore_checkpoint(cp: &Checkpoint) -> Result<TableStore, ReplayError> {
        let computed = crate::ledger::hash32(&cp.snapshot);
        if computed != cp.snapshot_hash {
            return Err(ReplayError::CorruptSnapshot { expected: cp.snapshot_hash, computed });
        }
        let store = TableStore::from_canonical_bytes(&cp.snapshot).map_err(ReplayError::SnapshotDecode)?;
        if store.applied_ledger_seq != cp.ledger_seq {
            return Err(ReplayError::SnapshotDecode(crate::ledger::DecodeError::Invalid(format!(
                "snapshot is at ledger {} but checkpoint claims {}",
                store.applied_ledger_seq, cp.ledger_seq
            ))));
        }
        Ok(store)
    }
}

/// `<snapshot_hash hex>\n` followed by the canonical store bytes.
pub fn encode_checkpoint_file(cp: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(65 + cp.snapshot.len());
    out.extend_from_slice(cp.snapshot_hash.to_hex().as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&cp.snapshot);
    out
}

/// Parses a checkpoint file. The hash is not checked here; see
/// [`TableStore::restore_checkpoint`].
pub fn decode_checkpoint_file(ledger_seq: u64, bytes: &[u8]) -> Result<Checkpoint, ReplayError> {
    let bad = |m: &str| ReplayError::SnapshotDecode(crate::ledger::DecodeError::Invalid(m.to_string()));
    if bytes.len() < 65 || bytes[64] != b'\n' {
        return Err(bad("missing snapshot hash line"));
    }
    let hex = std::str::from_utf8(&bytes[..64]).map_err(|_| bad("hash line is not utf-8"))?;
    let snapshot_hash: Hash32 = hex.parse().map_err(|_| bad("hash line is not hex"))?;
    Ok(Checkpoint { ledger_seq, snapshot: bytes[65..].to_vec(), snapshot_hash })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_and_corruption() {
        let mut store = TableStore::new();
        store.apply_block(1, &[]).unwrap();
        let cp = store.make_checkpoint().unwrap();
        let file = encode_checkpoint_file(&cp);
        let back = decode_checkpoint_file(1, &file).unwrap();
        assert_eq!(TableStore::restore_checkpoint(&back).unwrap().state_hash(), store.state_hash());

        let mut bad = file.clone();
        *bad.last_mut().unwrap() ^= 1;
        let back = decode_checkpoint_file(1, &bad).unwrap();
        assert!(matches!(TableStore::restore_checkpoint(&back), Err(ReplayError::CorruptSnapshot { .. })));
    }

    #[test]
    fn checkpoint_refused_with_overlay() {
        let mut store = TableStore::new();
        store.begin_pending().unwrap();
        assert!(store.make_checkpoint().is_err());
    }
}
