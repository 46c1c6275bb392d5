use std::collections::{BTreeMap, BTreeSet};

use crate::ledger::Hash32;

use super::{meets, NodeId, Validation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    New,
    Duplicate,
    /// Older than what this node already sent for the seq.
    Stale,
    /// A newer attempt by the same node replaced its earlier vote.
    Superseded,
    /// Two different hashes for the same seq and close time.
    Equivocation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Vote {
    For { close_time: u64, hash: Hash32 },
    Equivocated,
}

/// Latest validation per node per ledger seq.
///
/// A node's vote for a ledger with a later close time replaces its earlier
/// one (it retried after an abandoned attempt). Two hashes at the same
/// close time are an equivocation; the node is then ignored for that seq.
#[derive(Debug, Clone, Default)]
pub struct ValidationTracker {
    votes: BTreeMap<u64, BTreeMap<NodeId, Vote>>,
    equivocators: BTreeMap<u64, BTreeSet<NodeId>>,
}

impl ValidationTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_validation(&mut self, v: &Validation) -> RecordOutcome {
        let seq_votes = self.votes.entry(v.ledger_seq).or_default();
        let new = Vote::For { close_time: v.close_time, hash: v.header_hash };
        match seq_votes.get(&v.node_id).copied() {
            None => {
                seq_votes.insert(v.node_id.clone(), new);
                RecordOutcome::New
            }
            Some(Vote::Equivocated) => RecordOutcome::Equivocation,
            Some(Vote::For { close_time, hash }) => {
                if close_time == v.close_time && hash == v.header_hash {
                    RecordOutcome::Duplicate
                } else if close_time == v.close_time {
                    seq_votes.insert(v.node_id.clone(), Vote::Equivocated);
                    self.equivocators.entry(v.ledger_seq).or_default().insert(v.node_id.clone());
                    RecordOutcome::Equivocation
                } else if v.close_time > close_time {
                    seq_votes.insert(v.node_id.clone(), new);
                    RecordOutcome::Superseded
                } else {
                    RecordOutcome::Stale
                }
            }
        }
    }

    /// Distinct, non-equivocating validators currently voting for `hash`.
    pub fn count(&self, seq: u64, hash: &Hash32) -> usize {
        self.votes.get(&seq).map_or(0, |m| {
            m.values().filter(|v| matches!(v, Vote::For { hash: h, .. } if h == hash)).count()
        })
    }

    pub fn is_fully_validated(&self, seq: u64, hash: &Hash32, voters: usize, quorum: f64) -> bool {
        meets(self.count(seq, hash), voters, quorum)
    }

    /// The hash at `seq` that meets quorum, if any.
    pub fn validated_hash(&self, seq: u64, voters: usize, quorum: f64) -> Option<Hash32> {
        let m = self.votes.get(&seq)?;
        let mut tally: BTreeMap<Hash32, usize> = BTreeMap::new();
        for v in m.values() {
            if let Vote::For { hash, .. } = v {
                *tally.entry(*hash).or_default() += 1;
            }
        }
        tally.into_iter().find(|(_, n)| meets(*n, voters, quorum)).map(|(h, _)| h)
    }

    /// Nodes voting for `hash` at `seq`.
    pub fn voters_for(&self, seq: u64, hash: &Hash32) -> Vec<NodeId> {
        self.votes.get(&seq).map_or_else(Vec::new, |m| {
            m.iter()
                .filter(|(_, v)| matches!(v, Vote::For { hash: h, .. } if h == hash))
                .map(|(n, _)| n.clone())
                .collect()
        })
    }

    pub fn equivocators(&self, seq: u64) -> impl Iterator<Item = &NodeId> {
        self.equivocators.get(&seq).into_iter().flatten()
    }

    pub fn highest_seq(&self) -> Option<u64> {
        self.votes.keys().next_back().copied()
    }

    /// Drops bookkeeping for seqs below `seq`.
    pub fn prune_below(&mut self, seq: u64) {
        self.votes = self.votes.split_off(&seq);
        self.equivocators = self.equivocators.split_off(&seq);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(node: &str, seq: u64, close: u64, hash: u8) -> Validation {
        Validation {
            node_id: node.into(),
            ledger_seq: seq,
            close_time: close,
            header_hash: Hash32([hash; 32]),
            signature: vec![],
        }
    }

    #[test]
    fn quorum_of_five() {
        let mut t = ValidationTracker::new();
        for n in ["a", "b", "c"] {
            t.record_validation(&v(n, 1, 10, 7));
        }
        assert!(!t.is_fully_validated(1, &Hash32([7; 32]), 5, 0.8));
        t.record_validation(&v("d", 1, 10, 7));
        assert!(t.is_fully_validated(1, &Hash32([7; 32]), 5, 0.8));
    }

    #[test]
    fn duplicates_are_idempotent() {
        let mut t = ValidationTracker::new();
        assert_eq!(t.record_validation(&v("a", 1, 10, 7)), RecordOutcome::New);
        assert_eq!(t.record_validation(&v("a", 1, 10, 7)), RecordOutcome::Duplicate);
        assert_eq!(t.count(1, &Hash32([7; 32])), 1);
    }

    #[test]
    fn equivocation_discards_both() {
        let mut t = ValidationTracker::new();
        for n in ["a", "b", "c", "d"] {
            t.record_validation(&v(n, 1, 10, 7));
        }
        assert_eq!(t.record_validation(&v("d", 1, 10, 8)), RecordOutcome::Equivocation);
        assert_eq!(t.count(1, &Hash32([7; 32])), 3);
        assert_eq!(t.count(1, &Hash32([8; 32])), 0);
        assert!(!t.is_fully_validated(1, &Hash32([7; 32]), 5, 0.8));
        assert_eq!(t.record_validation(&v("d", 1, 10, 7)), RecordOutcome::Equivocation);
        assert_eq!(t.equivocators(1).cloned().collect::<Vec<_>>(), vec![NodeId::from("d")]);
    }

    #[test]
    fn later_attempt_supersedes() {
        let mut t = ValidationTracker::new();
        t.record_validation(&v("a", 1, 10, 7));
        assert_eq!(t.record_validation(&v("a", 1, 20, 8)), RecordOutcome::Superseded);
        assert_eq!(t.record_validation(&v("a", 1, 10, 7)), RecordOutcome::Stale);
        assert_eq!(t.count(1, &Hash32([7; 32])), 0);
        assert_eq!(t.count(1, &Hash32([8; 32])), 1);
    }
}
