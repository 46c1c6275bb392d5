use std::collections::{BTreeMap, BTreeSet};

use crate::ledger::Hash32;

use super::{check_consensus, update_candidate, ConsensusConfig, NodeId, Proposal, Unl};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Open,
    Establish(u32),
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PeerPosition {
    round: u32,
    close_time: u64,
    tx_ids: BTreeSet<Hash32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickOutcome {
    Idle,
    /// Broadcast this position.
    Propose { round: u32, close_time: u64, tx_ids: BTreeSet<Hash32>, fallback: bool },
    /// The set reached agreement; the caller builds and validates the ledger.
    Accepted { close_time: u64, tx_ids: BTreeSet<Hash32>, rounds: u32 },
    /// No validation quorum arrived for the accepted ledger; the engine is
    /// open again for the same seq.
    TimedOut,
}

/// Per-node consensus state for the ledger currently being built. Never
/// performs I/O; the caller feeds proposals and timer ticks and acts on
/// the returned outcomes.
#[derive(Debug, Clone)]
pub struct ConsensusEngine {
    me: NodeId,
    unl: Unl,
    cfg: ConsensusConfig,
    seq: u64,
    parent_close_time: u64,
    phase: Phase,
    close_time: u64,
    position: BTreeSet<Hash32>,
    fallback: bool,
    accepted_ticks: u32,
    positions: BTreeMap<u64, BTreeMap<NodeId, PeerPosition>>,
}

impl ConsensusEngine {
    pub fn new(me: NodeId, unl: Unl, cfg: ConsensusConfig, seq: u64, parent_close_time: u64) -> Self {
        Self {
            me,
            unl,
            cfg,
            seq,
            parent_close_time,
            phase: Phase::Open,
            close_time: 0,
            position: BTreeSet::new(),
            fallback: false,
            accepted_ticks: 0,
            positions: BTreeMap::new(),
        }
    }

    pub fn node_id(&self) -> &NodeId {
        &self.me
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn position(&self) -> &BTreeSet<Hash32> {
        &self.position
    }

    pub fn close_time(&self) -> u64 {
        self.close_time
    }

    pub fn in_fallback(&self) -> bool {
        self.fallback
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.cfg
    }

    pub fn unl(&self) -> &Unl {
        &self.unl
    }

    /// Moves on to building `seq` on top of a parent closed at `parent_close_time`.
    pub fn start_ledger(&mut self, seq: u64, parent_close_time: u64) {
        self.seq = seq;
        self.parent_close_time = parent_close_time;
        self.reopen();
        self.positions = self.positions.split_off(&seq);
    }

    fn reopen(&mut self) {
        self.phase = Phase::Open;
        self.position.clear();
        self.fallback = false;
        self.accepted_ticks = 0;
    }

    /// Drops the current attempt and waits for the next tick to close again.
    pub fn abandon(&mut self) {
        self.reopen();
    }

    /// Records a peer position. Returns false for non-UNL senders, stale
    /// seqs or positions older than the one already held.
    pub fn on_proposal(&mut self, p: &Proposal) -> bool {
        if !self.unl.contains(&p.node_id) || p.ledger_seq < self.seq {
            return false;
        }
        let at_seq = self.positions.entry(p.ledger_seq).or_default();
        if let Some(old) = at_seq.get(&p.node_id) {
            if (p.close_time, p.round) <= (old.close_time, old.round) {
                return false;
            }
        }
        at_seq.insert(
            p.node_id.clone(),
            PeerPosition { round: p.round, close_time: p.close_time, tx_ids: p.tx_ids.clone() },
        );
        true
    }

    /// Tx-id sets from the latest peer positions at the current seq.
    pub fn peer_sets(&self) -> Vec<(&NodeId, u64, &BTreeSet<Hash32>)> {
        self.positions
            .get(&self.seq)
            .map(|m| m.iter().map(|(n, p)| (n, p.close_time, &p.tx_ids)).collect())
            .unwrap_or_default()
    }

    pub fn has_peer_positions(&self) -> bool {
        self.positions.get(&self.seq).is_some_and(|m| !m.is_empty())
    }

    /// Advances the state machine at a round boundary. `pool` is the open
    /// transaction set; `shape` trims any candidate set to what this node
    /// can actually build (known bodies, valid sequence runs).
    pub fn on_tick(
        &mut self,
        now: u64,
        pool: &BTreeSet<Hash32>,
        shape: &mut dyn FnMut(BTreeSet<Hash32>) -> BTreeSet<Hash32>,
    ) -> TickOutcome {
        match self.phase {
            Phase::Open => {
                self.close_time = now.max(self.parent_close_time + 1);
                self.position = shape(pool.clone());
                self.phase = Phase::Establish(0);
                self.propose(0)
            }
            Phase::Establish(r) => {
                let latest_close = self.peer_sets().iter().map(|(_, c, _)| *c).max().unwrap_or(0);
                self.close_time = self.close_time.max(latest_close);
                let close_time = self.close_time;
                let peers: Vec<(u64, BTreeSet<Hash32>)> =
                    self.peer_sets().into_iter().map(|(_, c, s)| (c, s.clone())).collect();
                let agreeing: Vec<&BTreeSet<Hash32>> =
                    peers.iter().filter(|(c, _)| *c == close_time).map(|(_, s)| s).collect();
                if check_consensus(&self.position, &agreeing, self.unl.len(), &self.cfg) {
                    self.phase = Phase::Accepted;
                    self.accepted_ticks = 0;
                    return TickOutcome::Accepted { close_time, tx_ids: self.position.clone(), rounds: r + 1 };
                }
                let next = r + 1;
                if self.fallback || next >= self.cfg.max_rounds {
                    self.fallback = true;
                    self.position.clear();
                } else {
                    let all: Vec<&BTreeSet<Hash32>> = peers.iter().map(|(_, s)| s).collect();
                    let candidate = update_candidate(&self.position, &all, self.unl.len(), r, &self.cfg);
                    self.position = shape(candidate);
                }
                self.phase = Phase::Establish(next);
                self.propose(next)
            }
            Phase::Accepted => {
                self.accepted_ticks += 1;
                if self.accepted_ticks >= self.cfg.validation_timeout_rounds {
                    self.reopen();
                    TickOutcome::TimedOut
                } else {
                    TickOutcome::Idle
                }
            }
        }
    }

    fn propose(&self, round: u32) -> TickOutcome {
        TickOutcome::Propose {
            round,
            close_time: self.close_time,
            tx_ids: self.position.clone(),
            fallback: self.fallback,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(i: u8) -> Hash32 {
        Hash32([i; 32])
    }

    fn proposal(node: &str, round: u32, seq: u64, close: u64, ids: &[u8]) -> Proposal {
        Proposal {
            node_id: node.into(),
            round,
            ledger_seq: seq,
            close_time: close,
            tx_ids: ids.iter().map(|i| h(*i)).collect(),
            signature: vec![],
        }
    }

    fn engine(me: &str, members: &[&str]) -> ConsensusEngine {
        let me: NodeId = me.into();
        let unl = Unl::new(&me, members.iter().map(|m| NodeId::from(*m))).unwrap();
        ConsensusEngine::new(me, unl, ConsensusConfig::default(), 1, 0)
    }

    fn ident(s: BTreeSet<Hash32>) -> BTreeSet<Hash32> {
        s
    }

    #[test]
    fn single_node_accepts_in_first_round() {
        let mut e = engine("a", &["a"]);
        let pool: BTreeSet<Hash32> = [h(1)].into_iter().collect();
        assert!(matches!(e.on_tick(1000, &pool, &mut ident), TickOutcome::Propose { round: 0, .. }));
        match e.on_tick(2000, &pool, &mut ident) {
            TickOutcome::Accepted { tx_ids, rounds, close_time } => {
                assert_eq!(tx_ids, pool);
                assert_eq!(rounds, 1);
                assert_eq!(close_time, 1000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn minority_tx_is_dropped_then_agreement() {
        let members = ["a", "b", "c", "d", "e"];
        let mut e = engine("a", &members);
        let pool: BTreeSet<Hash32> = [h(1)].into_iter().collect();
        e.on_tick(1000, &pool, &mut ident);
        for n in ["b", "c", "d", "e"] {
            e.on_proposal(&proposal(n, 0, 1, 1000, &[]));
        }
        match e.on_tick(2000, &pool, &mut ident) {
            TickOutcome::Propose { round: 1, tx_ids, .. } => assert!(tx_ids.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(e.on_tick(3000, &pool, &mut ident), TickOutcome::Accepted { rounds: 2, .. }));
    }

    #[test]
    fn isolated_node_falls_back_to_empty_set() {
        let mut e = engine("a", &["a", "b", "c", "d", "e"]);
        let pool: BTreeSet<Hash32> = [h(1)].into_iter().collect();
        let mut last = e.on_tick(0, &pool, &mut ident);
        for i in 1..=10u64 {
            last = e.on_tick(i * 1000, &pool, &mut ident);
        }
        match last {
            TickOutcome::Propose { fallback, tx_ids, round, .. } => {
                assert!(fallback);
                assert!(tx_ids.is_empty());
                assert_eq!(round, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stale_positions_are_ignored() {
        let mut e = engine("a", &["a", "b"]);
        assert!(e.on_proposal(&proposal("b", 2, 1, 1000, &[1])));
        assert!(!e.on_proposal(&proposal("b", 1, 1, 1000, &[2])));
        assert!(!e.on_proposal(&proposal("z", 5, 1, 1000, &[2])));
        assert!(e.on_proposal(&proposal("b", 0, 1, 2000, &[3])));
    }

    #[test]
    fn later_close_time_is_adopted() {
        let mut e = engine("a", &["a", "b"]);
        let pool = BTreeSet::new();
        e.on_tick(1000, &pool, &mut ident);
        e.on_proposal(&proposal("b", 0, 1, 4000, &[]));
        // first tick adopts 4000 and, with both sets equal, agrees
        assert!(matches!(e.on_tick(5000, &pool, &mut ident), TickOutcome::Accepted { close_time: 4000, .. }));
    }

    #[test]
    fn accepted_times_out() {
        let mut e = engine("a", &["a", "b"]);
        let pool = BTreeSet::new();
        e.on_tick(1000, &pool, &mut ident);
        e.on_proposal(&proposal("b", 0, 1, 1000, &[]));
        assert!(matches!(e.on_tick(2000, &pool, &mut ident), TickOutcome::Accepted { .. }));
        assert_eq!(e.on_tick(3000, &pool, &mut ident), TickOutcome::Idle);
        assert_eq!(e.on_tick(4000, &pool, &mut ident), TickOutcome::Idle);
        assert_eq!(e.on_tick(5000, &pool, &mut ident), TickOutcome::TimedOut);
        assert_eq!(e.phase(), Phase::Open);
    }
}
