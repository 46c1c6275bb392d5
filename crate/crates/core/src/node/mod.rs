//! A validating node: transaction intake, consensus rounds, ledger
//! validation, state sync, pruning and read serving.

pub mod config;
pub mod message;
pub mod sync;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::consensus::{
    ConsensusEngine, NodeId, Phase, Proposal, RecordOutcome, TickOutcome, Unl, Validation, ValidationTracker,
};
use crate::ledger::types::Blob;
use crate::ledger::store::{ledger_file_name, write_ledger, SharedStore, MANIFEST};
use crate::ledger::{
    build_ledger, AccountId, BrokenReason, Canonical, Hash32, Ledger, LedgerHeader, Predicate, PublicKey, SchemeId,
    SharedSigner, Transaction,
};
use crate::netsim::{Actor, Outbound};
use crate::sqlvm::{
    checkpoint_file_name, encode_checkpoint_file, ApplyResult, QueryError, RowView, TableStore, TxOutcome,
};

pub use config::{node_signer, NodeConfig, NodeConfigError, NodeRole, DATA_DIR_ENV};
pub use message::{CheckpointData, Info, LedgerData, Message, SubmitError, TxStatus, WireError};
pub use sync::{
    checkpoint_seqs, load_chain, verify_ledger_data, AnchoredCheckpoint, LoadError, LoadedChain, ReplayReport,
    SyncError, VerifiedSync,
};

/// Public keys of every node whose proposals and validations are accepted.
pub type KeyDirectory = Arc<BTreeMap<NodeId, PublicKey>>;

pub fn key_directory<'a>(ids: impl IntoIterator<Item = &'a NodeId>, scheme: SchemeId) -> KeyDirectory {
    Arc::new(ids.into_iter().map(|id| (id.clone(), node_signer(id, scheme).public_key())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    /// Part of a fresh network: starts voting at genesis.
    Bootstrap,
    /// Restarted or joining late: stays non-voting until synced to a peer.
    Rejoin,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum NodeEvent {
    Loaded { tip_seq: u64, replayed: u64, from_checkpoint: Option<u64> },
    StoreReset { error: String },
    Validated { seq: u64, hash: Hash32, time: u64, txs: usize, rounds: Option<u32> },
    RolledBack { seq: u64, ops: usize, time: u64 },
    SyncStarted { peer: NodeId, from_seq: u64, time: u64 },
    Synced { peer: NodeId, ledgers: usize, via_checkpoint: Option<u64>, tip_seq: u64, time: u64 },
    SyncFailed { peer: NodeId, error: String, reason: Option<BrokenReason>, time: u64 },
    VotingEnabled { seq: u64, time: u64 },
    Equivocation { node: NodeId, seq: u64 },
    Diverged { seq: u64, time: u64 },
    Checkpointed { seq: u64 },
    Pruned { from: u64, to: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServerInfo {
    pub node_id: NodeId,
    pub role: NodeRole,
    pub peer_count: usize,
    pub validated_seq: u64,
    pub validated_hash: Hash32,
    pub applied_db_seq: u64,
    pub open_tx_count: usize,
    pub uptime_ms: u64,
    pub voting: bool,
    pub serving: bool,
    pub db_attached: bool,
    pub state_hash: Hash32,
    pub network_tip: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeerInfo {
    pub node_id: NodeId,
    pub connected: bool,
    pub last_seen_ms: Option<u64>,
    pub validated_seq: Option<u64>,
    pub voting: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReadError {
    #[error("no database is attached to this node")]
    Detached,
    #[error("node is not serving client traffic")]
    NotServing,
    #[error("not synced: applied ledger {applied}, network tip {network}")]
    NotSynced { applied: u64, network: u64 },
    #[error(transparent)]
    Query(#[from] QueryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PruneError {
    #[error("only partial-record nodes prune")]
    NotPartial,
    #[error("no checkpoint at or after the prune horizon {horizon}")]
    NoCheckpoint { horizon: u64 },
    #[error("storage: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AccessRequest {
    Read { table: String, filter: Vec<Predicate>, as_account: AccountId },
    Write(Transaction),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AccessResponse {
    Rows(Vec<RowView>),
    /// Poll [`Node::tx_status`] with this id to await validation.
    Submitted { tx_id: Hash32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("read: {0}")]
    Read(#[from] ReadError),
    #[error("submit: {0}")]
    Submit(#[from] SubmitError),
}

/// Ops applied to, committed from and rolled back out of the pending overlay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OverlayStats {
    pub applied_ops: u64,
    pub committed_ops: u64,
    pub rolled_back_ops: u64,
    pub rollbacks: u64,
}

#[derive(Debug, Clone)]
struct Overlay {
    seq: u64,
    tx_ids: BTreeSet<Hash32>,
    outcomes: Vec<TxOutcome>,
}

#[derive(Debug, Clone, Copy)]
struct PeerStatus {
    last_seen: u64,
    validated_seq: u64,
    voting: bool,
    history_from: u64,
}

#[derive(Debug, Clone)]
struct SyncRequest {
    peer: NodeId,
    sent_at: u64,
}

#[derive(Debug, Clone, Copy)]
struct TxRecord {
    seq: u64,
    result: ApplyResult,
}

pub struct Node {
    cfg: NodeConfig,
    unl: Unl,
    signer: SharedSigner,
    directory: KeyDirectory,
    disk: SharedStore,

    genesis: Ledger,
    chain: BTreeMap<u64, Ledger>,
    tip: LedgerHeader,
    checkpoint: Option<AnchoredCheckpoint>,
    db: TableStore,
    committed: Arc<TableStore>,

    engine: ConsensusEngine,
    tracker: ValidationTracker,
    overlay: Option<Overlay>,
    candidates: BTreeMap<Hash32, (Ledger, u32)>,
    own_validation: Option<Validation>,
    last_proposal: Option<Proposal>,

    pool: BTreeMap<Hash32, Transaction>,
    local: BTreeSet<Hash32>,
    tx_records: BTreeMap<Hash32, TxRecord>,

    voting: bool,
    sync: Option<SyncRequest>,
    failed_peers: BTreeSet<NodeId>,
    lag_ticks: u32,
    peer_status: BTreeMap<NodeId, PeerStatus>,
    network_tip: u64,

    next_tick: u64,
    started_at: u64,
    validated_at: BTreeMap<u64, u64>,
    stats: OverlayStats,
    events: Vec<NodeEvent>,
    outbox: Vec<Outbound>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.cfg.node_id)
            .field("tip", &self.tip.seq)
            .field("voting", &self.voting)
            .finish_non_exhaustive()
    }
}

fn aligned_after(now: u64, interval: u64) -> u64 {
    (now / interval + 1) * interval
}

/// Trims a candidate set to transactions this node holds, has not yet
/// committed, and whose account sequences continue the committed ones.
fn shape_set(
    ids: BTreeSet<Hash32>,
    pool: &BTreeMap<Hash32, Transaction>,
    records: &BTreeMap<Hash32, TxRecord>,
    committed: &TableStore,
) -> BTreeSet<Hash32> {
    let mut by_account: BTreeMap<AccountId, Vec<&Transaction>> = BTreeMap::new();
    for id in &ids {
        if records.contains_key(id) {
            continue;
        }
        if let Some(tx) = pool.get(id) {
            by_account.entry(tx.account()).or_default().push(tx);
        }
    }
    let mut out = BTreeSet::new();
    for (account, mut txs) in by_account {
        txs.sort();
        let base = committed.account_seq(&account);
        let mut cur = base;
        for tx in txs {
            let s = tx.seq();
            if s == cur + 1 {
                cur = s;
                out.insert(tx.tx_id());
            } else if s == cur && cur > base {
                out.insert(tx.tx_id());
            } else if s > cur + 1 {
                break;
            }
        }
    }
    out
}

impl Node {
    pub fn new(
        cfg: NodeConfig,
        directory: KeyDirectory,
        disk: SharedStore,
        mode: StartMode,
        now: u64,
    ) -> Result<Self, NodeConfigError> {
        let unl = cfg.validate()?;
        let signer = cfg.signer();
        let empty = TableStore::new();
        let genesis = Ledger::genesis(empty.state_hash());
        let tip = *genesis.header();
        let engine = ConsensusEngine::new(cfg.node_id.clone(), unl.clone(), cfg.consensus.clone(), 1, tip.close_time);
        let mut node = Node {
            unl,
            signer,
            directory,
            disk,
            genesis,
            chain: BTreeMap::new(),
            tip,
            checkpoint: None,
            committed: Arc::new(empty.clone()),
            db: empty,
            engine,
            tracker: ValidationTracker::new(),
            overlay: None,
            candidates: BTreeMap::new(),
            own_validation: None,
            last_proposal: None,
            pool: BTreeMap::new(),
            local: BTreeSet::new(),
            tx_records: BTreeMap::new(),
            voting: false,
            sync: None,
            failed_peers: BTreeSet::new(),
            lag_ticks: 0,
            peer_status: BTreeMap::new(),
            network_tip: 0,
            next_tick: 0,
            started_at: now,
            validated_at: BTreeMap::new(),
            stats: OverlayStats::default(),
            events: Vec::new(),
            outbox: Vec::new(),
            cfg,
        };
        node.load(now, mode);
        Ok(node)
    }

    /// Rebuilds all state from the chain files. A store that fails
    /// verification is wiped and the node starts again from genesis.
    fn load(&mut self, now: u64, mode: StartMode) {
        let empty = TableStore::new();
        self.genesis = Ledger::genesis(empty.state_hash());
        self.chain.clear();
        self.checkpoint = None;
        self.tip = *self.genesis.header();
        self.db = empty;
        match load_chain(&*self.disk, true) {
            Ok(Some((loaded, report))) => {
                self.chain = loaded.ledgers.into_iter().map(|l| (l.seq(), l)).collect();
                self.tip = loaded.tip;
                self.db = loaded.store;
                self.checkpoint = loaded.checkpoint;
                self.events.push(NodeEvent::Loaded {
                    tip_seq: report.tip_seq,
                    replayed: report.replayed,
                    from_checkpoint: report.from_checkpoint,
                });
            }
            Ok(None) => self.write_genesis(),
            Err(e) => {
                self.events.push(NodeEvent::StoreReset { error: e.to_string() });
                if let Ok(names) = self.disk.list() {
                    for n in names {
                        let _ = self.disk.remove(&n);
                    }
                }
                self.write_genesis();
            }
        }
        self.committed = Arc::new(self.db.clone());
        self.engine.start_ledger(self.tip.seq + 1, self.tip.close_time);
        self.tracker = ValidationTracker::new();
        self.overlay = None;
        self.candidates.clear();
        self.own_validation = None;
        self.last_proposal = None;
        self.pool.clear();
        self.local.clear();
        self.tx_records.clear();
        for l in self.chain.values() {
            for tx in l.txs() {
                self.tx_records.insert(tx.tx_id(), TxRecord { seq: l.seq(), result: ApplyResult::Applied });
            }
        }
        self.voting = mode == StartMode::Bootstrap;
        self.sync = None;
        self.failed_peers.clear();
        self.lag_ticks = 0;
        self.peer_status.clear();
        self.network_tip = self.tip.seq;
        self.started_at = now;
        self.next_tick = aligned_after(now, self.interval());
    }

    fn write_genesis(&mut self) {
        let _ = write_ledger(&*self.disk, &self.genesis);
    }

    fn interval(&self) -> u64 {
        self.cfg.consensus.round_interval_ms
    }

    pub fn node_id(&self) -> &NodeId {
        &self.cfg.node_id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn unl(&self) -> &Unl {
        &self.unl
    }

    pub fn tip(&self) -> &LedgerHeader {
        &self.tip
    }

    pub fn genesis(&self) -> &Ledger {
        &self.genesis
    }

    /// Retained validated ledgers after genesis, ascending.
    pub fn ledgers(&self) -> impl Iterator<Item = &Ledger> {
        self.chain.values()
    }

    pub fn ledger(&self, seq: u64) -> Option<&Ledger> {
        if seq == 0 {
            return Some(&self.genesis);
        }
        self.chain.get(&seq)
    }

    pub fn committed_store(&self) -> &TableStore {
        &self.committed
    }

    pub fn state_hash(&self) -> Hash32 {
        self.committed.state_hash()
    }

    pub fn disk(&self) -> &SharedStore {
        &self.disk
    }

    pub fn is_voting(&self) -> bool {
        self.voting
    }

    pub fn is_syncing(&self) -> bool {
        self.sync.is_some()
    }

    pub fn is_serving(&self) -> bool {
        self.cfg.serving
    }

    pub fn set_serving(&mut self, serving: bool) {
        self.cfg.serving = serving;
    }

    pub fn phase(&self) -> Phase {
        self.engine.phase()
    }

    pub fn events(&self) -> &[NodeEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn overlay_stats(&self) -> OverlayStats {
        self.stats
    }

    /// State hash including any pending overlay.
    pub fn working_state_hash(&self) -> Hash32 {
        self.db.state_hash()
    }

    pub fn overlay_ops(&self) -> usize {
        self.overlay.as_ref().map_or(0, |o| o.outcomes.len())
    }

    pub fn has_overlay(&self) -> bool {
        self.overlay.is_some()
    }

    pub fn open_tx_count(&self) -> usize {
        self.pool.len()
    }

    pub fn validated_at(&self, seq: u64) -> Option<u64> {
        self.validated_at.get(&seq).copied()
    }

    pub fn checkpoint_seq(&self) -> Option<u64> {
        self.checkpoint.as_ref().map(|c| c.checkpoint.ledger_seq)
    }

    /// Highest validated seq seen from any voting peer (or ourselves).
    pub fn network_tip(&self) -> u64 {
        self.network_tip.max(self.tip.seq)
    }

    pub fn take_outbox(&mut self) -> Vec<Outbound> {
        std::mem::take(&mut self.outbox)
    }

    /// Replaces the UNL, for example when a promoted backup takes over as a
    /// standalone network after the production side was declared failed.
    pub fn reconfigure_unl(&mut self, members: Vec<NodeId>, directory: KeyDirectory) -> Result<(), NodeConfigError> {
        let mut cfg = self.cfg.clone();
        cfg.unl = members;
        let unl = cfg.validate()?;
        self.rollback_overlay(0);
        self.cfg = cfg;
        self.unl = unl.clone();
        self.directory = directory;
        self.engine = ConsensusEngine::new(
            self.cfg.node_id.clone(),
            unl,
            self.cfg.consensus.clone(),
            self.tip.seq + 1,
            self.tip.close_time,
        );
        self.tracker = ValidationTracker::new();
        self.candidates.clear();
        self.own_validation = None;
        self.last_proposal = None;
        self.peer_status.retain(|id, _| self.unl.contains(id));
        self.network_tip = self.tip.seq;
        self.voting = true;
        Ok(())
    }

    fn send(&mut self, to: &NodeId, msg: &Message) {
        self.outbox.push(Outbound::new(to.clone(), msg.to_frame()));
    }

    fn broadcast(&mut self, msg: &Message) {
        let frame = msg.to_frame();
        for p in self.unl.peers() {
            self.outbox.push(Outbound::new(p.clone(), frame.clone()));
        }
    }

    // ---- transactions ----

    /// Admits a transaction to the open pool and relays it to the UNL.
    /// `from_client` submissions are refused while the node is not serving.
    pub fn submit_tx(&mut self, tx: Transaction, from_client: bool) -> Result<Hash32, SubmitError> {
        if from_client && !self.cfg.serving {
            return Err(SubmitError::NotServing);
        }
        if !tx.verify() {
            return Err(SubmitError::BadSignature);
        }
        if tx.op().validate().is_err() {
            return Err(SubmitError::Malformed);
        }
        let id = tx.tx_id();
        if self.tx_records.contains_key(&id) || self.pool.contains_key(&id) {
            return Err(SubmitError::Duplicate);
        }
        if tx.seq() <= self.committed.account_seq(&tx.account()) {
            return Err(SubmitError::BadSeq);
        }
        self.broadcast(&Message::TxSubmit(tx.clone()));
        self.pool.insert(id, tx);
        if from_client {
            self.local.insert(id);
        }
        Ok(id)
    }

    pub fn tx_status(&self, tx_id: &Hash32) -> TxStatus {
        if let Some(r) = self.tx_records.get(tx_id) {
            TxStatus::Validated { ledger_seq: r.seq, result: r.result }
        } else if self.pool.contains_key(tx_id) {
            TxStatus::Pending
        } else {
            TxStatus::Unknown
        }
    }

    // ---- reads ----

    pub fn read_query(&self, table: &str, filter: &[Predicate], as_account: AccountId) -> Result<Vec<RowView>, ReadError> {
        if !self.cfg.db_attached {
            return Err(ReadError::Detached);
        }
        if !self.cfg.serving {
            return Err(ReadError::NotServing);
        }
        let applied = self.committed.applied_ledger_seq();
        let network = self.network_tip();
        if !self.voting || network.saturating_sub(applied) > self.cfg.read_gap_limit {
            return Err(ReadError::NotSynced { applied, network });
        }
        Ok(self.committed.query_select(table, filter, as_account)?)
    }

    /// One entry point for both paths: reads go to the attached database,
    /// everything else goes through consensus.
    pub fn combined_access(&mut self, req: AccessRequest) -> Result<AccessResponse, AccessError> {
        match req {
            AccessRequest::Read { table, filter, as_account } => {
                Ok(AccessResponse::Rows(self.read_query(&table, &filter, as_account)?))
            }
            AccessRequest::Write(tx) => Ok(AccessResponse::Submitted { tx_id: self.submit_tx(tx, true)? }),
        }
    }

    // ---- status ----

    pub fn server_info(&self, now: u64) -> ServerInfo {
        let horizon = now.saturating_sub(3 * self.interval());
        ServerInfo {
            node_id: self.cfg.node_id.clone(),
            role: self.cfg.role,
            peer_count: self.peer_status.values().filter(|p| p.last_seen >= horizon).count(),
            validated_seq: self.tip.seq,
            validated_hash: self.tip.hash(),
            applied_db_seq: self.committed.applied_ledger_seq(),
            open_tx_count: self.pool.len(),
            uptime_ms: now.saturating_sub(self.started_at),
            voting: self.voting,
            serving: self.cfg.serving,
            db_attached: self.cfg.db_attached,
            state_hash: self.committed.state_hash(),
            network_tip: self.network_tip(),
        }
    }

    pub fn peers(&self, now: u64) -> Vec<PeerInfo> {
        let horizon = now.saturating_sub(3 * self.interval());
        self.unl
            .peers()
            .iter()
            .map(|id| {
                let st = self.peer_status.get(id);
                PeerInfo {
                    node_id: id.clone(),
                    connected: st.is_some_and(|s| s.last_seen >= horizon),
                    last_seen_ms: st.map(|s| s.last_seen),
                    validated_seq: st.map(|s| s.validated_seq),
                    voting: st.map(|s| s.voting),
                }
            })
            .collect()
    }

    // ---- storage maintenance ----

    pub fn write_checkpoint(&mut self) -> Result<u64, PruneError> {
        let cp = self.committed.make_checkpoint().map_err(|e| PruneError::Io(e.to_string()))?;
        let seq = cp.ledger_seq;
        self.disk
            .write(&checkpoint_file_name(seq), &encode_checkpoint_file(&cp))
            .map_err(|e| PruneError::Io(e.to_string()))?;
        for old in checkpoint_seqs(&*self.disk).unwrap_or_default() {
            if old != seq {
                let _ = self.disk.remove(&checkpoint_file_name(old));
            }
        }
        self.checkpoint = Some(AnchoredCheckpoint { checkpoint: cp, anchor_hash: self.tip.hash() });
        self.events.push(NodeEvent::Checkpointed { seq });
        Ok(seq)
    }

    /// Removes ledgers at or below `tip - retain_last`. Requires a
    /// checkpoint between the horizon and the tip. Returns the removed range.
    pub fn prune(&mut self) -> Result<Option<(u64, u64)>, PruneError> {
        let retain = self.cfg.role.retain_last().ok_or(PruneError::NotPartial)?;
        let horizon = self.tip.seq.saturating_sub(retain);
        if horizon == 0 {
            return Ok(None);
        }
        match self.checkpoint_seq() {
            Some(c) if c >= horizon && c <= self.tip.seq => {}
            _ => return Err(PruneError::NoCheckpoint { horizon }),
        }
        let doomed: Vec<u64> = self.chain.range(..=horizon).map(|(s, _)| *s).collect();
        let (Some(&from), Some(&to)) = (doomed.first(), doomed.last()) else {
            return Ok(None);
        };
        for seq in &doomed {
            self.disk.remove(&ledger_file_name(*seq)).map_err(|e| PruneError::Io(e.to_string()))?;
            self.chain.remove(seq);
        }
        self.events.push(NodeEvent::Pruned { from, to });
        Ok(Some((from, to)))
    }

    fn after_commit_maintenance(&mut self) {
        if let Some(every) = self.cfg.effective_checkpoint_every() {
            if every > 0 && self.tip.seq > 0 && self.tip.seq % every == 0 {
                let _ = self.write_checkpoint();
            }
        }
        if self.cfg.role.retain_last().is_some() && self.cfg.auto_prune {
            let _ = self.prune();
        }
    }

    fn history_from(&self) -> u64 {
        self.chain.keys().next().copied().unwrap_or(self.tip.seq + 1)
    }

    /// What this node ships to a peer asking for ledgers from `from_seq`.
    pub fn serve_ledgers(&self, from_seq: u64) -> LedgerData {
        let first = self.history_from();
        let mut checkpoint = None;
        let mut start = from_seq.max(1);
        if start < first && start <= self.tip.seq {
            if let Some(cp) = &self.checkpoint {
                checkpoint = Some(cp.to_data());
                start = cp.checkpoint.ledger_seq + 1;
            } else {
                start = first;
            }
        }
        LedgerData {
            tip: self.tip,
            checkpoint,
            ledgers: self.chain.range(start..).map(|(_, l)| Blob(l.to_canonical_bytes())).collect(),
        }
    }

    // ---- overlay ----

    fn set_overlay(&mut self, now: u64, ids: &BTreeSet<Hash32>) {
        let seq = self.engine.seq();
        if let Some(o) = &self.overlay {
            if o.seq == seq && o.tx_ids == *ids {
                return;
            }
        }
        self.rollback_overlay(now);
        let mut txs: Vec<Transaction> = ids.iter().filter_map(|id| self.pool.get(id).cloned()).collect();
        txs.sort();
        if self.db.begin_pending().is_err() {
            return;
        }
        match self.db.apply_block(seq, &txs) {
            Ok(outcomes) => {
                self.stats.applied_ops += txs.len() as u64;
                self.overlay = Some(Overlay { seq, tx_ids: ids.clone(), outcomes });
            }
            Err(_) => {
                let _ = self.db.rollback_pending();
            }
        }
    }

    fn rollback_overlay(&mut self, now: u64) {
        if let Some(o) = self.overlay.take() {
            let _ = self.db.rollback_pending();
            if !o.outcomes.is_empty() {
                self.stats.rolled_back_ops += o.outcomes.len() as u64;
                self.stats.rollbacks += 1;
                self.events.push(NodeEvent::RolledBack { seq: o.seq, ops: o.outcomes.len(), time: now });
            }
        }
    }

    // ---- consensus ----

    fn consensus_tick(&mut self, now: u64) {
        if self.engine.phase() == Phase::Open {
            let relay: Vec<Transaction> = self.local.iter().filter_map(|id| self.pool.get(id).cloned()).collect();
            for tx in relay {
                self.broadcast(&Message::TxSubmit(tx));
            }
        }
        let pool_ids: BTreeSet<Hash32> = self.pool.keys().copied().collect();
        let outcome = {
            let pool = &self.pool;
            let records = &self.tx_records;
            let committed = &self.committed;
            let mut shape = |s: BTreeSet<Hash32>| shape_set(s, pool, records, committed);
            self.engine.on_tick(now, &pool_ids, &mut shape)
        };
        match outcome {
            TickOutcome::Propose { round, close_time, tx_ids, .. } => {
                self.set_overlay(now, &tx_ids);
                let p = Proposal::signed(
                    self.cfg.node_id.clone(),
                    round,
                    self.engine.seq(),
                    close_time,
                    tx_ids,
                    &*self.signer,
                );
                self.broadcast(&Message::Proposal(p.clone()));
                self.last_proposal = Some(p);
            }
            TickOutcome::Accepted { close_time, tx_ids, rounds } => {
                self.set_overlay(now, &tx_ids);
                self.accept(now, close_time, rounds);
            }
            TickOutcome::TimedOut => {
                self.rollback_overlay(now);
                self.own_validation = None;
            }
            TickOutcome::Idle => {
                if let Some(p) = self.last_proposal.clone() {
                    self.broadcast(&Message::Proposal(p));
                }
                if let Some(v) = self.own_validation.clone() {
                    self.broadcast(&Message::Validation(v));
                }
            }
        }
    }

    fn accept(&mut self, now: u64, close_time: u64, rounds: u32) {
        let Some(overlay) = &self.overlay else {
            self.engine.abandon();
            return;
        };
        let mut txs: Vec<Transaction> = overlay.tx_ids.iter().filter_map(|id| self.pool.get(id).cloned()).collect();
        txs.sort();
        let ledger = match build_ledger(&self.tip, txs, self.db.state_hash(), close_time) {
            Ok(l) => l,
            Err(_) => {
                self.rollback_overlay(now);
                self.engine.abandon();
                return;
            }
        };
        let hash = ledger.hash();
        let v = Validation::signed(self.cfg.node_id.clone(), ledger.seq(), close_time, hash, &*self.signer);
        self.candidates.insert(hash, (ledger, rounds));
        self.tracker.record_validation(&v);
        self.broadcast(&Message::Validation(v.clone()));
        self.own_validation = Some(v);
        self.check_validated(now);
    }

    fn quorum(&self) -> (usize, f64) {
        (self.unl.voters(), self.cfg.consensus.validation_quorum)
    }

    fn check_validated(&mut self, now: u64) {
        let (voters, q) = self.quorum();
        loop {
            let seq = self.tip.seq + 1;
            let Some(hash) = self.tracker.validated_hash(seq, voters, q) else {
                return;
            };
            match self.candidates.get(&hash).cloned() {
                Some((ledger, rounds)) => self.commit_ledger(now, ledger, Some(rounds)),
                None => {
                    if self.sync.is_none() {
                        let voters_for: Vec<NodeId> = self
                            .tracker
                            .voters_for(seq, &hash)
                            .into_iter()
                            .filter(|n| *n != self.cfg.node_id && !self.failed_peers.contains(n))
                            .collect();
                        if let Some(peer) = voters_for.first().cloned() {
                            self.request_ledgers(now, peer);
                        }
                    }
                    return;
                }
            }
        }
    }

    fn commit_ledger(&mut self, now: u64, ledger: Ledger, rounds: Option<u32>) {
        let seq = ledger.seq();
        let ids: BTreeSet<Hash32> = ledger.txs().iter().map(|t| t.tx_id()).collect();
        let via_overlay = self
            .overlay
            .as_ref()
            .is_some_and(|o| o.seq == seq && o.tx_ids == ids && self.db.state_hash() == ledger.header().state_hash);
        let outcomes = if via_overlay {
            let _ = self.db.commit_pending();
            let o = self.overlay.take().expect("checked above");
            self.stats.committed_ops += o.outcomes.len() as u64;
            o.outcomes
        } else {
            self.rollback_overlay(now);
            match self.db.apply_ledger(&ledger) {
                Ok(o) if self.db.state_hash() == ledger.header().state_hash => o,
                _ => {
                    self.db = (*self.committed).clone();
                    self.voting = false;
                    self.events.push(NodeEvent::Diverged { seq, time: now });
                    return;
                }
            }
        };
        let _ = write_ledger(&*self.disk, &ledger);
        self.tip = *ledger.header();
        self.committed = Arc::new(self.db.clone());
        for o in &outcomes {
            self.tx_records.insert(o.tx_id, TxRecord { seq, result: o.result });
        }
        self.chain.insert(seq, ledger);
        self.clean_pool();
        self.candidates.clear();
        self.own_validation = None;
        self.last_proposal = None;
        self.validated_at.insert(seq, now);
        self.events.push(NodeEvent::Validated { seq, hash: self.tip.hash(), time: now, txs: ids.len(), rounds });
        self.engine.start_ledger(seq + 1, self.tip.close_time);
        self.tracker.prune_below(seq + 1);
        self.network_tip = self.network_tip.max(seq);
        self.after_commit_maintenance();
    }

    fn clean_pool(&mut self) {
        let records = &self.tx_records;
        let committed = &self.committed;
        self.pool
            .retain(|id, tx| !records.contains_key(id) && tx.seq() > committed.account_seq(&tx.account()));
        let pool = &self.pool;
        self.local.retain(|id| pool.contains_key(id));
    }

    // ---- sync ----

    fn best_peer_tip(&self) -> u64 {
        self.peer_status.values().filter(|p| p.voting).map(|p| p.validated_seq).max().unwrap_or(0)
    }

    fn needs_sync(&mut self) -> bool {
        if !self.voting {
            return true;
        }
        let best = self.best_peer_tip();
        if best > self.tip.seq {
            self.lag_ticks += 1;
        } else {
            self.lag_ticks = 0;
        }
        best >= self.tip.seq + 2 || self.lag_ticks >= 2
    }

    fn pick_sync_peer(&mut self, now: u64) -> Option<NodeId> {
        let horizon = now.saturating_sub(3 * self.interval());
        let want = self.tip.seq + 1;
        let mut live: Vec<(&NodeId, &PeerStatus)> = self
            .peer_status
            .iter()
            .filter(|(id, p)| {
                p.voting && p.last_seen >= horizon && p.validated_seq >= self.tip.seq && !self.failed_peers.contains(*id)
            })
            .collect();
        if live.is_empty() {
            self.failed_peers.clear();
            return None;
        }
        // peers that can ship our gap without a checkpoint first, then the newest tip
        live.sort_by_key(|(id, p)| (p.history_from > want, std::cmp::Reverse(p.validated_seq), (*id).clone()));
        Some(live[0].0.clone())
    }

    fn request_ledgers(&mut self, now: u64, peer: NodeId) {
        let from_seq = self.tip.seq + 1;
        self.send(&peer, &Message::LedgerRequest { from_seq });
        self.events.push(NodeEvent::SyncStarted { peer: peer.clone(), from_seq, time: now });
        self.sync = Some(SyncRequest { peer, sent_at: now });
    }

    fn on_ledger_data(&mut self, now: u64, from: &NodeId, data: LedgerData) {
        if self.sync.as_ref().is_none_or(|s| s.peer != *from) {
            return;
        }
        self.sync = None;
        let (voters, q) = self.quorum();
        let tracker = &self.tracker;
        let known = |seq: u64| tracker.validated_hash(seq, voters, q);
        match verify_ledger_data(&self.tip, &self.committed, &data, &known) {
            Ok(v) => self.adopt_sync(now, from.clone(), v),
            Err(e) => {
                self.events.push(NodeEvent::SyncFailed {
                    peer: from.clone(),
                    error: e.to_string(),
                    reason: e.broken_reason(),
                    time: now,
                });
                self.failed_peers.insert(from.clone());
            }
        }
    }

    fn adopt_sync(&mut self, now: u64, peer: NodeId, v: VerifiedSync) {
        self.rollback_overlay(now);
        let via_checkpoint = v.checkpoint.as_ref().map(|c| c.ledger_seq);
        if let Some(cp) = &v.checkpoint {
            for seq in self.chain.keys() {
                let _ = self.disk.remove(&ledger_file_name(*seq));
            }
            self.chain.clear();
            let checkpoint = crate::sqlvm::Checkpoint {
                ledger_seq: cp.ledger_seq,
                snapshot: cp.snapshot.clone(),
                snapshot_hash: cp.snapshot_hash,
            };
            let _ = self.disk.write(&checkpoint_file_name(cp.ledger_seq), &encode_checkpoint_file(&checkpoint));
            for old in checkpoint_seqs(&*self.disk).unwrap_or_default() {
                if old != cp.ledger_seq {
                    let _ = self.disk.remove(&checkpoint_file_name(old));
                }
            }
            let _ = self.disk.append(MANIFEST, format!("{} {}\n", cp.ledger_seq, cp.anchor_hash.to_hex()).as_bytes());
            self.checkpoint = Some(AnchoredCheckpoint { checkpoint, anchor_hash: cp.anchor_hash });
        }
        let count = v.ledgers.len();
        for l in v.ledgers {
            let _ = write_ledger(&*self.disk, &l);
            self.validated_at.entry(l.seq()).or_insert(now);
            self.chain.insert(l.seq(), l);
        }
        for (seq, outs) in v.outcomes {
            for o in outs {
                self.tx_records.insert(o.tx_id, TxRecord { seq, result: o.result });
            }
        }
        self.db = v.store;
        self.committed = Arc::new(self.db.clone());
        self.tip = v.tip;
        self.clean_pool();
        self.candidates.clear();
        self.own_validation = None;
        self.last_proposal = None;
        self.engine.start_ledger(self.tip.seq + 1, self.tip.close_time);
        self.tracker.prune_below(self.tip.seq + 1);
        self.network_tip = self.network_tip.max(self.tip.seq);
        self.failed_peers.clear();
        self.lag_ticks = 0;
        self.events.push(NodeEvent::Synced {
            peer,
            ledgers: count,
            via_checkpoint,
            tip_seq: self.tip.seq,
            time: now,
        });
        if !self.voting {
            self.voting = true;
            self.events.push(NodeEvent::VotingEnabled { seq: self.tip.seq, time: now });
        }
        self.after_commit_maintenance();
        self.check_validated(now);
    }

    // ---- event loop ----

    fn heartbeat(&self) -> Message {
        Message::Info(Info::Heartbeat {
            validated_seq: self.tip.seq,
            validated_hash: self.tip.hash(),
            state_hash: self.committed.state_hash(),
            voting: self.voting,
            history_from: self.history_from(),
        })
    }

    fn tick(&mut self, now: u64) {
        let hb = self.heartbeat();
        self.broadcast(&hb);
        if let Some(s) = &self.sync {
            if now >= s.sent_at + 3 * self.interval() {
                let peer = s.peer.clone();
                self.events.push(NodeEvent::SyncFailed {
                    peer: peer.clone(),
                    error: SyncError::Timeout.to_string(),
                    reason: None,
                    time: now,
                });
                self.failed_peers.insert(peer);
                self.sync = None;
            }
        }
        if self.sync.is_none() && self.needs_sync() {
            if let Some(peer) = self.pick_sync_peer(now) {
                self.request_ledgers(now, peer);
            }
        }
        if self.voting && self.sync.is_none() {
            self.consensus_tick(now);
        }
    }

    pub fn handle_message(&mut self, now: u64, from: &NodeId, msg: Message) {
        let from_peer = self.unl.contains(from);
        match msg {
            Message::TxSubmit(tx) => {
                let tx_id = tx.tx_id();
                let result = self.submit_tx(tx, !from_peer);
                if !from_peer {
                    self.send(from, &Message::Info(Info::SubmitAck { tx_id, result: result.map(|_| ()) }));
                }
            }
            Message::Proposal(p) => {
                if p.node_id == *from && self.directory.get(from).is_some_and(|k| p.verify(k)) && self.voting {
                    self.engine.on_proposal(&p);
                }
            }
            Message::Validation(v) => {
                if v.node_id != *from || !from_peer || !self.directory.get(from).is_some_and(|k| v.verify(k)) {
                    return;
                }
                if self.tracker.record_validation(&v) == RecordOutcome::Equivocation {
                    self.events.push(NodeEvent::Equivocation { node: v.node_id.clone(), seq: v.ledger_seq });
                }
                if self.voting && self.sync.is_none() {
                    self.check_validated(now);
                }
            }
            Message::LedgerRequest { from_seq } => {
                if self.voting {
                    let data = self.serve_ledgers(from_seq);
                    self.send(from, &Message::LedgerData(data));
                }
            }
            Message::LedgerData(data) => self.on_ledger_data(now, from, data),
            Message::Info(Info::Heartbeat { validated_seq, voting, history_from, .. }) => {
                if from_peer {
                    self.peer_status
                        .insert(from.clone(), PeerStatus { last_seen: now, validated_seq, voting, history_from });
                    if voting {
                        self.network_tip = self.network_tip.max(validated_seq);
                    }
                }
            }
            Message::Info(Info::StatusQuery { tx_id }) => {
                let status = self.tx_status(&tx_id);
                self.send(from, &Message::Info(Info::StatusReply { tx_id, status }));
            }
            Message::Info(Info::SubmitAck { .. } | Info::StatusReply { .. }) => {}
        }
    }

    /// Reloads from the chain files as after a crash; the node stays
    /// non-voting until it has synced with a peer.
    pub fn restart(&mut self, now: u64) {
        self.load(now, StartMode::Rejoin);
    }
}

impl Actor for Node {
    fn on_message(&mut self, now: u64, from: &NodeId, payload: &[u8]) -> Vec<Outbound> {
        if let Ok(msg) = Message::from_frame(payload) {
            if let Some(p) = self.peer_status.get_mut(from) {
                p.last_seen = now;
            }
            self.handle_message(now, from, msg);
        }
        self.take_outbox()
    }

    fn on_timer(&mut self, now: u64) -> Vec<Outbound> {
        if now >= self.next_tick {
            self.next_tick = aligned_after(now, self.interval());
            self.tick(now);
        }
        self.take_outbox()
    }

    fn next_timer(&self) -> Option<u64> {
        Some(self.next_tick)
    }

    fn on_revive(&mut self, now: u64) -> Vec<Outbound> {
        self.restart(now);
        let hb = self.heartbeat();
        self.broadcast(&hb);
        self.take_outbox()
    }
}
