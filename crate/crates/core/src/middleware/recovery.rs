//! Disaster recovery: a recovery center that pulls every validated ledger
//! from a backup node, re-executes it, and can be promoted to a serving
//! node once production is declared failed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::consensus::{ConsensusConfig, NodeId};
use crate::ledger::store::{write_ledger, FileStore, MemStore, MANIFEST};
use crate::ledger::{BrokenReason, Hash32, Ledger, LedgerHeader, SchemeId};
use crate::netsim::{Actor, Outbound};
use crate::node::{key_directory, verify_ledger_data, LedgerData, Message, Node, NodeConfig, StartMode, SyncError};
use crate::sqlvm::{checkpoint_file_name, encode_checkpoint_file, Checkpoint, TableStore};

pub const DEFAULT_RPO_WINDOW_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityAlarm {
    pub time: u64,
    pub error: String,
    pub reason: Option<BrokenReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ShipRecord {
    pub from: u64,
    pub to: u64,
    pub time: u64,
}

pub struct RecoveryCenter {
    id: NodeId,
    backup: NodeId,
    interval_ms: u64,
    rpo_window_ms: u64,
    streaming: bool,
    tip: LedgerHeader,
    store: TableStore,
    files: Arc<MemStore>,
    tx_ids: BTreeSet<Hash32>,
    applied_at: BTreeMap<u64, u64>,
    ships: Vec<ShipRecord>,
    alarm: Option<IntegrityAlarm>,
    next_tick: u64,
    outstanding: Option<u64>,
}

impl std::fmt::Debug for RecoveryCenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecoveryCenter")
            .field("id", &self.id)
            .field("backup", &self.backup)
            .field("shipped", &self.tip.seq)
            .finish_non_exhaustive()
    }
}

impl RecoveryCenter {
    pub fn new(id: NodeId, backup: NodeId, interval_ms: u64, rpo_window_ms: u64) -> Self {
        let store = TableStore::new();
        let genesis = Ledger::genesis(store.state_hash());
        let files = Arc::new(MemStore::new());
        let _ = write_ledger(&*files, &genesis);
        Self {
            id,
            backup,
            interval_ms,
            rpo_window_ms,
            streaming: true,
            tip: *genesis.header(),
            store,
            files,
            tx_ids: BTreeSet::new(),
            applied_at: BTreeMap::new(),
            ships: Vec::new(),
            alarm: None,
            next_tick: interval_ms,
            outstanding: None,
        }
    }

    pub fn set_streaming(&mut self, on: bool) {
        self.streaming = on;
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn backup(&self) -> &NodeId {
        &self.backup
    }

    pub fn rpo_window_ms(&self) -> u64 {
        self.rpo_window_ms
    }

    pub fn last_shipped_seq(&self) -> u64 {
        self.tip.seq
    }

    pub fn tip(&self) -> &LedgerHeader {
        &self.tip
    }

    pub fn store(&self) -> &TableStore {
        &self.store
    }

    pub fn state_hash(&self) -> Hash32 {
        self.store.state_hash()
    }

    pub fn files(&self) -> &Arc<MemStore> {
        &self.files
    }

    pub fn alarm(&self) -> Option<&IntegrityAlarm> {
        self.alarm.as_ref()
    }

    pub fn ships(&self) -> &[ShipRecord] {
        &self.ships
    }

    pub fn applied_at(&self, seq: u64) -> Option<u64> {
        self.applied_at.get(&seq).copied()
    }

    pub fn holds_tx(&self, tx_id: &Hash32) -> bool {
        self.tx_ids.contains(tx_id)
    }

    /// Verifies and applies a batch shipped by the backup. Returns the seq
    /// range newly applied. Any mismatch halts the center and leaves its
    /// state untouched.
    pub fn ingest(&mut self, now: u64, data: &LedgerData) -> Result<Option<(u64, u64)>, IntegrityAlarm> {
        if let Some(a) = &self.alarm {
            return Err(a.clone());
        }
        let v = match verify_ledger_data(&self.tip, &self.store, data, &|_| None) {
            Ok(v) => v,
            Err(SyncError::PeerBehind { .. }) => return Ok(None),
            Err(e) => {
                let alarm = IntegrityAlarm { time: now, error: e.to_string(), reason: e.broken_reason() };
                self.alarm = Some(alarm.clone());
                return Err(alarm);
            }
        };
        if v.ledgers.is_empty() && v.checkpoint.is_none() {
            return Ok(None);
        }
        let from = self.tip.seq + 1;
        if let Some(cp) = &v.checkpoint {
            let checkpoint =
                Checkpoint { ledger_seq: cp.ledger_seq, snapshot: cp.snapshot.clone(), snapshot_hash: cp.snapshot_hash };
            let _ = self.files.write(&checkpoint_file_name(cp.ledger_seq), &encode_checkpoint_file(&checkpoint));
            let _ = self.files.append(MANIFEST, format!("{} {}\n", cp.ledger_seq, cp.anchor_hash.to_hex()).as_bytes());
            self.applied_at.entry(cp.ledger_seq).or_insert(now);
        }
        for l in &v.ledgers {
            let _ = write_ledger(&*self.files, l);
            self.applied_at.insert(l.seq(), now);
            self.tx_ids.extend(l.txs().iter().map(|t| t.tx_id()));
        }
        self.store = v.store;
        self.tip = v.tip;
        self.ships.push(ShipRecord { from, to: self.tip.seq, time: now });
        Ok(Some((from, self.tip.seq)))
    }

    /// One synchronous streaming step against an in-process backup node.
    pub fn backup_stream_tick(&mut self, now: u64, backup: &Node) -> Result<Option<(u64, u64)>, IntegrityAlarm> {
        let data = backup.serve_ledgers(self.tip.seq + 1);
        self.ingest(now, &data)
    }
}

impl Actor for RecoveryCenter {
    fn on_message(&mut self, now: u64, from: &NodeId, payload: &[u8]) -> Vec<Outbound> {
        if *from != self.backup {
            return Vec::new();
        }
        if let Ok(Message::LedgerData(data)) = Message::from_frame(payload) {
            self.outstanding = None;
            let _ = self.ingest(now, &data);
        }
        Vec::new()
    }

    fn on_timer(&mut self, now: u64) -> Vec<Outbound> {
        if now < self.next_tick {
            return Vec::new();
        }
        self.next_tick = (now / self.interval_ms + 1) * self.interval_ms;
        let expired = self.outstanding.is_some_and(|t| now >= t + 3 * self.interval_ms);
        if !self.streaming || self.alarm.is_some() || (self.outstanding.is_some() && !expired) {
            return Vec::new();
        }
        self.outstanding = Some(now);
        vec![Outbound::new(self.backup.clone(), Message::LedgerRequest { from_seq: self.tip.seq + 1 }.to_frame())]
    }

    fn next_timer(&self) -> Option<u64> {
        Some(self.next_tick)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromoteError {
    #[error("no production failure has been declared")]
    NoFailureDeclared,
    #[error("recovery center is halted: {}", .0.error)]
    Halted(IntegrityAlarm),
    #[error("recovery center has ledger {shipped}, production validated {required}")]
    Lagging { shipped: u64, required: u64 },
    #[error("promoted store does not match the center: {0}")]
    Load(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromoteRequest {
    pub failure_declared: bool,
    /// Last ledger seq validated by production before it failed.
    pub required_seq: u64,
    /// Promote even if the center lags behind `required_seq`.
    pub allow_lag: bool,
    pub consensus: ConsensusConfig,
    pub key_scheme: SchemeId,
}

/// Materializes a standalone serving node from the center's shipped chain
/// files. The node keeps the center's id so clients only swap endpoints.
pub fn promote_backup(center: &RecoveryCenter, req: &PromoteRequest, now: u64) -> Result<Node, PromoteError> {
    if !req.failure_declared {
        return Err(PromoteError::NoFailureDeclared);
    }
    if let Some(a) = &center.alarm {
        return Err(PromoteError::Halted(a.clone()));
    }
    if center.last_shipped_seq() < req.required_seq && !req.allow_lag {
        return Err(PromoteError::Lagging { shipped: center.last_shipped_seq(), required: req.required_seq });
    }
    let mut cfg = NodeConfig::new(center.id.0.clone(), [center.id.clone()]);
    cfg.consensus = req.consensus.clone();
    cfg.key_scheme = req.key_scheme;
    let dir = key_directory([&cfg.node_id], cfg.key_scheme);
    let disk = MemStore::snapshot_of(&**center.files()).map_err(|e| PromoteError::Load(e.to_string()))?;
    let node = Node::new(cfg, dir, Arc::new(disk), StartMode::Bootstrap, now).map_err(|e| PromoteError::Load(e.to_string()))?;
    if node.tip().seq != center.tip.seq || node.state_hash() != center.state_hash() {
        return Err(PromoteError::Load(format!(
            "loaded tip {} state {}, center tip {} state {}",
            node.tip().seq,
            node.state_hash(),
            center.tip.seq,
            center.state_hash()
        )));
    }
    Ok(node)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub pre_failure_tx: usize,
    pub rpo_lost_tx: usize,
    pub rto_ms: Option<u64>,
}

/// Counts transactions validated before the failure that the promoted node
/// does not hold, and the time from failure to the first client success.
pub fn measure_recovery(
    pre_failure: &[Hash32],
    promoted: &Node,
    failed_at: u64,
    first_success_at: Option<u64>,
) -> RecoveryReport {
    let lost = pre_failure
        .iter()
        .filter(|id| !matches!(promoted.tx_status(id), crate::node::TxStatus::Validated { .. }))
        .count();
    RecoveryReport {
        pre_failure_tx: pre_failure.len(),
        rpo_lost_tx: lost,
        rto_ms: first_success_at.map(|t| t.saturating_sub(failed_at)),
    }
}
