//! Multi-active client: submits signed operations to one node and fails
//! over to the next when the active node stops answering.
//!
//! Operations are dispatched one at a time, so the account sequence of the
//! next transaction is only fixed once the previous one is terminal. That
//! lets a rejected transaction's sequence be reused.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use super::cipher::{encrypt_operation, CipherError, EncryptionMode, Keyring};
use crate::consensus::NodeId;
use crate::ledger::{sign_transaction, AccountId, Hash32, SharedSigner, SqlOperation, Transaction, TxBody};
use crate::netsim::{Actor, Outbound};
use crate::node::{Info, Message, SubmitError, TxStatus};
use crate::sqlvm::ApplyResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// How long to wait for an ack or status reply before failing over.
    pub timeout_ms: u64,
    /// Added to the timeout after each consecutive unanswered attempt.
    pub backoff_ms: u64,
    /// Consecutive unanswered attempts before the operation is abandoned.
    pub max_retries: u32,
    pub poll_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { timeout_ms: 1500, backoff_ms: 250, max_retries: 8, poll_ms: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct TxHandle(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientError {
    #[error("no node answered after retries")]
    Unavailable,
    #[error("rejected by node: {0}")]
    Rejected(String),
    #[error("encryption: {0}")]
    Cipher(String),
    #[error("signing: {0}")]
    Signing(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum HandleStatus {
    Queued,
    Pending,
    Validated { ledger_seq: u64, result: ApplyResult },
    Failed { error: ClientError },
}

impl HandleStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, HandleStatus::Validated { .. } | HandleStatus::Failed { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wait {
    Ack,
    Poll,
    Reply,
}

#[derive(Debug, Clone)]
struct InFlight {
    handle: TxHandle,
    tx: Transaction,
    node: usize,
    wait: Wait,
    due: u64,
    misses: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct HandleRecord {
    pub handle: TxHandle,
    pub tx_id: Option<Hash32>,
    pub status: HandleStatus,
    pub submitted_at: u64,
    pub completed_at: Option<u64>,
    /// Node whose reply made the handle terminal.
    pub completed_via: Option<NodeId>,
    /// Every node the transaction was sent to, in order.
    pub sent_to: Vec<NodeId>,
}

pub struct ClientSession {
    id: NodeId,
    endpoints: Vec<NodeId>,
    active: usize,
    policy: RetryPolicy,
    signer: SharedSigner,
    keys: Keyring,
    mode: EncryptionMode,
    confirmed_seq: u64,
    queue: VecDeque<(TxHandle, SqlOperation)>,
    current: Option<InFlight>,
    records: BTreeMap<TxHandle, HandleRecord>,
    next_handle: u64,
    failovers: u64,
}

impl std::fmt::Debug for ClientSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientSession")
            .field("id", &self.id)
            .field("endpoints", &self.endpoints)
            .field("active", &self.active)
            .finish_non_exhaustive()
    }
}

impl ClientSession {
    /// `confirmed_seq` is the account's last applied sequence number.
    pub fn new(id: NodeId, endpoints: Vec<NodeId>, signer: SharedSigner, confirmed_seq: u64) -> Self {
        assert!(!endpoints.is_empty(), "a session needs at least one endpoint");
        Self {
            id,
            endpoints,
            active: 0,
            policy: RetryPolicy::default(),
            signer,
            keys: Keyring::new(),
            mode: EncryptionMode::None,
            confirmed_seq,
            queue: VecDeque::new(),
            current: None,
            records: BTreeMap::new(),
            next_handle: 1,
            failovers: 0,
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_encryption(mut self, keys: Keyring, mode: EncryptionMode) -> Self {
        self.keys = keys;
        self.mode = mode;
        self
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn account(&self) -> AccountId {
        self.signer.account_id()
    }

    pub fn endpoints(&self) -> &[NodeId] {
        &self.endpoints
    }

    pub fn active_node(&self) -> &NodeId {
        &self.endpoints[self.active]
    }

    pub fn failovers(&self) -> u64 {
        self.failovers
    }

    pub fn keyring(&self) -> &Keyring {
        &self.keys
    }

    pub fn mode(&self) -> &EncryptionMode {
        &self.mode
    }

    /// Replaces the node list, for example after a backup is promoted. An
    /// in-flight transaction is resent to the new active node.
    pub fn set_endpoints(&mut self, now: u64, endpoints: Vec<NodeId>) -> Vec<Outbound> {
        assert!(!endpoints.is_empty(), "a session needs at least one endpoint");
        self.endpoints = endpoints;
        self.active = 0;
        let mut out = Vec::new();
        if let Some(mut cur) = self.current.take() {
            cur.node = 0;
            cur.misses = 0;
            self.send_tx(now, &mut cur, &mut out);
            self.current = Some(cur);
        }
        out
    }

    pub fn status(&self, h: TxHandle) -> Option<&HandleStatus> {
        self.records.get(&h).map(|r| &r.status)
    }

    pub fn record(&self, h: TxHandle) -> Option<&HandleRecord> {
        self.records.get(&h)
    }

    pub fn records(&self) -> impl Iterator<Item = &HandleRecord> {
        self.records.values()
    }

    pub fn is_idle(&self) -> bool {
        self.current.is_none() && self.queue.is_empty()
    }

    /// Queues `op`; it is signed and sent once earlier operations finish.
    pub fn client_submit(&mut self, now: u64, op: SqlOperation) -> (TxHandle, Vec<Outbound>) {
        let h = TxHandle(self.next_handle);
        self.next_handle += 1;
        self.records.insert(
            h,
            HandleRecord {
                handle: h,
                tx_id: None,
                status: HandleStatus::Queued,
                submitted_at: now,
                completed_at: None,
                completed_via: None,
                sent_to: Vec::new(),
            },
        );
        self.queue.push_back((h, op));
        let mut out = Vec::new();
        self.dispatch(now, &mut out);
        (h, out)
    }

    fn finish(&mut self, now: u64, h: TxHandle, status: HandleStatus, via: Option<NodeId>) {
        if let Some(r) = self.records.get_mut(&h) {
            r.status = status;
            r.completed_at = Some(now);
            r.completed_via = via;
        }
    }

    fn build(&self, op: &SqlOperation) -> Result<Transaction, ClientError> {
        let op = encrypt_operation(&self.keys, &self.mode, op).map_err(|e: CipherError| ClientError::Cipher(e.to_string()))?;
        let body = TxBody::new(self.account(), self.confirmed_seq + 1, op);
        sign_transaction(body, self.signer.as_ref()).map_err(|e| ClientError::Signing(e.to_string()))
    }

    fn dispatch(&mut self, now: u64, out: &mut Vec<Outbound>) {
        while self.current.is_none() {
            let Some((h, op)) = self.queue.pop_front() else {
                return;
            };
            match self.build(&op) {
                Ok(tx) => {
                    if let Some(r) = self.records.get_mut(&h) {
                        r.tx_id = Some(tx.tx_id());
                        r.status = HandleStatus::Pending;
                    }
                    let mut cur = InFlight { handle: h, tx, node: self.active, wait: Wait::Ack, due: 0, misses: 0 };
                    self.send_tx(now, &mut cur, out);
                    self.current = Some(cur);
                }
                Err(error) => self.finish(now, h, HandleStatus::Failed { error }, None),
            }
        }
    }

    fn timeout(&self, misses: u32) -> u64 {
        self.policy.timeout_ms + self.policy.backoff_ms * u64::from(misses)
    }

    fn send_tx(&mut self, now: u64, cur: &mut InFlight, out: &mut Vec<Outbound>) {
        let to = self.endpoints[cur.node].clone();
        out.push(Outbound::new(to.clone(), Message::TxSubmit(cur.tx.clone()).to_frame()));
        if let Some(r) = self.records.get_mut(&cur.handle) {
            r.sent_to.push(to);
        }
        cur.wait = Wait::Ack;
        cur.due = now + self.timeout(cur.misses);
    }

    fn send_poll(&mut self, now: u64, cur: &mut InFlight, out: &mut Vec<Outbound>) {
        let to = self.endpoints[cur.node].clone();
        out.push(Outbound::new(to, Message::Info(Info::StatusQuery { tx_id: cur.tx.tx_id() }).to_frame()));
        cur.wait = Wait::Reply;
        cur.due = now + self.timeout(cur.misses);
    }

    /// Moves to the next endpoint and resends the same transaction.
    fn fail_over(&mut self, now: u64, mut cur: InFlight, out: &mut Vec<Outbound>) {
        cur.misses += 1;
        if cur.misses > self.policy.max_retries {
            self.finish(now, cur.handle, HandleStatus::Failed { error: ClientError::Unavailable }, None);
            self.dispatch(now, out);
            return;
        }
        self.active = (cur.node + 1) % self.endpoints.len();
        cur.node = self.active;
        self.failovers += 1;
        self.send_tx(now, &mut cur, out);
        self.current = Some(cur);
    }

    fn on_info(&mut self, now: u64, from: &NodeId, info: Info, out: &mut Vec<Outbound>) {
        let Some(mut cur) = self.current.take() else {
            return;
        };
        let ours = |id: &Hash32| *id == cur.tx.tx_id();
        match info {
            Info::SubmitAck { tx_id, result } if ours(&tx_id) && *from == self.endpoints[cur.node] => match result {
                // A duplicate means some node already holds or committed it.
                Ok(()) | Err(SubmitError::Duplicate) => {
                    cur.misses = 0;
                    cur.wait = Wait::Poll;
                    cur.due = now + self.policy.poll_ms;
                }
                Err(SubmitError::NotServing) => return self.fail_over(now, cur, out),
                Err(e) => {
                    self.finish(now, cur.handle, HandleStatus::Failed { error: ClientError::Rejected(e.to_string()) }, Some(from.clone()));
                    return self.dispatch(now, out);
                }
            },
            Info::StatusReply { tx_id, status } if ours(&tx_id) => match status {
                TxStatus::Validated { ledger_seq, result } => {
                    if result.is_applied() {
                        self.confirmed_seq = cur.tx.seq();
                    }
                    self.finish(now, cur.handle, HandleStatus::Validated { ledger_seq, result }, Some(from.clone()));
                    return self.dispatch(now, out);
                }
                TxStatus::Pending => {
                    cur.misses = 0;
                    cur.wait = Wait::Poll;
                    cur.due = now + self.policy.poll_ms;
                }
                // The node lost it, e.g. after a restart.
                TxStatus::Unknown => self.send_tx(now, &mut cur, out),
            },
            _ => {}
        }
        self.current = Some(cur);
    }
}

impl Actor for ClientSession {
    fn on_message(&mut self, now: u64, from: &NodeId, payload: &[u8]) -> Vec<Outbound> {
        let mut out = Vec::new();
        if let Ok(Message::Info(info)) = Message::from_frame(payload) {
            self.on_info(now, from, info, &mut out);
        }
        out
    }

    fn on_timer(&mut self, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        if let Some(mut cur) = self.current.take() {
            if cur.due > now {
                self.current = Some(cur);
            } else {
                match cur.wait {
                    Wait::Poll => {
                        self.send_poll(now, &mut cur, &mut out);
                        self.current = Some(cur);
                    }
                    Wait::Ack | Wait::Reply => self.fail_over(now, cur, &mut out),
                }
            }
        }
        self.dispatch(now, &mut out);
        out
    }

    fn next_timer(&self) -> Option<u64> {
        self.current.as_ref().map(|c| c.due)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{signer_from_seed, SchemeId};

    fn session(n: usize) -> ClientSession {
        let eps = (1..=n).map(|i| NodeId::new(format!("n{i}"))).collect();
        ClientSession::new(NodeId::from("c"), eps, signer_from_seed(SchemeId::InsecureTest, [1; 32]), 0)
    }

    fn op() -> SqlOperation {
        crate::sql::parse_operation("DROP TABLE t").unwrap()
    }

    #[test]
    fn fails_over_then_gives_up() {
        let mut s = session(2).with_policy(RetryPolicy { timeout_ms: 100, backoff_ms: 0, max_retries: 3, poll_ms: 10 });
        let (h, out) = s.client_submit(0, op());
        assert_eq!(out[0].to, NodeId::from("n1"));
        let mut t = 0;
        let mut targets = Vec::new();
        while let Some(due) = s.next_timer() {
            t = due;
            targets.extend(s.on_timer(t).into_iter().map(|o| o.to));
        }
        assert_eq!(targets, ["n2", "n1", "n2"].map(NodeId::from));
        assert_eq!(t, 400);
        assert_eq!(s.status(h), Some(&HandleStatus::Failed { error: ClientError::Unavailable }));
    }

    #[test]
    fn rejected_seq_is_reused() {
        let mut s = session(1);
        let (h1, out) = s.client_submit(0, op());
        let (h2, none) = s.client_submit(0, crate::sql::parse_operation("DROP TABLE u").unwrap());
        assert!(none.is_empty(), "second op waits for the first");
        let tx1 = Message::from_frame(&out[0].payload).unwrap();
        let Message::TxSubmit(tx1) = tx1 else { panic!() };
        let n1 = NodeId::from("n1");
        let reply = Info::StatusReply {
            tx_id: tx1.tx_id(),
            status: TxStatus::Validated {
                ledger_seq: 1,
                result: ApplyResult::Rejected(crate::sqlvm::RejectReason::NoSuchTable),
            },
        };
        let out = s.on_message(5, &n1, &Message::Info(reply).to_frame());
        assert!(matches!(s.status(h1), Some(HandleStatus::Validated { .. })));
        let Message::TxSubmit(tx2) = Message::from_frame(&out[0].payload).unwrap() else { panic!() };
        assert_eq!(tx2.seq(), tx1.seq());
        assert_ne!(tx2.tx_id(), tx1.tx_id());
        assert_eq!(s.status(h2), Some(&HandleStatus::Pending));
    }

    #[test]
    fn duplicate_ack_counts_as_accepted() {
        let mut s = session(2);
        let (h, out) = s.client_submit(0, op());
        let Message::TxSubmit(tx) = Message::from_frame(&out[0].payload).unwrap() else { panic!() };
        let ack = Info::SubmitAck { tx_id: tx.tx_id(), result: Err(SubmitError::Duplicate) };
        s.on_message(1, &NodeId::from("n1"), &Message::Info(ack).to_frame());
        assert_eq!(s.next_timer(), Some(1 + RetryPolicy::default().poll_ms));
        let out = s.on_timer(s.next_timer().unwrap());
        assert!(matches!(Message::from_frame(&out[0].payload).unwrap(), Message::Info(Info::StatusQuery { .. })));
        assert_eq!(s.status(h), Some(&HandleStatus::Pending));
    }
}
