//! In-process clusters on the simulated network: validating nodes, client
//! sessions and an optional backup plus recovery center.

pub mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::consensus::{ConsensusConfig, NodeId};
use crate::ledger::store::MemStore;
use crate::ledger::{
    seed_from_label, sign_transaction, signer_from_seed, Hash32, Ledger, SchemeId, SharedSigner,
    SqlOperation, Transaction, TxBody,
};
use crate::middleware::{promote_backup, ClientSession, PromoteError, PromoteRequest, RecoveryCenter, RetryPolicy, TxHandle};
use crate::netsim::{Actor, ClusterArgs, Envelope, Interceptor, NetConfig, NetError, Outbound, RunResult, SimNetwork};
use crate::node::{key_directory, KeyDirectory, Message, Node, NodeConfig, NodeRole, StartMode, SubmitError};

pub use scenario::{run_scenario, ScenarioError, ScenarioRun};

/// Id of the recovery center when a cluster has a backup node.
pub const CENTER_ID: &str = "dr";

pub enum SimActor {
    Node(Box<Node>),
    Client(Box<ClientSession>),
    Recovery(Box<RecoveryCenter>),
}

impl SimActor {
    pub fn as_node(&self) -> Option<&Node> {
        match self {
            SimActor::Node(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_node_mut(&mut self) -> Option<&mut Node> {
        match self {
            SimActor::Node(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_client(&self) -> Option<&ClientSession> {
        match self {
            SimActor::Client(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_client_mut(&mut self) -> Option<&mut ClientSession> {
        match self {
            SimActor::Client(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_center(&self) -> Option<&RecoveryCenter> {
        match self {
            SimActor::Recovery(c) => Some(c),
            _ => None,
        }
    }
}

impl Actor for SimActor {
    fn on_message(&mut self, now: u64, from: &NodeId, payload: &[u8]) -> Vec<Outbound> {
        match self {
            SimActor::Node(a) => a.on_message(now, from, payload),
            SimActor::Client(a) => a.on_message(now, from, payload),
            SimActor::Recovery(a) => a.on_message(now, from, payload),
        }
    }

    fn on_timer(&mut self, now: u64) -> Vec<Outbound> {
        match self {
            SimActor::Node(a) => a.on_timer(now),
            SimActor::Client(a) => a.on_timer(now),
            SimActor::Recovery(a) => a.on_timer(now),
        }
    }

    fn next_timer(&self) -> Option<u64> {
        match self {
            SimActor::Node(a) => a.next_timer(),
            SimActor::Client(a) => a.next_timer(),
            SimActor::Recovery(a) => a.next_timer(),
        }
    }

    fn on_kill(&mut self, now: u64) {
        match self {
            SimActor::Node(a) => a.on_kill(now),
            SimActor::Client(a) => a.on_kill(now),
            SimActor::Recovery(a) => a.on_kill(now),
        }
    }

    fn on_revive(&mut self, now: u64) -> Vec<Outbound> {
        match self {
            SimActor::Node(a) => a.on_revive(now),
            SimActor::Client(a) => a.on_revive(now),
            SimActor::Recovery(a) => a.on_revive(now),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    /// Production nodes, named `n1..nN`.
    pub nodes: usize,
    pub net: NetConfig,
    pub consensus: ConsensusConfig,
    pub partial: BTreeMap<String, u64>,
    pub detached: BTreeSet<String>,
    pub late: BTreeSet<String>,
    pub backup: Option<String>,
    pub rpo_window_ms: u64,
    pub key_scheme: SchemeId,
}

impl ClusterSpec {
    pub fn new(nodes: usize, seed: u64) -> Self {
        Self {
            nodes,
            net: NetConfig { base_latency_ms: 10, jitter_max_ms: 20, drop_rate: 0.0, seed },
            consensus: ConsensusConfig::default(),
            partial: BTreeMap::new(),
            detached: BTreeSet::new(),
            late: BTreeSet::new(),
            backup: None,
            rpo_window_ms: crate::middleware::DEFAULT_RPO_WINDOW_MS,
            key_scheme: SchemeId::InsecureTest,
        }
    }

    pub fn from_args(args: &ClusterArgs, seed: u64) -> Self {
        let mut s = Self::new(args.nodes as usize, seed);
        s.net.base_latency_ms = args.base_latency_ms;
        s.net.jitter_max_ms = args.jitter_ms;
        s.net.drop_rate = args.drop_rate;
        s.consensus.round_interval_ms = args.round_interval_ms;
        s.partial = args.partial.clone();
        s.detached = args.detached.iter().cloned().collect();
        s.late = args.late.iter().cloned().collect();
        s.backup = args.backup.clone();
        if let Some(w) = args.rpo_window_ms {
            s.rpo_window_ms = w;
        }
        s
    }

    pub fn production_ids(&self) -> Vec<NodeId> {
        (1..=self.nodes).map(|i| NodeId::new(format!("n{i}"))).collect()
    }

    /// Every consensus participant: production nodes plus the backup.
    pub fn validator_ids(&self) -> Vec<NodeId> {
        let mut ids = self.production_ids();
        if let Some(b) = &self.backup {
            ids.push(NodeId::new(b.clone()));
        }
        ids
    }

    pub fn node_config(&self, id: &NodeId) -> NodeConfig {
        let mut cfg = NodeConfig::new(id.0.clone(), self.validator_ids());
        cfg.consensus = self.consensus.clone();
        cfg.key_scheme = self.key_scheme;
        if let Some(&r) = self.partial.get(&id.0) {
            cfg.role = NodeRole::PartialRecord { retain_last: r };
        }
        cfg.db_attached = !self.detached.contains(&id.0);
        if self.backup.as_deref() == Some(id.0.as_str()) {
            cfg.serving = false;
        }
        cfg
    }
}

pub fn account_signer(name: &str, scheme: SchemeId) -> SharedSigner {
    signer_from_seed(scheme, seed_from_label(&format!("account:{name}")))
}

pub struct Cluster {
    pub net: SimNetwork<SimActor>,
    spec: ClusterSpec,
    directory: KeyDirectory,
    disks: BTreeMap<NodeId, Arc<MemStore>>,
    submitted_seq: BTreeMap<crate::ledger::AccountId, u64>,
    clients: Vec<NodeId>,
    retired_center: Option<Box<RecoveryCenter>>,
}

impl Cluster {
    pub fn build(spec: ClusterSpec) -> Result<Self, NetError> {
        let validators = spec.validator_ids();
        let directory = key_directory(&validators, spec.key_scheme);
        let mut net = SimNetwork::new(spec.net);
        let mut disks = BTreeMap::new();
        for id in &validators {
            let disk = Arc::new(MemStore::new());
            let cfg = spec.node_config(id);
            let mode = if spec.late.contains(&id.0) { StartMode::Rejoin } else { StartMode::Bootstrap };
            let node = Node::new(cfg, directory.clone(), disk.clone(), mode, 0).expect("cluster configs are valid");
            net.register(id.clone(), SimActor::Node(Box::new(node)))?;
            disks.insert(id.clone(), disk);
        }
        if let Some(b) = &spec.backup {
            let center = RecoveryCenter::new(
                NodeId::from(CENTER_ID),
                NodeId::new(b.clone()),
                spec.consensus.round_interval_ms,
                spec.rpo_window_ms,
            );
            net.register(NodeId::from(CENTER_ID), SimActor::Recovery(Box::new(center)))?;
        }
        for id in &spec.late {
            net.kill(&NodeId::new(id.clone()))?;
        }
        Ok(Self {
            net,
            spec,
            directory,
            disks,
            submitted_seq: BTreeMap::new(),
            clients: Vec::new(),
            retired_center: None,
        })
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn directory(&self) -> &KeyDirectory {
        &self.directory
    }

    pub fn now(&self) -> u64 {
        self.net.now()
    }

    pub fn disk(&self, id: &NodeId) -> Option<&Arc<MemStore>> {
        self.disks.get(id)
    }

    pub fn production_ids(&self) -> Vec<NodeId> {
        self.spec.production_ids()
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.net.actor(id).and_then(SimActor::as_node)
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut Node> {
        self.net.actor_mut(id).and_then(SimActor::as_node_mut)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, &Node)> {
        self.net.actors().filter_map(|(id, a)| a.as_node().map(|n| (id, n)))
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = (&NodeId, &Node)> {
        self.nodes().filter(|(id, _)| self.net.is_alive(id))
    }

    pub fn client(&self, id: &NodeId) -> Option<&ClientSession> {
        self.net.actor(id).and_then(SimActor::as_client)
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientSession> {
        self.clients.iter().filter_map(|id| self.client(id))
    }

    /// The live recovery center, or the one retired by promotion.
    pub fn center(&self) -> Option<&RecoveryCenter> {
        self.net
            .actor(&NodeId::from(CENTER_ID))
            .and_then(SimActor::as_center)
            .or(self.retired_center.as_deref())
    }

    pub fn center_mut(&mut self) -> Option<&mut RecoveryCenter> {
        match self.net.actor_mut(&NodeId::from(CENTER_ID)) {
            Some(SimActor::Recovery(c)) => Some(c),
            _ => None,
        }
    }

    pub fn promoted(&self) -> Option<&Node> {
        self.retired_center.as_ref().and(self.node(&NodeId::from(CENTER_ID)))
    }

    /// Highest validated seq among live voting nodes.
    pub fn max_tip(&self) -> u64 {
        self.live_nodes().filter(|(_, n)| n.is_voting()).map(|(_, n)| n.tip().seq).max().unwrap_or(0)
    }

    pub fn min_tip(&self) -> u64 {
        self.live_nodes().filter(|(_, n)| n.is_voting()).map(|(_, n)| n.tip().seq).min().unwrap_or(0)
    }

    /// Signs `op` for `signer` with the next free sequence number and
    /// submits it to `node` as a client would.
    pub fn submit(&mut self, node: &NodeId, signer: &SharedSigner, op: SqlOperation) -> Result<Hash32, SubmitError> {
        let account = signer.account_id();
        let committed = self.node(node).map_or(0, |n| n.committed_store().account_seq(&account));
        let seq = committed.max(self.submitted_seq.get(&account).copied().unwrap_or(0)) + 1;
        let tx = sign_transaction(TxBody::new(account, seq, op), signer.as_ref()).map_err(|_| SubmitError::Malformed)?;
        let r = self
            .net
            .invoke(node, |a, _| match a.as_node_mut() {
                Some(n) => {
                    let r = n.submit_tx(tx, true);
                    (r, n.take_outbox())
                }
                None => (Err(SubmitError::NotServing), Vec::new()),
            })
            .unwrap_or(Err(SubmitError::NotServing));
        if r.is_ok() {
            self.submitted_seq.insert(account, seq);
        }
        r
    }

    pub fn submit_signed(&mut self, node: &NodeId, tx: Transaction) -> Result<Hash32, SubmitError> {
        self.net
            .invoke(node, |a, _| match a.as_node_mut() {
                Some(n) => {
                    let r = n.submit_tx(tx, true);
                    (r, n.take_outbox())
                }
                None => (Err(SubmitError::NotServing), Vec::new()),
            })
            .unwrap_or(Err(SubmitError::NotServing))
    }

    /// Forgets locally tracked sequence numbers, e.g. after rejections.
    pub fn reset_submitted_seq(&mut self) {
        self.submitted_seq.clear();
    }

    pub fn add_client(
        &mut self,
        id: &str,
        endpoints: Vec<NodeId>,
        signer: SharedSigner,
        policy: RetryPolicy,
    ) -> Result<NodeId, NetError> {
        let id = NodeId::new(id);
        let confirmed = self.nodes().map(|(_, n)| n.committed_store().account_seq(&signer.account_id())).max().unwrap_or(0);
        let c = ClientSession::new(id.clone(), endpoints, signer, confirmed).with_policy(policy);
        self.net.register(id.clone(), SimActor::Client(Box::new(c)))?;
        self.clients.push(id.clone());
        Ok(id)
    }

    pub fn replace_client(&mut self, id: &NodeId, session: ClientSession) {
        if let Some(a) = self.net.actor_mut(id) {
            *a = SimActor::Client(Box::new(session));
        }
    }

    pub fn client_submit(&mut self, client: &NodeId, op: SqlOperation) -> Result<TxHandle, NetError> {
        self.net.invoke(client, |a, now| match a.as_client_mut() {
            Some(c) => c.client_submit(now, op),
            None => (TxHandle(0), Vec::new()),
        })
    }

    pub fn run_to(&mut self, t: u64) {
        self.net.run_to(t);
    }

    pub fn run_until(&mut self, pred: impl FnMut(&SimNetwork<SimActor>) -> bool, max_time: u64) -> RunResult {
        self.net.run_until(pred, max_time)
    }

    /// Runs until every live voting node has validated `seq`.
    pub fn run_until_tip(&mut self, seq: u64, max_time: u64) -> RunResult {
        self.net.run_until(
            move |net| {
                net.actors()
                    .filter(|(id, _)| net.is_alive(id))
                    .filter_map(|(_, a)| a.as_node())
                    .filter(|n| n.is_voting())
                    .all(|n| n.tip().seq >= seq)
            },
            max_time,
        )
    }

    pub fn run_until_clients_idle(&mut self, max_time: u64) -> RunResult {
        self.net.run_until(
            |net| net.actors().filter_map(|(_, a)| a.as_client()).all(|c| c.is_idle()),
            max_time,
        )
    }

    /// Ledgers 1..tip from the live node with the longest full history.
    pub fn reference_chain(&self) -> Vec<&Ledger> {
        let best = self
            .live_nodes()
            .filter(|(_, n)| n.ledger(1).is_some() || n.tip().seq == 0)
            .max_by_key(|(_, n)| n.tip().seq);
        match best {
            Some((_, n)) => n.ledgers().collect(),
            None => Vec::new(),
        }
    }

    /// Swaps the recovery center for a standalone serving node under the
    /// same id and points every client at it.
    pub fn promote(&mut self, req: &PromoteRequest) -> Result<&Node, PromoteError> {
        let now = self.now();
        let center = self.center_mut().ok_or(PromoteError::NoFailureDeclared)?;
        let node = promote_backup(center, req, now)?;
        let id = NodeId::from(CENTER_ID);
        let old = std::mem::replace(self.net.actor_mut(&id).expect("center registered"), SimActor::Node(Box::new(node)));
        if let SimActor::Recovery(c) = old {
            self.retired_center = Some(c);
        }
        for c in self.clients.clone() {
            let _ = self.net.invoke(&c, |a, now| match a.as_client_mut() {
                Some(s) => ((), s.set_endpoints(now, vec![id.clone()])),
                None => ((), Vec::new()),
            });
        }
        Ok(self.node(&id).expect("just installed"))
    }
}

/// Flips one byte of every ledger batch delivered to `target`: inside the
/// last shipped ledger, or inside the checkpoint snapshot if no ledgers
/// follow it.
pub fn tamper_ledger_data(target: NodeId) -> Interceptor {
    Box::new(move |env: &mut Envelope| {
        if env.to != target {
            return true;
        }
        if let Ok(Message::LedgerData(mut data)) = Message::from_frame(&env.payload) {
            if let Some(last) = data.ledgers.last_mut() {
                let mut ledger_bytes = last.0.clone();
                let i = ledger_bytes.len() / 2;
                ledger_bytes[i] ^= 0x20;
                last.0 = ledger_bytes;
            } else if let Some(cp) = data.checkpoint.as_mut() {
                if !cp.snapshot.is_empty() {
                    let i = cp.snapshot.len() / 2;
                    cp.snapshot[i] ^= 0x20;
                } else {
                    return true;
                }
            } else {
                return true;
            }
            env.payload = Message::LedgerData(data).to_frame();
        }
        true
    })
}
