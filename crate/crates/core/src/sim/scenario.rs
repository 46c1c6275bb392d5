//! Executes a [`ScenarioScript`] on a simulated cluster and reports every
//! action as one JSON line.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};
use thiserror::Error;

use super::{account_signer, Cluster, ClusterSpec, CENTER_ID};
use crate::consensus::NodeId;
use crate::ledger::Hash32;
use crate::middleware::{measure_recovery, HandleStatus, PromoteRequest, RetryPolicy};
use crate::netsim::{AssertCheck, NetError, ScenarioAction, ScenarioScript};
use crate::node::load_chain;
use crate::sql::{parse_operation, parse_sql, SqlError, Statement};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("action {index}: the first action must be \"cluster\"")]
    NoCluster { index: usize },
    #[error("action {index}: cluster already built")]
    ClusterTwice { index: usize },
    #[error("action {index}: {err}")]
    Net { index: usize, err: NetError },
    #[error("action {index}: {err}")]
    Sql { index: usize, err: SqlError },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRun {
    pub lines: Vec<String>,
    pub assertions: usize,
    pub failed: usize,
    pub trace_digest: String,
}

impl ScenarioRun {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }

    pub fn output(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

struct Failure {
    at: u64,
    required_seq: u64,
    pre_failure: Vec<Hash32>,
}

struct Runner {
    seed: u64,
    cluster: Option<Cluster>,
    lines: Vec<String>,
    kill_times: BTreeMap<NodeId, u64>,
    failure: Option<Failure>,
    assertions: usize,
    failed: usize,
}

fn err_json(e: impl std::fmt::Display) -> Value {
    Value::String(e.to_string())
}

impl Runner {
    fn emit(&mut self, v: Value) {
        self.lines.push(v.to_string());
    }

    fn cluster(&mut self, index: usize) -> Result<&mut Cluster, ScenarioError> {
        self.cluster.as_mut().ok_or(ScenarioError::NoCluster { index })
    }

    fn run(&mut self, script: &ScenarioScript) -> Result<(), ScenarioError> {
        for (index, ta) in script.actions.iter().enumerate() {
            if let Some(c) = self.cluster.as_mut() {
                c.run_to(ta.t);
            }
            let t = ta.t;
            let net = |err| ScenarioError::Net { index, err };
            match &ta.action {
                ScenarioAction::Cluster(args) => {
                    if self.cluster.is_some() {
                        return Err(ScenarioError::ClusterTwice { index });
                    }
                    let mut c = Cluster::build(ClusterSpec::from_args(args, self.seed)).map_err(net)?;
                    c.run_to(t);
                    let ids: Vec<String> = c.spec().validator_ids().into_iter().map(|n| n.0).collect();
                    self.cluster = Some(c);
                    self.emit(json!({"t": t, "action": "cluster", "validators": ids, "seed": self.seed}));
                }
                ScenarioAction::Submit { node, sql, account } => {
                    let op = parse_operation(sql).map_err(|err| ScenarioError::Sql { index, err })?;
                    let c = self.cluster(index)?;
                    let scheme = c.spec().key_scheme;
                    let id = NodeId::new(node.clone());
                    if c.net.actor(&id).is_none() {
                        return Err(net(NetError::UnknownNode(id)));
                    }
                    let line = match c.submit(&id, &account_signer(account, scheme), op) {
                        Ok(tx_id) => json!({"t": t, "action": "submit", "node": node, "tx_id": tx_id}),
                        Err(e) => json!({"t": t, "action": "submit", "node": node, "error": err_json(e)}),
                    };
                    self.emit(line);
                }
                ScenarioAction::ClientSubmit { client, sql, account } => {
                    let op = parse_operation(sql).map_err(|err| ScenarioError::Sql { index, err })?;
                    let c = self.cluster(index)?;
                    let id = NodeId::new(client.clone());
                    if c.client(&id).is_none() {
                        let eps = match c.promoted() {
                            Some(_) => vec![NodeId::from(CENTER_ID)],
                            None => c.production_ids(),
                        };
                        let signer = account_signer(account, c.spec().key_scheme);
                        c.add_client(client, eps, signer, RetryPolicy::default()).map_err(net)?;
                    }
                    let h = c.client_submit(&id, op).map_err(net)?;
                    let tx_id = c.client(&id).and_then(|s| s.record(h)).and_then(|r| r.tx_id);
                    self.emit(json!({"t": t, "action": "client_submit", "client": client, "handle": h.0, "tx_id": tx_id}));
                }
                ScenarioAction::Select { node, sql, account } => {
                    let st = parse_sql(sql).map_err(|err| ScenarioError::Sql { index, err })?;
                    let Statement::Select { table, filter } = st else {
                        return Err(ScenarioError::Sql {
                            index,
                            err: SqlError {
                                position: 1,
                                kind: crate::sql::SqlErrorKind::Syntax("select expects a SELECT statement".into()),
                            },
                        });
                    };
                    let c = self.cluster(index)?;
                    let id = NodeId::new(node.clone());
                    let signer = account_signer(account, c.spec().key_scheme);
                    let n = c.node(&id).ok_or_else(|| net(NetError::UnknownNode(id.clone())))?;
                    let line = match n.read_query(&table, &filter, signer.account_id()) {
                        Ok(rows) => json!({"t": t, "action": "select", "node": node, "rows": rows}),
                        Err(e) => json!({"t": t, "action": "select", "node": node, "error": err_json(e)}),
                    };
                    self.emit(line);
                }
                ScenarioAction::Kill { node } => {
                    let id = NodeId::new(node.clone());
                    self.cluster(index)?.net.kill(&id).map_err(net)?;
                    self.kill_times.entry(id).or_insert(t);
                    self.emit(json!({"t": t, "action": "kill", "node": node}));
                }
                ScenarioAction::Revive { node } => {
                    let id = NodeId::new(node.clone());
                    self.cluster(index)?.net.revive(&id).map_err(net)?;
                    self.kill_times.remove(&id);
                    self.emit(json!({"t": t, "action": "revive", "node": node}));
                }
                ScenarioAction::Partition { groups } => {
                    let g: Vec<Vec<NodeId>> =
                        groups.iter().map(|g| g.iter().map(|n| NodeId::new(n.clone())).collect()).collect();
                    self.cluster(index)?.net.partition(&g).map_err(net)?;
                    self.emit(json!({"t": t, "action": "partition", "groups": groups}));
                }
                ScenarioAction::Heal => {
                    self.cluster(index)?.net.heal();
                    self.emit(json!({"t": t, "action": "heal"}));
                }
                ScenarioAction::DeclareFailure { nodes } => {
                    let kill_times = self.kill_times.clone();
                    let c = self.cluster(index)?;
                    let mut required_seq = 0;
                    let mut txs = BTreeSet::new();
                    let mut at = t;
                    for n in nodes {
                        let id = NodeId::new(n.clone());
                        let node = c.node(&id).ok_or_else(|| net(NetError::UnknownNode(id.clone())))?;
                        required_seq = required_seq.max(node.tip().seq);
                        for l in node.ledgers() {
                            txs.extend(l.txs().iter().map(|tx| tx.tx_id()));
                        }
                        at = at.min(kill_times.get(&id).copied().unwrap_or(t));
                    }
                    let count = txs.len();
                    self.failure = Some(Failure { at, required_seq, pre_failure: txs.into_iter().collect() });
                    self.emit(json!({"t": t, "action": "declare_failure", "nodes": nodes, "failed_at": at,
                                     "last_validated_seq": required_seq, "validated_txs": count}));
                }
                ScenarioAction::Promote => {
                    let (declared, required_seq) = match &self.failure {
                        Some(f) => (true, f.required_seq),
                        None => (false, 0),
                    };
                    let c = self.cluster(index)?;
                    let req = PromoteRequest {
                        failure_declared: declared,
                        required_seq,
                        allow_lag: false,
                        consensus: c.spec().consensus.clone(),
                        key_scheme: c.spec().key_scheme,
                    };
                    let line = match c.promote(&req) {
                        Ok(n) => json!({"t": t, "action": "promote", "node": CENTER_ID, "tip_seq": n.tip().seq,
                                        "state_hash": n.state_hash()}),
                        Err(e) => json!({"t": t, "action": "promote", "error": err_json(e)}),
                    };
                    self.emit(line);
                }
                ScenarioAction::ServerInfo { node } => {
                    let c = self.cluster(index)?;
                    let id = NodeId::new(node.clone());
                    let n = c.node(&id).ok_or_else(|| net(NetError::UnknownNode(id.clone())))?;
                    let info = n.server_info(t);
                    self.emit(json!({"t": t, "action": "server_info", "info": info}));
                }
                ScenarioAction::Peers { node } => {
                    let c = self.cluster(index)?;
                    let id = NodeId::new(node.clone());
                    let n = c.node(&id).ok_or_else(|| net(NetError::UnknownNode(id.clone())))?;
                    let peers = n.peers(t);
                    self.emit(json!({"t": t, "action": "peers", "node": node, "peers": peers}));
                }
                ScenarioAction::Assert(check) => {
                    let c = self.cluster.as_ref().ok_or(ScenarioError::NoCluster { index })?;
                    let (name, pass, detail) = evaluate(c, check, self.failure.as_ref());
                    self.assertions += 1;
                    if !pass {
                        self.failed += 1;
                    }
                    self.emit(json!({"t": t, "action": "assert", "check": name, "pass": pass, "detail": detail}));
                }
            }
        }
        Ok(())
    }

    fn summary(&mut self) {
        let Some(c) = self.cluster.as_ref() else {
            return;
        };
        let mut lines = Vec::new();
        for s in c.clients() {
            for r in s.records() {
                lines.push(json!({"event": "handle", "client": s.id(), "handle": r.handle.0, "tx_id": r.tx_id,
                                  "status": r.status, "completed_at": r.completed_at, "via": r.completed_via}));
            }
        }
        for (id, n) in c.nodes() {
            lines.push(json!({"event": "final", "node": id, "alive": c.net.is_alive(id), "voting": n.is_voting(),
                              "tip_seq": n.tip().seq, "state_hash": n.state_hash()}));
        }
        if let Some(center) = c.center() {
            lines.push(json!({"event": "center", "shipped_seq": center.last_shipped_seq(),
                              "state_hash": center.state_hash(), "alarm": center.alarm()}));
        }
        lines.push(json!({"event": "end", "t": c.now(), "trace_digest": c.net.trace_digest(),
                          "assertions": self.assertions, "failed": self.failed}));
        for l in lines {
            self.emit(l);
        }
    }
}

fn evaluate(c: &Cluster, check: &AssertCheck, failure: Option<&Failure>) -> (&'static str, bool, String) {
    match check {
        AssertCheck::ReplicasEqual => {
            let attached: Vec<_> =
                c.live_nodes().filter(|(_, n)| n.config().db_attached && n.is_voting()).collect();
            let Some(common) = attached.iter().map(|(_, n)| n.tip().seq).min() else {
                return ("replicas_equal", false, "no live db-attached nodes".into());
            };
            let hashes: BTreeSet<Option<Hash32>> = attached
                .iter()
                .map(|(_, n)| {
                    if n.tip().seq == common {
                        Some(n.state_hash())
                    } else {
                        n.ledger(common).map(|l| l.header().state_hash)
                    }
                })
                .collect();
            let pass = hashes.len() == 1 && !hashes.contains(&None);
            ("replicas_equal", pass, format!("{} nodes at ledger {common}, {} distinct hashes", attached.len(), hashes.len()))
        }
        AssertCheck::ValidatedAtLeast { seq } => {
            let voting: Vec<u64> = c.live_nodes().filter(|(_, n)| n.is_voting()).map(|(_, n)| n.tip().seq).collect();
            let pass = !voting.is_empty() && voting.iter().all(|s| s >= seq);
            ("validated_at_least", pass, format!("tips {voting:?}, want >= {seq}"))
        }
        AssertCheck::AuditReplay => {
            let mut bad = Vec::new();
            let mut checked = 0;
            for (id, n) in c.live_nodes() {
                let full = n.config().role.retain_last().is_none();
                checked += 1;
                match load_chain(&**n.disk(), !full) {
                    Ok(Some((_, report))) if report.state_hash == n.state_hash() && report.tip_seq == n.tip().seq => {}
                    Ok(_) => bad.push(format!("{id}: replay differs")),
                    Err(e) => bad.push(format!("{id}: {e}")),
                }
            }
            ("audit_replay", bad.is_empty() && checked > 0, if bad.is_empty() { format!("{checked} nodes") } else { bad.join("; ") })
        }
        AssertCheck::ExactlyOnce => {
            let chain: Vec<&crate::ledger::Ledger> = match c.promoted() {
                Some(p) => p.ledgers().collect(),
                None => c.reference_chain(),
            };
            let mut counts: BTreeMap<Hash32, usize> = BTreeMap::new();
            for l in &chain {
                for tx in l.txs() {
                    *counts.entry(tx.tx_id()).or_default() += 1;
                }
            }
            let mut total = 0;
            let mut bad = Vec::new();
            for s in c.clients() {
                for r in s.records() {
                    total += 1;
                    let seen = r.tx_id.map_or(0, |id| counts.get(&id).copied().unwrap_or(0));
                    let validated = matches!(r.status, HandleStatus::Validated { .. });
                    if seen != 1 || !validated {
                        bad.push(format!("handle {} seen {seen}x validated={validated}", r.handle.0));
                    }
                }
            }
            ("exactly_once", bad.is_empty(), if bad.is_empty() { format!("{total} handles") } else { bad.join("; ") })
        }
        AssertCheck::RpoZero => {
            let (Some(f), Some(p), Some(center)) = (failure, c.promoted(), c.center()) else {
                return ("rpo_zero", false, "no declared failure and promotion".into());
            };
            let first = c
                .clients()
                .flat_map(|s| s.records())
                .filter(|r| r.completed_via.as_ref().is_some_and(|v| v.0 == CENTER_ID))
                .filter(|r| matches!(r.status, HandleStatus::Validated { .. }))
                .filter_map(|r| r.completed_at)
                .min();
            let report = measure_recovery(&f.pre_failure, p, f.at, first);
            let mut worst = 0;
            let mut missing = 0;
            for seq in 1..=f.required_seq {
                let validated = c.nodes().filter_map(|(_, n)| n.validated_at(seq)).min();
                match (validated, center.applied_at(seq)) {
                    (Some(v), Some(a)) => worst = worst.max(a.saturating_sub(v)),
                    _ => missing += 1,
                }
            }
            let within = missing == 0 && worst <= center.rpo_window_ms();
            let pass = report.rpo_lost_tx == 0 && within;
            (
                "rpo_zero",
                pass,
                format!(
                    "lost {} of {}, rto_ms {:?}, max ship latency {worst} ms, {missing} ledgers unshipped",
                    report.rpo_lost_tx, report.pre_failure_tx, report.rto_ms
                ),
            )
        }
        AssertCheck::Voting { node } => match c.node(&NodeId::new(node.clone())) {
            Some(n) => ("voting", n.is_voting(), format!("{node} voting={}", n.is_voting())),
            None => ("voting", false, format!("unknown node {node}")),
        },
        AssertCheck::RowCount { node, table, count } => match c.node(&NodeId::new(node.clone())) {
            Some(n) => {
                let got = n.committed_store().table(table).map(|t| t.rows.len());
                ("row_count", got == Some(*count), format!("{node}.{table}: {got:?}, want {count}"))
            }
            None => ("row_count", false, format!("unknown node {node}")),
        },
    }
}

/// Runs `script` from time zero. Identical inputs give identical output.
pub fn run_scenario(script: &ScenarioScript, seed: u64) -> Result<ScenarioRun, ScenarioError> {
    let mut r = Runner {
        seed,
        cluster: None,
        lines: Vec::new(),
        kill_times: BTreeMap::new(),
        failure: None,
        assertions: 0,
        failed: 0,
    };
    if let Some(first) = script.actions.first() {
        if !matches!(first.action, ScenarioAction::Cluster(_)) {
            return Err(ScenarioError::NoCluster { index: 0 });
        }
    }
    r.run(script)?;
    r.summary();
    let trace_digest = r.cluster.as_ref().map(|c| c.net.trace_digest()).unwrap_or_default();
    Ok(ScenarioRun { lines: r.lines, assertions: r.assertions, failed: r.failed, trace_digest })
}
