//! Command surface of `chainlog-node`: start a desk of nodes, inspect them,
//! submit and read SQL, run scenario scripts and verify chain files.
//!
//! A desk is one process hosting every node listed in a config file on the
//! simulated network, each backed by its own data directory. Output is one
//! JSON document per line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chainlog::consensus::NodeId;
use chainlog::ledger::store::{verify_stored_chain, DirStore, FileStore, MemStore, SharedStore, StoreError};
use chainlog::ledger::{load_key_file, sign_transaction, ChainError, Ed25519Signer, Signer, TxBody};
use chainlog::netsim::{NetConfig, NetError, ScenarioScript, SimNetwork};
use chainlog::node::{key_directory, Node, NodeConfig, NodeEvent, StartMode, SubmitError, TxStatus, DATA_DIR_ENV};
use chainlog::sim::{run_scenario, ScenarioError};
use chainlog::sql::{parse_operation, parse_sql, Statement};
use chainlog::sqlvm::ApplyResult;
use serde_json::{json, Value};
use thiserror::Error;

pub use chainlog::sql;

#[derive(Debug, Clone, PartialEq)]
pub enum CliCommand {
    Start { config: PathBuf, run_for_ms: Option<u64> },
    ServerInfo { config: PathBuf, endpoint: String },
    Peers { config: PathBuf, endpoint: String },
    Submit { config: PathBuf, endpoint: String, key: PathBuf, sql: String },
    /// Without a key the read runs as the table owner.
    Select { config: PathBuf, endpoint: String, key: Option<PathBuf>, sql: String },
    Scenario { script: PathBuf, seed: u64 },
    VerifyChain { data_dir: PathBuf },
    /// Writes a fresh Ed25519 secret as hex.
    Keygen { key: PathBuf },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Unreachable(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Unreachable(_) => 2,
            CliError::Failed(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Every node a config file describes plus the network they share.
#[derive(Debug, Clone)]
pub struct Desk {
    pub net: NetConfig,
    pub nodes: Vec<NodeConfig>,
    /// Sim ms that desk commands run the network for while waiting.
    pub wait_ms: u64,
}

impl Desk {
    /// Accepts either a single node config or `{"seed", "base_latency_ms",
    /// "jitter_ms", "nodes": [node config, ...]}`. Relative data dirs
    /// resolve against the config file; `CHAINLOG_DATA_DIR` replaces the
    /// data dir (single node) or the root holding `<node_id>/` dirs.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("read {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("parse {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let env_dir = std::env::var(DATA_DIR_ENV).ok().filter(|d| !d.is_empty()).map(PathBuf::from);
        let mut net = NetConfig { base_latency_ms: 10, jitter_max_ms: 20, drop_rate: 0.0, seed: 1 };
        let mut desk = Desk { net, nodes: Vec::new(), wait_ms: 30_000 };
        let single = v.get("nodes").is_none();
        let node_values: Vec<Value> = match v.get("nodes") {
            Some(Value::Array(items)) => {
                let num = |k: &str| v.get(k).and_then(Value::as_u64);
                net.seed = num("seed").unwrap_or(net.seed);
                net.base_latency_ms = num("base_latency_ms").unwrap_or(net.base_latency_ms);
                net.jitter_max_ms = num("jitter_ms").unwrap_or(net.jitter_max_ms);
                desk.wait_ms = num("wait_ms").unwrap_or(desk.wait_ms);
                desk.net = net;
                items.clone()
            }
            Some(_) => return Err(config_err("\"nodes\" must be a list of node configs")),
            None => vec![v.clone()],
        };
        for nv in node_values {
            let mut cfg = NodeConfig::from_json(&nv.to_string()).map_err(|e| config_err(format!("node config: {e}")))?;
            let dir = match (&env_dir, single) {
                (Some(d), true) => d.clone(),
                (Some(d), false) => d.join(&cfg.node_id.0),
                (None, _) => match cfg.data_dir.take() {
                    Some(d) if d.is_relative() => base.join(d),
                    Some(d) => d,
                    None => base.join("data").join(&cfg.node_id.0),
                },
            };
            cfg.data_dir = Some(dir);
            cfg.validate().map_err(config_err)?;
            desk.nodes.push(cfg);
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = desk.nodes.iter().find(|n| !seen.insert(n.node_id.clone())) {
            return Err(config_err(format!("node {} listed twice", dup.node_id)));
        }
        Ok(desk)
    }

    fn config(&self, endpoint: &str) -> Result<&NodeConfig, CliError> {
        self.nodes
            .iter()
            .find(|n| n.node_id.0 == endpoint)
            .ok_or_else(|| CliError::Unreachable(format!("endpoint {endpoint} is not part of this desk")))
    }
}

/// The desk's nodes running on one simulated network.
pub struct Host {
    pub net: SimNetwork<Node>,
    interval_ms: u64,
}

impl Host {
    /// `persist = false` runs on in-memory copies of the data dirs, so
    /// inspection commands leave the files untouched.
    pub fn start(desk: &Desk, persist: bool) -> Result<Self, CliError> {
        let mut ids: Vec<NodeId> = Vec::new();
        for n in &desk.nodes {
            for id in n.unl.iter().chain([&n.node_id]) {
                if !ids.contains(id) {
                    ids.push(id.clone());
                }
            }
        }
        let scheme = desk.nodes.first().map(|n| n.key_scheme).ok_or_else(|| config_err("no nodes configured"))?;
        let directory = key_directory(&ids, scheme);
        let mut disks: Vec<SharedStore> = Vec::new();
        let mut start_at = 0;
        for cfg in &desk.nodes {
            let dir = cfg.data_dir.clone().expect("desk resolves data dirs");
            let store = DirStore::open(&dir).map_err(|e| config_err(format!("data dir {}: {e}", dir.display())))?;
            if let Ok(chain) = verify_stored_chain(&store) {
                start_at = start_at.max(chain.tip().map_or(0, |l| l.header().close_time));
            }
            let disk: SharedStore = if persist {
                Arc::new(store)
            } else {
                Arc::new(MemStore::snapshot_of(&store).map_err(config_err)?)
            };
            disks.push(disk);
        }
        let mut net = SimNetwork::new(desk.net);
        net.run_to(start_at);
        for (cfg, disk) in desk.nodes.iter().zip(disks) {
            let node = Node::new(cfg.clone(), directory.clone(), disk, StartMode::Bootstrap, start_at).map_err(config_err)?;
            net.register(cfg.node_id.clone(), node).map_err(config_err)?;
        }
        let interval_ms = desk.nodes[0].consensus.round_interval_ms;
        Ok(Host { net, interval_ms })
    }

    pub fn node(&self, id: &str) -> Result<&Node, CliError> {
        self.net
            .actor(&NodeId::new(id))
            .ok_or_else(|| CliError::Unreachable(format!("endpoint {id} is not running")))
    }

    /// Lets nodes exchange status so peer tables are filled in.
    pub fn warm_up(&mut self) {
        let t = self.net.now() + 3 * self.interval_ms;
        self.net.run_to(t);
    }
}

fn emit(out: &mut dyn Write, v: &Value) -> Result<(), CliError> {
    writeln!(out, "{v}").map_err(|e| CliError::Failed(format!("write output: {e}")))
}

fn server_info(config: &Path, endpoint: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let desk = Desk::load(config)?;
    desk.config(endpoint)?;
    let mut host = Host::start(&desk, false)?;
    host.warm_up();
    let now = host.net.now();
    let info = host.node(endpoint)?.server_info(now);
    emit(out, &json!(info))
}

fn peers(config: &Path, endpoint: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let desk = Desk::load(config)?;
    desk.config(endpoint)?;
    let mut host = Host::start(&desk, false)?;
    host.warm_up();
    let now = host.net.now();
    let peers = host.node(endpoint)?.peers(now);
    emit(out, &json!(peers))
}

fn submit(config: &Path, endpoint: &str, key: &Path, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let op = parse_operation(text).map_err(|e| config_err(format!("sql: {e}")))?;
    let signer: Ed25519Signer = load_key_file(key).map_err(|e| config_err(format!("key: {e}")))?;
    let desk = Desk::load(config)?;
    desk.config(endpoint)?;
    let mut host = Host::start(&desk, true)?;
    let id = NodeId::new(endpoint);
    let account = signer.account_id();
    let seq = host.node(endpoint)?.committed_store().account_seq(&account) + 1;
    let tx = sign_transaction(TxBody::new(account, seq, op), &signer).map_err(config_err)?;
    let submitted = host
        .net
        .invoke(&id, |n, _| {
            let r = n.submit_tx(tx, true);
            (r, n.take_outbox())
        })
        .map_err(|e| CliError::Unreachable(e.to_string()))?;
    let tx_id = match submitted {
        Ok(tx_id) => tx_id,
        Err(SubmitError::NotServing) => return Err(CliError::Unreachable(format!("{endpoint} is not serving clients"))),
        Err(e) => return Err(config_err(format!("rejected by {endpoint}: {e}"))),
    };
    emit(out, &json!({"tx_id": tx_id, "account": account, "seq": seq, "status": "pending"}))?;
    let deadline = host.net.now() + desk.wait_ms;
    let done = host.net.run_until(|net| net.actor(&id).is_some_and(|n| n.tx_status(&tx_id) != TxStatus::Pending), deadline);
    let status = host.node(endpoint)?.tx_status(&tx_id);
    let TxStatus::Validated { ledger_seq, result } = status else {
        let why = if done.is_satisfied() { "dropped from the open pool" } else { "not validated before timeout" };
        emit(out, &json!({"tx_id": tx_id, "status": "timeout"}))?;
        return Err(CliError::Unreachable(format!("tx {tx_id}: {why}; is a quorum of the UNL running?")));
    };
    let deadline = host.net.now() + desk.wait_ms;
    host.net.run_until(|net| net.actors().all(|(_, n)| n.tip().seq >= ledger_seq), deadline);
    emit(out, &json!({"tx_id": tx_id, "status": "validated", "ledger_seq": ledger_seq, "result": result}))?;
    match result {
        ApplyResult::Applied => Ok(()),
        ApplyResult::Rejected(r) => Err(config_err(format!("tx {tx_id} rejected: {r:?}"))),
    }
}

fn select(config: &Path, endpoint: &str, key: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    let Statement::Select { table, filter } = parse_sql(text).map_err(|e| config_err(format!("sql: {e}")))? else {
        return Err(config_err("select expects a SELECT statement"));
    };
    let desk = Desk::load(config)?;
    desk.config(endpoint)?;
    let host = Host::start(&desk, false)?;
    let node = host.node(endpoint)?;
    let account = match key {
        Some(k) => load_key_file(k).map_err(|e| config_err(format!("key: {e}")))?.account_id(),
        None => match node.committed_store().table(&table) {
            Some(t) => t.schema.owner,
            None => return Err(config_err(format!("no table {table}"))),
        },
    };
    let rows = node.read_query(&table, &filter, account).map_err(|e| config_err(format!("read: {e}")))?;
    for r in rows {
        emit(out, &json!(r))?;
    }
    Ok(())
}

fn scenario(script: &Path, seed: u64, out: &mut dyn Write) -> Result<(), CliError> {
    let text = std::fs::read_to_string(script).map_err(|e| config_err(format!("read {}: {e}", script.display())))?;
    let script = ScenarioScript::parse(&text).map_err(|e| config_err(format!("script: {e}")))?;
    let run = run_scenario(&script, seed).map_err(|e| match e {
        ScenarioError::Net { err: NetError::UnknownNode(_), .. } => CliError::Unreachable(e.to_string()),
        other => config_err(other),
    })?;
    for line in &run.lines {
        writeln!(out, "{line}").map_err(|e| CliError::Failed(e.to_string()))?;
    }
    if run.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} of {} assertions failed", run.failed, run.assertions)))
    }
}

fn verify_chain(data_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    if !data_dir.is_dir() {
        return Err(config_err(format!("no data dir {}", data_dir.display())));
    }
    let store = DirStore::open(data_dir).map_err(config_err)?;
    if store.list().map_err(config_err)?.is_empty() {
        return Err(config_err(format!("{} holds no chain files", data_dir.display())));
    }
    match verify_stored_chain(&store) {
        Ok(chain) => {
            let tip = chain.tip().map(|l| *l.header());
            emit(out, &json!({"status": "ok", "tip_seq": tip.map(|h| h.seq), "tip_hash": tip.map(|h| h.hash()),
                              "ledgers": chain.ledgers.len(), "pruned": chain.is_pruned()}))
        }
        Err(e) => {
            let detail = match &e {
                StoreError::Chain(ChainError::BrokenAt { index, reason }) => json!({"index": index, "reason": reason}),
                StoreError::Decode { seq, .. } => json!({"seq": seq, "reason": "malformed"}),
                StoreError::Missing(seq) => json!({"seq": seq, "reason": "missing"}),
                _ => json!({}),
            };
            emit(out, &json!({"status": "broken_at", "detail": detail, "error": e.to_string()}))?;
            Err(CliError::Failed(e.to_string()))
        }
    }
}

fn start(config: &Path, run_for_ms: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    let desk = Desk::load(config)?;
    let mut host = Host::start(&desk, true)?;
    let t0 = host.net.now();
    for n in &desk.nodes {
        emit(out, &json!({"event": "started", "info": host.node(&n.node_id.0)?.server_info(t0)}))?;
    }
    let wall = Instant::now();
    loop {
        let elapsed = wall.elapsed().as_millis() as u64;
        let done = run_for_ms.is_some_and(|d| elapsed >= d);
        let target = t0 + run_for_ms.map_or(elapsed, |d| elapsed.min(d));
        host.net.run_to(target);
        let ids: Vec<NodeId> = host.net.ids().cloned().collect();
        for id in ids {
            let events: Vec<NodeEvent> = host.net.actor_mut(&id).map(|n| n.drain_events()).unwrap_or_default();
            for e in events {
                emit(out, &json!({"node": id, "event": e}))?;
            }
        }
        out.flush().map_err(|e| CliError::Failed(e.to_string()))?;
        if done {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let now = host.net.now();
    for n in &desk.nodes {
        emit(out, &json!({"event": "stopped", "info": host.node(&n.node_id.0)?.server_info(now)}))?;
    }
    Ok(())
}

fn keygen(key: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    if key.exists() {
        return Err(config_err(format!("{} already exists", key.display())));
    }
    let signer = Ed25519Signer::from_seed(rand::random());
    std::fs::write(key, hex::encode(signer.secret_bytes())).map_err(config_err)?;
    emit(out, &json!({"key": key, "account": signer.account_id()}))
}

pub fn run_command(cmd: &CliCommand, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        CliCommand::Start { config, run_for_ms } => start(config, *run_for_ms, out),
        CliCommand::ServerInfo { config, endpoint } => server_info(config, endpoint, out),
        CliCommand::Peers { config, endpoint } => peers(config, endpoint, out),
        CliCommand::Submit { config, endpoint, key, sql } => submit(config, endpoint, key, sql, out),
        CliCommand::Select { config, endpoint, key, sql } => select(config, endpoint, key.as_deref(), sql, out),
        CliCommand::Scenario { script, seed } => scenario(script, *seed, out),
        CliCommand::VerifyChain { data_dir } => verify_chain(data_dir, out),
        CliCommand::Keygen { key } => keygen(key, out),
    }
}

/// Runs `cmd`, reports any error as a JSON line on `err` and returns the
/// process exit code.
pub fn execute(cmd: &CliCommand, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match run_command(cmd, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", json!({"error": e.to_string(), "exit_code": e.exit_code()}));
            e.exit_code()
        }
    }
}
