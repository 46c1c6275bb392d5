//! Scenario scripts: a JSON array of `{"t": sim_ms, "action": ..., "args": ...}`.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("action {index} ({action}): {message}")]
    BadAction { index: usize, action: String, message: String },
    #[error("action {index} at t={t} comes before the previous action's time")]
    Unsorted { index: usize, t: u64 },
}

fn default_nodes() -> u32 {
    5
}
fn default_latency() -> u64 {
    10
}
fn default_jitter() -> u64 {
    20
}
fn default_interval() -> u64 {
    1000
}
fn default_account() -> String {
    "alice".to_string()
}
fn default_client() -> String {
    "client".to_string()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterArgs {
    #[serde(default = "default_nodes")]
    pub nodes: u32,
    #[serde(default = "default_latency")]
    pub base_latency_ms: u64,
    #[serde(default = "default_jitter")]
    pub jitter_ms: u64,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default = "default_interval")]
    pub round_interval_ms: u64,
    /// Node id → retain_last for partial-record nodes.
    #[serde(default)]
    pub partial: BTreeMap<String, u64>,
    /// Nodes running without an attached database.
    #[serde(default)]
    pub detached: Vec<String>,
    /// Nodes that exist in the UNL but start powered off with empty storage.
    #[serde(default)]
    pub late: Vec<String>,
    /// Adds a backup node with this id plus a recovery center fed by it.
    #[serde(default)]
    pub backup: Option<String>,
    #[serde(default)]
    pub rpo_window_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum AssertCheck {
    /// Every live db-attached node at the common tip reports one state hash.
    ReplicasEqual,
    ValidatedAtLeast { seq: u64 },
    /// Rebuilding each node's database from its chain files reproduces its live state.
    AuditReplay,
    /// Every client-submitted tx appears exactly once in the validated chain.
    ExactlyOnce,
    RpoZero,
    Voting { node: String },
    RowCount { node: String, table: String, count: usize },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "action", content = "args", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioAction {
    Cluster(ClusterArgs),
    Submit {
        node: String,
        sql: String,
        #[serde(default = "default_account")]
        account: String,
    },
    ClientSubmit {
        #[serde(default = "default_client")]
        client: String,
        sql: String,
        #[serde(default = "default_account")]
        account: String,
    },
    Select {
        node: String,
        sql: String,
        #[serde(default = "default_account")]
        account: String,
    },
    Kill {
        node: String,
    },
    Revive {
        node: String,
    },
    Partition {
        groups: Vec<Vec<String>>,
    },
    Heal,
    DeclareFailure {
        nodes: Vec<String>,
    },
    Promote,
    ServerInfo {
        node: String,
    },
    Peers {
        node: String,
    },
    Assert(AssertCheck),
}

impl ScenarioAction {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioAction::Cluster(_) => "cluster",
            ScenarioAction::Submit { .. } => "submit",
            ScenarioAction::ClientSubmit { .. } => "client_submit",
            ScenarioAction::Select { .. } => "select",
            ScenarioAction::Kill { .. } => "kill",
            ScenarioAction::Revive { .. } => "revive",
            ScenarioAction::Partition { .. } => "partition",
            ScenarioAction::Heal => "heal",
            ScenarioAction::DeclareFailure { .. } => "declare_failure",
            ScenarioAction::Promote => "promote",
            ScenarioAction::ServerInfo { .. } => "server_info",
            ScenarioAction::Peers { .. } => "peers",
            ScenarioAction::Assert(_) => "assert",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedAction {
    pub t: u64,
    pub action: ScenarioAction,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioScript {
    pub actions: Vec<TimedAction>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAction {
    t: u64,
    action: String,
    #[serde(default)]
    args: Option<serde_json::Value>,
}

impl ScenarioScript {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let raw: Vec<RawAction> = serde_json::from_str(text)?;
        let mut actions = Vec::with_capacity(raw.len());
        let mut last_t = 0;
        for (index, r) in raw.into_iter().enumerate() {
            if r.t < last_t {
                return Err(ScriptError::Unsorted { index, t: r.t });
            }
            last_t = r.t;
            let mut obj = serde_json::Map::new();
            obj.insert("action".into(), serde_json::Value::String(r.action.clone()));
            if let Some(args) = r.args {
                if !(r.action == "heal" || r.action == "promote") || !args.is_null() {
                    obj.insert("args".into(), args);
                }
            } else if r.action == "cluster" {
                obj.insert("args".into(), serde_json::json!({}));
            }
            let action: ScenarioAction = serde_json::from_value(serde_json::Value::Object(obj))
                .map_err(|e| ScriptError::BadAction { index, action: r.action.clone(), message: e.to_string() })?;
            actions.push(TimedAction { t: r.t, action });
        }
        Ok(ScenarioScript { actions })
    }

    pub fn end_time(&self) -> u64 {
        self.actions.last().map_or(0, |a| a.t)
    }
}
