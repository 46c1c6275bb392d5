use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{ConfigError, ConsensusConfig, NodeId, Unl};
use crate::ledger::{seed_from_label, signer_from_seed, SchemeId, SharedSigner};

pub const DATA_DIR_ENV: &str = "CHAINLOG_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeRole {
    #[serde(rename = "full")]
    FullRecord,
    #[serde(rename = "partial")]
    PartialRecord { retain_last: u64 },
}

impl NodeRole {
    pub fn retain_last(self) -> Option<u64> {
        match self {
            NodeRole::FullRecord => None,
            NodeRole::PartialRecord { retain_last } => Some(retain_last),
        }
    }
}

#[derive(Debug, Error)]
pub enum NodeConfigError {
    #[error(transparent)]
    Consensus(#[from] ConfigError),
    #[error("partial-record nodes must retain at least 2 ledgers")]
    RetainTooSmall,
    #[error("read config {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("parse config {path}: {err}")]
    Parse { path: PathBuf, err: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub node_id: NodeId,
    /// UNL members; the node's own id may be listed and is ignored.
    pub unl: Vec<NodeId>,
    pub role: NodeRole,
    pub db_attached: bool,
    pub consensus: ConsensusConfig,
    pub data_dir: Option<PathBuf>,
    /// Reads fail with `NotSynced` when the applied ledger trails the
    /// known network tip by more than this many ledgers.
    pub read_gap_limit: u64,
    /// Write a checkpoint every N validated ledgers. Partial-record nodes
    /// default to `retain_last`.
    pub checkpoint_every: Option<u64>,
    /// Partial-record nodes prune right after each checkpoint.
    pub auto_prune: bool,
    /// Whether client submissions are accepted (backup nodes start off).
    pub serving: bool,
    pub key_scheme: SchemeId,
}

impl NodeConfig {
    pub fn new(node_id: impl Into<String>, unl: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            node_id: NodeId::new(node_id),
            unl: unl.into_iter().collect(),
            role: NodeRole::FullRecord,
            db_attached: true,
            consensus: ConsensusConfig::default(),
            data_dir: None,
            read_gap_limit: 1,
            checkpoint_every: None,
            auto_prune: true,
            serving: true,
            key_scheme: SchemeId::Ed25519,
        }
    }

    pub fn partial(mut self, retain_last: u64) -> Self {
        self.role = NodeRole::PartialRecord { retain_last };
        self
    }

    pub fn validate(&self) -> Result<Unl, NodeConfigError> {
        self.consensus.validate()?;
        if let NodeRole::PartialRecord { retain_last } = self.role {
            if retain_last < 2 {
                return Err(NodeConfigError::RetainTooSmall);
            }
        }
        Ok(Unl::new(&self.node_id, self.unl.iter().cloned())?)
    }

    pub fn effective_checkpoint_every(&self) -> Option<u64> {
        self.checkpoint_every.or(self.role.retain_last())
    }

    /// Node signing key, derived from the node id.
    pub fn signer(&self) -> SharedSigner {
        node_signer(&self.node_id, self.key_scheme)
    }

    pub fn from_file(path: &Path) -> Result<Self, NodeConfigError> {
        let text = std::fs::read_to_string(path).map_err(|err| NodeConfigError::Io { path: path.into(), err })?;
        let mut cfg = Self::from_json(&text).map_err(|err| NodeConfigError::Parse { path: path.into(), err })?;
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                cfg.data_dir = Some(PathBuf::from(dir));
            }
        }
        if let Some(dir) = &cfg.data_dir {
            if dir.is_relative() {
                if let Some(base) = path.parent() {
                    cfg.data_dir = Some(base.join(dir));
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let f: ConfigFile = serde_json::from_str(text)?;
        let mut cfg = NodeConfig::new(f.node_id, f.unl.into_iter().map(NodeId));
        cfg.role = match f.role {
            RoleFile::Full(s) if s == "full" => NodeRole::FullRecord,
            RoleFile::Full(s) => return Err(serde::de::Error::custom(format!("unknown role {s:?}"))),
            RoleFile::Partial { partial } => NodeRole::PartialRecord { retain_last: partial },
        };
        cfg.db_attached = f.db_attached;
        if let Some(c) = f.consensus {
            if let Some(v) = c.round_interval_ms {
                cfg.consensus.round_interval_ms = v;
            }
            if let Some(v) = c.quorum {
                cfg.consensus.validation_quorum = v;
            }
            if let Some(v) = c.thresholds {
                cfg.consensus.round_thresholds = v;
            }
        }
        cfg.data_dir = f.data_dir;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let role = match self.role {
            NodeRole::FullRecord => serde_json::json!("full"),
            NodeRole::PartialRecord { retain_last } => serde_json::json!({ "partial": retain_last }),
        };
        serde_json::json!({
            "node_id": self.node_id,
            "unl": self.unl,
            "role": role,
            "db_attached": self.db_attached,
            "consensus": {
                "round_interval_ms": self.consensus.round_interval_ms,
                "quorum": self.consensus.validation_quorum,
                "thresholds": self.consensus.round_thresholds,
            },
            "data_dir": self.data_dir,
        })
    }
}

pub fn node_signer(id: &NodeId, scheme: SchemeId) -> SharedSigner {
    signer_from_seed(scheme, seed_from_label(&format!("node:{id}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    node_id: String,
    unl: Vec<String>,
    role: RoleFile,
    db_attached: bool,
    #[serde(default)]
    consensus: Option<ConsensusFile>,
    #[serde(default)]
    data_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RoleFile {
    Full(String),
    Partial { partial: u64 },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConsensusFile {
    round_interval_ms: Option<u64>,
    quorum: Option<f64>,
    thresholds: Option<Vec<f64>>,
}
