//! UNL consensus: escalating-threshold proposal rounds followed by a
//! validation quorum on the resulting ledger header.

mod engine;
mod validation;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::codec::{Canonical, DecodeError, Reader};
use crate::ledger::{Hash32, PublicKey, Signer};

pub use engine::{ConsensusEngine, Phase, TickOutcome};
pub use validation::{RecordOutcome, ValidationTracker};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

impl Canonical for NodeId {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(NodeId(String::decode(r)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("UNL must not be empty")]
    EmptyUnl,
    #[error("duplicate UNL entry {0}")]
    DuplicateUnl(NodeId),
    #[error("round thresholds must be nonempty, nondecreasing and within (0, 1]")]
    BadThresholds,
    #[error("validation quorum must be within (0, 1] and at least the last threshold")]
    BadQuorum,
    #[error("round interval and max rounds must be positive")]
    BadTiming,
}

/// The peers a node trusts for voting. Self is never a member; it is
/// counted separately as one extra voter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unl {
    trusted: Vec<NodeId>,
}

impl Unl {
    /// Builds the UNL of `me` from a member list, dropping `me` if listed.
    /// Listing only `me` gives the single-node network.
    pub fn new(me: &NodeId, members: impl IntoIterator<Item = NodeId>) -> Result<Self, ConfigError> {
        let mut seen = BTreeSet::new();
        for m in members {
            if !seen.insert(m.clone()) {
                return Err(ConfigError::DuplicateUnl(m));
            }
        }
        if seen.is_empty() {
            return Err(ConfigError::EmptyUnl);
        }
        seen.remove(me);
        Ok(Unl { trusted: seen.into_iter().collect() })
    }

    pub fn peers(&self) -> &[NodeId] {
        &self.trusted
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.trusted.binary_search(id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.trusted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trusted.is_empty()
    }

    /// |UNL| + 1.
    pub fn voters(&self) -> usize {
        self.trusted.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub round_thresholds: Vec<f64>,
    pub validation_quorum: f64,
    pub round_interval_ms: u64,
    pub max_rounds: u32,
    /// Ticks to wait in the accepted phase for a validation quorum before
    /// abandoning the attempt.
    pub validation_timeout_rounds: u32,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            round_thresholds: vec![0.50, 0.65, 0.70, 0.80],
            validation_quorum: 0.80,
            round_interval_ms: 1000,
            max_rounds: 10,
            validation_timeout_rounds: 3,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.round_thresholds;
        if t.is_empty() || t.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || t.windows(2).any(|w| w[1] < w[0]) {
            return Err(ConfigError::BadThresholds);
        }
        let q = self.validation_quorum;
        if !(q > 0.0 && q <= 1.0) || q < *t.last().expect("nonempty") {
            return Err(ConfigError::BadQuorum);
        }
        if self.round_interval_ms == 0 || self.max_rounds == 0 || self.validation_timeout_rounds == 0 {
            return Err(ConfigError::BadTiming);
        }
        Ok(())
    }
}

/// Agreement threshold for `round`, clamped to the last configured entry.
pub fn threshold(cfg: &ConsensusConfig, round: u32) -> f64 {
    let t = &cfg.round_thresholds;
    t[(round as usize).min(t.len() - 1)]
}

/// `count / voters >= fraction`.
pub fn meets(count: usize, voters: usize, fraction: f64) -> bool {
    count as f64 / voters as f64 >= fraction
}

/// Smallest vote count that meets `quorum` out of `voters`.
pub fn quorum_count(voters: usize, quorum: f64) -> usize {
    (0..=voters).find(|k| meets(*k, voters, quorum)).unwrap_or(voters + 1)
}

/// Keeps every tx id whose support (peers proposing it, plus self if in
/// `own`) over `unl_size + 1` voters reaches the round threshold.
pub fn update_candidate(
    own: &BTreeSet<Hash32>,
    peer_proposals: &[&BTreeSet<Hash32>],
    unl_size: usize,
    round: u32,
    cfg: &ConsensusConfig,
) -> BTreeSet<Hash32> {
    let voters = unl_size + 1;
    let need = threshold(cfg, round);
    let mut support: BTreeMap<Hash32, usize> = own.iter().map(|id| (*id, 1)).collect();
    for p in peer_proposals {
        for id in p.iter() {
            *support.entry(*id).or_insert(0) += 1;
        }
    }
    support.into_iter().filter(|(_, n)| meets(*n, voters, need)).map(|(id, _)| id).collect()
}

/// True iff self plus the peers whose set equals `own` reach the
/// validation quorum over `unl_size + 1` voters.
pub fn check_consensus(
    own: &BTreeSet<Hash32>,
    peer_proposals: &[&BTreeSet<Hash32>],
    unl_size: usize,
    cfg: &ConsensusConfig,
) -> bool {
    let agreeing = 1 + peer_proposals.iter().filter(|p| **p == own).count();
    meets(agreeing, unl_size + 1, cfg.validation_quorum)
}

/// A node's position for one ledger in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub node_id: NodeId,
    pub round: u32,
    pub ledger_seq: u64,
    pub close_time: u64,
    pub tx_ids: BTreeSet<Hash32>,
    pub signature: Vec<u8>,
}

impl Proposal {
    pub fn signed(
        node_id: NodeId,
        round: u32,
        ledger_seq: u64,
        close_time: u64,
        tx_ids: BTreeSet<Hash32>,
        signer: &dyn Signer,
    ) -> Self {
        let mut p = Proposal { node_id, round, ledger_seq, close_time, tx_ids, signature: Vec::new() };
        p.signature = signer.sign(&p.signing_bytes());
        p
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = b"proposal".to_vec();
        self.node_id.encode(&mut out);
        self.round.encode(&mut out);
        self.ledger_seq.encode(&mut out);
        self.close_time.encode(&mut out);
        self.tx_ids.encode(&mut out);
        out
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&self.signing_bytes(), &self.signature)
    }
}

impl Canonical for Proposal {
    fn encode(&self, out: &mut Vec<u8>) {
        self.node_id.encode(out);
        self.round.encode(out);
        self.ledger_seq.encode(out);
        self.close_time.encode(out);
        self.tx_ids.encode(out);
        crate::ledger::codec::put_bytes(out, &self.signature);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Proposal {
            node_id: NodeId::decode(r)?,
            round: u32::decode(r)?,
            ledger_seq: u64::decode(r)?,
            close_time: u64::decode(r)?,
            tx_ids: BTreeSet::decode(r)?,
            signature: r.bytes()?,
        })
    }
}

/// A node's endorsement of one ledger header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validation {
    pub node_id: NodeId,
    pub ledger_seq: u64,
    pub close_time: u64,
    pub header_hash: Hash32,
    pub signature: Vec<u8>,
}

impl Validation {
    pub fn signed(node_id: NodeId, ledger_seq: u64, close_time: u64, header_hash: Hash32, signer: &dyn Signer) -> Self {
        let mut v = Validation { node_id, ledger_seq, close_time, header_hash, signature: Vec::new() };
        v.signature = signer.sign(&v.signing_bytes());
        v
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = b"validation".to_vec();
        self.node_id.encode(&mut out);
        self.ledger_seq.encode(&mut out);
        self.close_time.encode(&mut out);
        self.header_hash.encode(&mut out);
        out
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&self.signing_bytes(), &self.signature)
    }
}

impl Canonical for Validation {
    fn encode(&self, out: &mut Vec<u8>) {
        self.node_id.encode(out);
        self.ledger_seq.encode(out);
        self.close_time.encode(out);
        self.header_hash.encode(out);
        crate::ledger::codec::put_bytes(out, &self.signature);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Validation {
            node_id: NodeId::decode(r)?,
            ledger_seq: u64::decode(r)?,
            close_time: u64::decode(r)?,
            header_hash: Hash32::decode(r)?,
            signature: r.bytes()?,
        })
    }
}
