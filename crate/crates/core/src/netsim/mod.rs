//! Deterministic discrete-event message fabric with a simulated clock.
//!
//! Every random choice (jitter, drops) comes from one seeded generator and
//! events are processed in `(deliver_at, enqueue order)` order, so a fixed
//! seed and script always replay the same trace.

mod script;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::consensus::NodeId;

pub use script::{AssertCheck, ClusterArgs, ScenarioAction, ScenarioScript, ScriptError, TimedAction};

/// One message to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub to: NodeId,
    pub payload: Vec<u8>,
}

impl Outbound {
    pub fn new(to: NodeId, payload: Vec<u8>) -> Self {
        Self { to, payload }
    }
}

/// An event-driven participant. All methods run on the simulator thread.
pub trait Actor {
    fn on_message(&mut self, now: u64, from: &NodeId, payload: &[u8]) -> Vec<Outbound>;
    fn on_timer(&mut self, now: u64) -> Vec<Outbound>;
    fn next_timer(&self) -> Option<u64>;
    fn on_kill(&mut self, _now: u64) {}
    fn on_revive(&mut self, _now: u64) -> Vec<Outbound> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: NodeId,
    pub to: NodeId,
    pub payload: Vec<u8>,
    pub send_time: u64,
    pub deliver_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub base_latency_ms: u64,
    pub jitter_max_ms: u64,
    pub drop_rate: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { base_latency_ms: 10, jitter_max_ms: 0, drop_rate: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} registered twice")]
    Duplicate(NodeId),
    #[error("partition groups overlap at {0}")]
    Overlap(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunResult {
    Satisfied(u64),
    TimedOut,
}

impl RunResult {
    pub fn is_satisfied(self) -> bool {
        matches!(self, RunResult::Satisfied(_))
    }
}

/// Decides the fate of an envelope about to be delivered: may rewrite the
/// payload, or return false to drop it.
pub type Interceptor = Box<dyn FnMut(&mut Envelope) -> bool>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

pub struct SimNetwork<A: Actor> {
    actors: BTreeMap<NodeId, A>,
    dead: BTreeSet<NodeId>,
    now: u64,
    queue: BTreeMap<(u64, u64), Envelope>,
    next_seq: u64,
    cfg: NetConfig,
    rng: ChaCha8Rng,
    groups: Option<BTreeMap<NodeId, usize>>,
    interceptor: Option<Interceptor>,
    trace: Vec<String>,
    trace_digest: Sha256,
    keep_trace: bool,
    stats: NetStats,
}

impl<A: Actor> SimNetwork<A> {
    pub fn new(cfg: NetConfig) -> Self {
        Self {
            actors: BTreeMap::new(),
            dead: BTreeSet::new(),
            now: 0,
            queue: BTreeMap::new(),
            next_seq: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            groups: None,
            interceptor: None,
            trace: Vec::new(),
            trace_digest: Sha256::new(),
            keep_trace: true,
            stats: NetStats::default(),
        }
    }

    pub fn register(&mut self, id: NodeId, actor: A) -> Result<(), NetError> {
        if self.actors.contains_key(&id) {
            return Err(NetError::Duplicate(id));
        }
        self.actors.insert(id, actor);
        Ok(())
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn set_drop_rate(&mut self, rate: f64) {
        self.cfg.drop_rate = rate;
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    /// Keep full trace lines in memory (the running digest is always kept).
    pub fn set_keep_trace(&mut self, keep: bool) {
        self.keep_trace = keep;
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    pub fn trace_digest(&self) -> String {
        hex::encode(self.trace_digest.clone().finalize())
    }

    pub fn set_interceptor(&mut self, f: Option<Interceptor>) {
        self.interceptor = f;
    }

    pub fn ids(&self) -> impl Iterator<Item = &NodeId> {
        self.actors.keys()
    }

    pub fn actor(&self, id: &NodeId) -> Option<&A> {
        self.actors.get(id)
    }

    pub fn actor_mut(&mut self, id: &NodeId) -> Option<&mut A> {
        self.actors.get_mut(id)
    }

    pub fn actors(&self) -> impl Iterator<Item = (&NodeId, &A)> {
        self.actors.iter()
    }

    pub fn is_alive(&self, id: &NodeId) -> bool {
        self.actors.contains_key(id) && !self.dead.contains(id)
    }

    pub fn pending_messages(&self) -> usize {
        self.queue.len()
    }

    fn record(&mut self, line: String) {
        self.trace_digest.update(line.as_bytes());
        self.trace_digest.update(b"\n");
        if self.keep_trace {
            self.trace.push(line);
        }
    }

    fn connected(&self, a: &NodeId, b: &NodeId) -> bool {
        match &self.groups {
            None => true,
            Some(g) => match (g.get(a), g.get(b)) {
                (Some(x), Some(y)) => x == y,
                _ => a == b,
            },
        }
    }

    /// Enqueues `payload` with seeded latency and loss. Cross-partition
    /// sends and sends from dead nodes vanish.
    pub fn send(&mut self, from: &NodeId, to: &NodeId, payload: Vec<u8>) -> Result<(), NetError> {
        for id in [from, to] {
            if !self.actors.contains_key(id) {
                return Err(NetError::UnknownNode(id.clone()));
            }
        }
        self.stats.sent += 1;
        // Draw both numbers unconditionally so the stream stays aligned
        // regardless of which branch is taken.
        let roll: f64 = self.rng.gen();
        let jitter = if self.cfg.jitter_max_ms > 0 { self.rng.gen_range(0..=self.cfg.jitter_max_ms) } else { 0 };
        let digest = short_digest(&payload);
        if self.dead.contains(from) || !self.connected(from, to) || roll < self.cfg.drop_rate {
            self.stats.dropped += 1;
            self.record(format!("{} drop {from}->{to} {digest}", self.now));
            return Ok(());
        }
        let deliver_at = self.now + self.cfg.base_latency_ms + jitter;
        let key = (deliver_at, self.next_seq);
        self.next_seq += 1;
        self.queue.insert(
            key,
            Envelope { from: from.clone(), to: to.clone(), payload, send_time: self.now, deliver_at },
        );
        Ok(())
    }

    fn send_all(&mut self, from: &NodeId, out: Vec<Outbound>) {
        for o in out {
            if let Err(e) = self.send(from, &o.to, o.payload) {
                self.record(format!("{} send-error {from} {e}", self.now));
            }
        }
    }

    /// Runs `f` against one actor at the current time and sends its output.
    pub fn invoke<R>(&mut self, id: &NodeId, f: impl FnOnce(&mut A, u64) -> (R, Vec<Outbound>)) -> Result<R, NetError> {
        let now = self.now;
        let actor = self.actors.get_mut(id).ok_or_else(|| NetError::UnknownNode(id.clone()))?;
        let (r, out) = f(actor, now);
        self.send_all(id, out);
        Ok(r)
    }

    fn next_timer_at(&self) -> Option<u64> {
        self.actors
            .iter()
            .filter(|(id, _)| !self.dead.contains(*id))
            .filter_map(|(_, a)| a.next_timer())
            .min()
    }

    fn next_event_at(&self) -> Option<u64> {
        let msg = self.queue.keys().next().map(|(t, _)| *t);
        match (msg, self.next_timer_at()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Advances to the next event time, delivers every message due then,
    /// and fires due timers. Returns the number of messages delivered.
    pub fn step(&mut self) -> usize {
        let Some(t) = self.next_event_at() else {
            return 0;
        };
        self.now = self.now.max(t);
        let mut delivered = 0;
        while let Some((&key, _)) = self.queue.first_key_value() {
            if key.0 > self.now {
                break;
            }
            let mut env = self.queue.remove(&key).expect("key just observed");
            if self.dead.contains(&env.to) || !self.connected(&env.from, &env.to) {
                self.stats.dropped += 1;
                self.record(format!("{} lost {}->{} {}", self.now, env.from, env.to, short_digest(&env.payload)));
                continue;
            }
            if let Some(f) = self.interceptor.as_mut() {
                if !f(&mut env) {
                    self.stats.dropped += 1;
                    self.record(format!("{} intercepted {}->{}", self.now, env.from, env.to));
                    continue;
                }
            }
            self.stats.delivered += 1;
            delivered += 1;
            self.record(format!("{} deliver {}->{} {}", self.now, env.from, env.to, short_digest(&env.payload)));
            let now = self.now;
            let out = match self.actors.get_mut(&env.to) {
                Some(a) => a.on_message(now, &env.from, &env.payload),
                None => Vec::new(),
            };
            self.send_all(&env.to, out);
        }
        let due: Vec<NodeId> = self
            .actors
            .iter()
            .filter(|(id, a)| !self.dead.contains(*id) && a.next_timer().is_some_and(|t| t <= self.now))
            .map(|(id, _)| id.clone())
            .collect();
        for id in due {
            let now = self.now;
            let out = self.actors.get_mut(&id).expect("listed above").on_timer(now);
            self.send_all(&id, out);
        }
        delivered
    }

    /// Steps until `pred` holds or the clock would pass `max_time`.
    pub fn run_until(&mut self, mut pred: impl FnMut(&Self) -> bool, max_time: u64) -> RunResult {
        loop {
            if pred(self) {
                return RunResult::Satisfied(self.now);
            }
            match self.next_event_at() {
                Some(t) if t <= max_time => {
                    self.step();
                }
                _ => {
                    self.now = self.now.max(max_time);
                    return if pred(self) { RunResult::Satisfied(self.now) } else { RunResult::TimedOut };
                }
            }
        }
    }

    /// Processes every event up to and including `t`, then sets the clock to `t`.
    pub fn run_to(&mut self, t: u64) {
        while let Some(next) = self.next_event_at() {
            if next > t {
                break;
            }
            self.step();
        }
        self.now = self.now.max(t);
    }

    /// Splits the network. Every listed node may only talk within its
    /// group; nodes not listed form singleton groups.
    pub fn partition(&mut self, groups: &[Vec<NodeId>]) -> Result<(), NetError> {
        let mut map = BTreeMap::new();
        for (i, g) in groups.iter().enumerate() {
            for id in g {
                if !self.actors.contains_key(id) {
                    return Err(NetError::UnknownNode(id.clone()));
                }
                if map.insert(id.clone(), i).is_some() {
                    return Err(NetError::Overlap(id.clone()));
                }
            }
        }
        let desc: Vec<String> = groups.iter().map(|g| g.iter().map(|n| n.0.as_str()).collect::<Vec<_>>().join(",")).collect();
        self.record(format!("{} partition {}", self.now, desc.join("|")));
        self.groups = Some(map);
        Ok(())
    }

    pub fn heal(&mut self) {
        self.record(format!("{} heal", self.now));
        self.groups = None;
    }

    pub fn kill(&mut self, id: &NodeId) -> Result<(), NetError> {
        let now = self.now;
        let actor = self.actors.get_mut(id).ok_or_else(|| NetError::UnknownNode(id.clone()))?;
        actor.on_kill(now);
        self.dead.insert(id.clone());
        self.record(format!("{now} kill {id}"));
        Ok(())
    }

    pub fn revive(&mut self, id: &NodeId) -> Result<(), NetError> {
        let now = self.now;
        let actor = self.actors.get_mut(id).ok_or_else(|| NetError::UnknownNode(id.clone()))?;
        self.dead.remove(id);
        let out = actor.on_revive(now);
        self.record(format!("{now} revive {id}"));
        self.send_all(id, out);
        Ok(())
    }
}

fn short_digest(payload: &[u8]) -> String {
    let d = Sha256::digest(payload);
    hex::encode(&d[..4])
}
