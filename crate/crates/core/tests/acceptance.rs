//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::time::{Duration, Instant};

use chainlog::consensus::NodeId;
use chainlog::ledger::store::{ledger_file_name, verify_stored_chain, FileStore, MemStore};
use chainlog::ledger::{Hash32, Ledger, Literal, SchemeId, SharedSigner, SqlOperation};
use chainlog::middleware::{
    ingest_binlog, measure_recovery, parse_binlog, reference_execute, HandleStatus, PromoteError, PromoteRequest,
    RetryPolicy,
};
use chainlog::netsim::{Envelope, ScenarioScript};
use chainlog::node::{load_chain, Message, NodeEvent, TxStatus};
use chainlog::sim::{account_signer, run_scenario, tamper_ledger_data, Cluster, ClusterSpec};
use chainlog::sqlvm::ApplyResult;
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn signers(names: &[&str]) -> Vec<SharedSigner> {
    names.iter().map(|n| account_signer(n, SchemeId::InsecureTest)).collect()
}

fn tx_counts(chain: &[&Ledger]) -> BTreeMap<Hash32, usize> {
    let mut m = BTreeMap::new();
    for tx in chain.iter().flat_map(|l| l.txs()) {
        *m.entry(tx.tx_id()).or_default() += 1;
    }
    m
}

// ---- 1 ----

fn tamper_evidence() -> Outcome {
    let mut c = Cluster::build(ClusterSpec::new(1, 1)).map_err(|e| e.to_string())?;
    let s = signers(&["owner"]);
    let n1 = id("n1");
    c.submit(&n1, &s[0], kv_table("audit")).unwrap();
    for ledger in 1..=4u64 {
        for j in 0..5 {
            c.submit(&n1, &s[0], insert("audit", &format!("e{ledger}-{j}"), j)).unwrap();
        }
        ensure(c.run_until_tip(ledger, 60_000).is_satisfied(), || format!("ledger {ledger} never validated"))?;
    }
    ensure(c.run_until_tip(5, 60_000).is_satisfied(), || "ledger 5 never validated".into())?;
    let base = MemStore::snapshot_of(&**c.disk(&n1).unwrap()).unwrap();
    let chain = verify_stored_chain(&base).map_err(|e| e.to_string())?;
    ensure(chain.tip().map(|l| l.seq()) == Some(5), || "snapshot is not at seq 5".into())?;
    let txs: usize = chain.ledgers.iter().map(|l| l.txs().len()).sum();
    let files: Vec<String> = (0..=5).map(ledger_file_name).collect();

    let positions: Vec<(String, usize)> = files
        .iter()
        .flat_map(|name| (0..FileStore::read(&base, name).unwrap().unwrap().len()).map(move |p| (name.clone(), p)))
        .collect();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    let start = Instant::now();
    let results: Vec<(usize, Vec<String>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = positions
            .chunks(positions.len().div_ceil(workers))
            .map(|chunk| {
                let store = MemStore::snapshot_of(&base).unwrap();
                scope.spawn(move || {
                    let mut checked = 0;
                    let mut missed = Vec::new();
                    for (name, pos) in chunk {
                        for mask in 1..=255u8 {
                            store.mutate(name, |b| b[*pos] ^= mask);
                            if verify_stored_chain(&store).is_ok() {
                                missed.push(format!("{name}[{pos}]^{mask:#04x}"));
                            }
                            store.mutate(name, |b| b[*pos] ^= mask);
                            checked += 1;
                        }
                    }
                    (checked, missed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let elapsed = start.elapsed();
    let checked: usize = results.iter().map(|r| r.0).sum();
    let missed: Vec<&String> = results.iter().flat_map(|r| &r.1).collect();
    ensure(missed.is_empty(), || format!("{} undetected mutations, first {:?}", missed.len(), missed.first()))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{checked} mutations over {txs} txs in 5 blocks + genesis all rejected in {:.1}s", elapsed.as_secs_f64()))
}

// ---- 2 ----

fn replica_equality() -> Outcome {
    let mut seeds_ok = 0;
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let s = signers(&["a0", "a1", "a2"]);
        let mut c = Cluster::build(ClusterSpec::new(5, seed)).unwrap();
        let ops = workload(&mut r, s.len(), 50);
        submit_spread(&mut c, &mut r, &s, ops, 100, 12_000);
        ensure(run_to_quiet(&mut c, 60_000), || format!("seed {seed}: never quiesced"))?;
        let chain = c.reference_chain();
        let counts = tx_counts(&chain);
        ensure(counts.len() == 50 && counts.values().all(|&n| n == 1), || {
            format!("seed {seed}: {} distinct txs in chain", counts.len())
        })?;
        let reference = replay(&chain);
        let hashes: BTreeSet<Hash32> = c.live_nodes().map(|(_, n)| n.state_hash()).collect();
        ensure(hashes.len() == 1, || format!("seed {seed}: {} distinct state hashes", hashes.len()))?;
        ensure(hashes.contains(&reference.state_hash()), || format!("seed {seed}: replay hash differs"))?;
        let n1 = c.node(&id("n1")).unwrap();
        for tx in counts.keys() {
            ensure(
                matches!(n1.tx_status(tx), TxStatus::Validated { result: ApplyResult::Applied, .. }),
                || format!("seed {seed}: tx {} not applied", tx.short()),
            )?;
        }
        ensure(store_rows(n1.committed_store()) == model_of_chain(&chain).sorted(), || {
            format!("seed {seed}: rows differ from model")
        })?;
        seeds_ok += 1;
    }
    Ok(format!("{seeds_ok}/100 workloads: one state hash per run, equal to reference replay and row model"))
}

// ---- 3 ----

/// Per ledger seq: the worst own-round count among nodes that built it,
/// and per node the time between holding consecutive ledgers. Ledgers a
/// node adopted by sync after disagreeing with the quorum count towards
/// the time bound only.
fn round_stats(c: &Cluster, round_limit: u32, gap_limit: u64) -> Result<(u32, u64, usize, usize), String> {
    let mut max_rounds = 0;
    let mut max_gap = 0;
    let mut built: BTreeMap<u64, usize> = BTreeMap::new();
    let mut adopted = 0;
    let quorum = (c.spec().nodes * 4).div_ceil(5);
    for (nid, n) in c.live_nodes() {
        let mut prev = (0u64, 0u64);
        for e in n.events() {
            let (seq, time) = match e {
                NodeEvent::Validated { seq, time, rounds, .. } => {
                    let r = rounds.ok_or_else(|| format!("{nid}: ledger {seq} validated without own rounds"))?;
                    ensure(r <= round_limit, || format!("{nid}: ledger {seq} took {r} rounds"))?;
                    max_rounds = max_rounds.max(r);
                    *built.entry(*seq).or_default() += 1;
                    (*seq, *time)
                }
                NodeEvent::Synced { tip_seq, time, .. } if *tip_seq > prev.0 => {
                    adopted += (*tip_seq - prev.0) as usize;
                    (*tip_seq, *time)
                }
                _ => continue,
            };
            let gap = time - prev.1;
            ensure(gap <= gap_limit * (seq - prev.0), || format!("{nid}: ledger {seq} took {gap} ms"))?;
            max_gap = max_gap.max(gap);
            prev = (seq, time);
        }
    }
    if let Some((seq, n)) = built.iter().find(|(_, n)| **n < quorum) {
        return Err(format!("ledger {seq} built by only {n} nodes"));
    }
    Ok((max_rounds, max_gap, built.len(), adopted))
}

fn consensus_convergence() -> Outcome {
    let mut out = Vec::new();
    for (silent, limit) in [(false, 3u32), (true, 5u32)] {
        let (mut rounds, mut gap, mut ledgers, mut adopted) = (0, 0, 0, 0);
        for seed in 0..100u64 {
            let mut r = rng(1000 + seed);
            let s = signers(&["a0", "a1"]);
            let mut c = Cluster::build(ClusterSpec::new(5, seed)).unwrap();
            let interval = c.spec().consensus.round_interval_ms;
            if silent {
                c.net.kill(&id("n5")).unwrap();
            }
            let ops = workload(&mut r, s.len(), 12);
            submit_spread(&mut c, &mut r, &s, ops, 100, 8_000);
            c.run_to(16_000);
            let (mr, mg, l, a) = round_stats(&c, limit, 4 * interval).map_err(|e| format!("seed {seed}: {e}"))?;
            ensure(l >= 6, || format!("seed {seed}: only {l} ledgers"))?;
            adopted += a;
            rounds = rounds.max(mr);
            gap = gap.max(mg);
            ledgers += l;
        }
        out.push(format!(
            "{}: max {rounds} rounds (limit {limit}), max {gap} ms per ledger over {ledgers} ledgers, {adopted} adopted by sync",
            if silent { "1 silent" } else { "all honest" }
        ));
    }
    Ok(out.join("; "))
}

// ---- 4 ----

fn rollback_correctness() -> Outcome {
    let mut details = Vec::new();
    for seed in 0..10u64 {
        let s = signers(&["a0", "a1"]);
        let mut c = Cluster::build(ClusterSpec::new(5, seed)).unwrap();
        c.submit(&id("n1"), &s[0], kv_table("t0")).unwrap();
        c.submit(&id("n3"), &s[1], kv_table("t1")).unwrap();
        ensure(run_to_quiet(&mut c, 30_000), || format!("seed {seed}: setup never quiesced"))?;
        let pre: BTreeMap<NodeId, (Hash32, u64, chainlog::node::OverlayStats)> =
            c.nodes().map(|(i, n)| (i.clone(), (n.state_hash(), n.tip().seq, n.overlay_stats()))).collect();
        let h0 = pre.values().next().unwrap().0;
        ensure(pre.values().all(|p| p.0 == h0), || format!("seed {seed}: replicas differ before partition"))?;

        let minority = vec![id("n1"), id("n2")];
        let majority = vec![id("n3"), id("n4"), id("n5")];
        c.net.partition(&[minority, majority]).unwrap();
        let t = c.now();
        for i in 0..6 {
            c.run_to(t + 300 * i);
            c.submit(&id("n1"), &s[0], insert("t0", &format!("m{i}"), i as i64)).unwrap();
            c.submit(&id("n4"), &s[1], insert("t1", &format!("M{i}"), i as i64)).unwrap();
        }
        c.run_to(t + 20_000);
        let mut rolled = 0;
        for (nid, n) in c.nodes() {
            let (hash, tip, before) = pre[nid];
            let now = n.overlay_stats();
            let applied = now.applied_ops - before.applied_ops;
            let back = now.rolled_back_ops - before.rolled_back_ops;
            ensure(n.tip().seq == tip, || format!("seed {seed}: {nid} validated past the partition"))?;
            ensure(n.state_hash() == hash, || format!("seed {seed}: {nid} committed state changed"))?;
            ensure(now.committed_ops == before.committed_ops, || format!("seed {seed}: {nid} committed ops"))?;
            ensure(applied == back + n.overlay_ops() as u64, || {
                format!("seed {seed}: {nid} applied {applied}, rolled back {back}, live {}", n.overlay_ops())
            })?;
            ensure(n.has_overlay() || n.working_state_hash() == hash, || format!("seed {seed}: {nid} residue"))?;
            ensure(applied > 0 && now.rollbacks > before.rollbacks, || format!("seed {seed}: {nid} never rolled back"))?;
            rolled += back;
        }
        c.net.heal();
        ensure(run_to_quiet(&mut c, 60_000), || format!("seed {seed}: no convergence after heal"))?;
        let hashes: BTreeSet<Hash32> = c.nodes().map(|(_, n)| n.state_hash()).collect();
        ensure(hashes.len() == 1, || format!("seed {seed}: replicas differ after heal"))?;
        let rows = store_rows(c.node(&id("n5")).unwrap().committed_store());
        ensure(rows["t0"].len() == 6 && rows["t1"].len() == 6, || format!("seed {seed}: rows after heal {rows:?}"))?;
        details.push(rolled);
    }
    Ok(format!(
        "10 partitions: committed hash unchanged on every node, {} pending ops rolled back in total, all 12 txs land after heal",
        details.iter().sum::<u64>()
    ))
}

// ---- 5 ----

fn join_spec(partial: bool) -> ClusterSpec {
    let mut spec = ClusterSpec::new(5, 55);
    spec.late.insert("n5".into());
    if partial {
        for n in 1..=4 {
            spec.partial.insert(format!("n{n}"), 3);
        }
    }
    spec
}

/// Grows the chain to tip 10 without n5, then starts n5. Returns the
/// cluster and the time n5 first sent a proposal or validation.
fn join_at_ten(partial: bool, tamper: bool) -> Result<(Cluster, Rc<RefCell<Option<u64>>>, u64), String> {
    let mut c = Cluster::build(join_spec(partial)).unwrap();
    let s = signers(&["a0", "a1"]);
    let mut r = rng(5);
    let ops = workload(&mut r, 2, 20);
    submit_spread(&mut c, &mut r, &s, ops, 100, 12_000);
    ensure(c.run_until_tip(10, 60_000).is_satisfied(), || "tip 10 never reached".into())?;
    let first_vote = Rc::new(RefCell::new(None));
    let seen = first_vote.clone();
    let mut tamperer = tamper.then(|| tamper_ledger_data(id("n5")));
    c.net.set_interceptor(Some(Box::new(move |env: &mut Envelope| {
        if env.from.0 == "n5" && seen.borrow().is_none() {
            if let Ok(Message::Proposal(_) | Message::Validation(_)) = Message::from_frame(&env.payload) {
                *seen.borrow_mut() = Some(env.send_time);
            }
        }
        match tamperer.as_mut() {
            Some(f) => f(env),
            None => true,
        }
    })));
    let joined_at = c.now();
    c.net.revive(&id("n5")).unwrap();
    Ok((c, first_vote, joined_at))
}

fn new_node_join() -> Outcome {
    let mut hashes = Vec::new();
    let mut lines = Vec::new();
    for partial in [false, true] {
        let (mut c, first_vote, joined_at) = join_at_ten(partial, false)?;
        let kind = if partial { "partial" } else { "full" };
        let n5 = id("n5");
        let ok = c.run_until(|net| net.actor(&n5).and_then(|a| a.as_node()).is_some_and(|n| n.is_voting()), joined_at + 30_000);
        ensure(ok.is_satisfied(), || format!("{kind}: n5 never voted"))?;
        c.run_to(c.now() + 6_000);
        let node = c.node(&n5).unwrap();
        let (enabled_seq, enabled_at) = node
            .events()
            .iter()
            .find_map(|e| match e {
                NodeEvent::VotingEnabled { seq, time } => Some((*seq, *time)),
                _ => None,
            })
            .unwrap();
        let via = node.events().iter().find_map(|e| match e {
            NodeEvent::Synced { via_checkpoint, .. } => Some(*via_checkpoint),
            _ => None,
        });
        let voted = first_vote.borrow().ok_or_else(|| format!("{kind}: n5 voting but silent"))?;
        ensure(voted >= enabled_at, || format!("{kind}: vote at {voted} before enable at {enabled_at}"))?;
        ensure(enabled_seq >= 10, || format!("{kind}: enabled at seq {enabled_seq}"))?;
        ensure(partial == via.flatten().is_some(), || format!("{kind}: checkpoint use {via:?}"))?;
        if partial {
            ensure(c.node(&id("n1")).unwrap().ledger(1).is_none(), || "peers never pruned".into())?;
        }
        let peer = c.node(&id("n1")).unwrap();
        let peer_hash = peer.events().iter().find_map(|e| match e {
            NodeEvent::Validated { seq, hash, .. } if *seq == enabled_seq => Some(*hash),
            _ => None,
        });
        let own_hash = node.ledger(enabled_seq).map(|l| l.hash());
        ensure(own_hash.is_some() && own_hash == peer_hash, || format!("{kind}: ledger {enabled_seq} differs from n1"))?;
        ensure(node.state_hash() == peer.state_hash() && node.tip().seq == peer.tip().seq, || format!("{kind}: final state differs"))?;
        hashes.push(peer.events().iter().find_map(|e| match e {
            NodeEvent::Validated { seq: 10, hash, .. } => Some(*hash),
            _ => None,
        }));
        lines.push(format!("{kind}: voting at seq {enabled_seq}, first vote {} ms after enable", voted - enabled_at));
    }
    ensure(hashes[0].is_some() && hashes[0] == hashes[1], || "full and partial runs disagree on ledger 10".into())?;
    let (mut c, first_vote, joined_at) = join_at_ten(false, true)?;
    c.run_to(joined_at + 30_000);
    let n5 = c.node(&id("n5")).unwrap();
    let failures = n5.events().iter().filter(|e| matches!(e, NodeEvent::SyncFailed { reason: Some(_), .. })).count();
    ensure(!n5.is_voting() && first_vote.borrow().is_none(), || "tampered: n5 voted".into())?;
    ensure(failures > 0, || "tampered: no BrokenAt sync failure".into())?;
    ensure(n5.tip().seq == 0, || format!("tampered: n5 applied up to {}", n5.tip().seq))?;
    lines.push(format!("tampered: {failures} aborted syncs, never voted"));
    Ok(lines.join("; "))
}

// ---- 6 ----

fn failover_exactly_once() -> Outcome {
    let mut failovers = 0;
    let mut handles = 0;
    for seed in 0..50u64 {
        let mut r = rng(6000 + seed);
        let mut c = Cluster::build(ClusterSpec::new(5, seed)).unwrap();
        let eps = c.production_ids();
        let signer = account_signer("app", SchemeId::InsecureTest);
        let app = c.add_client("app", eps, signer, RetryPolicy::default()).unwrap();
        let t0 = 1_000 + r.gen_range(0..2_000);
        c.run_to(t0);
        let mut hs = vec![c.client_submit(&app, kv_table("orders")).unwrap()];
        hs.push(c.client_submit(&app, insert("orders", "first", 1)).unwrap());
        let kill_at = t0 + r.gen_range(0..3_000);
        c.run_to(kill_at);
        c.net.kill(&id("n1")).unwrap();
        hs.push(c.client_submit(&app, insert("orders", "after", 2)).unwrap());
        ensure(c.run_until_clients_idle(kill_at + 60_000).is_satisfied(), || format!("seed {seed}: client stuck"))?;
        let chain = c.reference_chain();
        let counts = tx_counts(&chain);
        let session = c.client(&app).unwrap();
        for h in &hs {
            let rec = session.record(*h).unwrap();
            ensure(matches!(rec.status, HandleStatus::Validated { result: ApplyResult::Applied, .. }), || {
                format!("seed {seed}: handle {} ended {:?}", h.0, rec.status)
            })?;
            let tx = rec.tx_id.unwrap();
            ensure(counts.get(&tx) == Some(&1), || format!("seed {seed}: tx {} appears {:?} times", tx.short(), counts.get(&tx)))?;
        }
        failovers += session.failovers();
        handles += hs.len();
    }
    Ok(format!("50 kill-during-submit runs: {handles} handles validated, each tx once in chain, {failovers} failovers"))
}

// ---- 7 ----

fn dr_drill(seed: u64) -> Result<String, String> {
    let started = Instant::now();
    let mut r = rng(7000 + seed);
    let mut spec = ClusterSpec::new(4, seed);
    spec.backup = Some("b".into());
    let mut c = Cluster::build(spec).unwrap();
    let production = c.production_ids();
    let signer = account_signer("app", SchemeId::InsecureTest);
    let account = signer.account_id();
    let app = c.add_client("app", production.clone(), signer, RetryPolicy::default()).unwrap();
    let kill_seq = r.gen_range(3..=8u64);
    let mut ops = vec![kv_table("orders")];
    let mut i = 0;
    let mut t = 500;
    loop {
        c.run_to(t);
        if production.iter().map(|p| c.node(p).unwrap().tip().seq).max().unwrap() >= kill_seq {
            break;
        }
        if i < ops.len() || i < 40 {
            if i >= ops.len() {
                ops.push(if i % 4 == 3 { update("orders", &format!("o{}", i - 1), i as i64) } else { insert("orders", &format!("o{i}"), i as i64) });
            }
            c.client_submit(&app, ops[i].clone()).unwrap();
            i += 1;
        }
        t += r.gen_range(1_200..2_400);
        ensure(t < 120_000, || format!("seed {seed}: never reached seq {kill_seq}"))?;
    }
    for p in &production {
        c.net.kill(p).unwrap();
    }
    let failed_at = c.now();
    let required_seq = production.iter().map(|p| c.node(p).unwrap().tip().seq).max().unwrap();
    let mut pre: BTreeSet<Hash32> = BTreeSet::new();
    for p in &production {
        pre.extend(c.node(p).unwrap().ledgers().flat_map(|l| l.txs().iter().map(|tx| tx.tx_id())));
    }
    let pre: Vec<Hash32> = pre.into_iter().collect();
    let req = PromoteRequest {
        failure_declared: true,
        required_seq,
        allow_lag: false,
        consensus: c.spec().consensus.clone(),
        key_scheme: SchemeId::InsecureTest,
    };
    let mut waits = 0;
    loop {
        let give_up = failed_at + c.spec().rpo_window_ms;
        let now = c.now();
        match c.promote(&req) {
            Ok(_) => break,
            Err(PromoteError::Lagging { .. }) if now < give_up => {
                waits += 1;
                c.run_to(c.now() + 250);
            }
            Err(e) => return Err(format!("seed {seed}: promotion failed at +{} ms: {e}", now - failed_at)),
        }
    }
    let center = c.center().unwrap();
    let mut worst = 0;
    for seq in 1..=required_seq {
        let validated = production.iter().filter_map(|p| c.node(p).unwrap().validated_at(seq)).min().unwrap();
        let shipped = center.applied_at(seq).ok_or_else(|| format!("seed {seed}: seq {seq} never shipped"))?;
        worst = worst.max(shipped.saturating_sub(validated));
    }
    ensure(worst <= 10_000, || format!("seed {seed}: ship latency {worst} ms"))?;

    let post = c.client_submit(&app, insert("orders", "post", -1)).unwrap();
    if !c.run_until_clients_idle(c.now() + 60_000).is_satisfied() {
        let s = c.client(&app).unwrap();
        let recs: Vec<String> = s.records().filter(|r| !r.status.is_terminal()).map(|r| format!("{} {:?} sent {:?}", r.handle.0, r.status, r.sent_to)).collect();
        let p = c.promoted().unwrap();
        return Err(format!("seed {seed}: client stuck at {} on {}: {recs:?}; promoted tip {} open {} events {:?}", c.now(), s.active_node(), p.tip().seq, p.open_tx_count(), p.events()));
    }
    let session = c.client(&app).unwrap();
    let first_success = session.record(post).and_then(|r| r.completed_at);
    let promoted = c.promoted().unwrap();
    let report = measure_recovery(&pre, promoted, failed_at, first_success);
    ensure(report.rpo_lost_tx == 0, || format!("seed {seed}: lost {} txs", report.rpo_lost_tx))?;

    let mut model = KvModel::default();
    let submitted: Vec<SqlOperation> = ops[..i].iter().cloned().chain([insert("orders", "post", -1)]).collect();
    let records: Vec<_> = session.records().collect();
    ensure(records.len() == submitted.len(), || format!("seed {seed}: {} records", records.len()))?;
    for (rec, op) in records.iter().zip(&submitted) {
        match &rec.status {
            HandleStatus::Validated { result: ApplyResult::Applied, .. } => model.apply(op),
            other => return Err(format!("seed {seed}: handle {} {other:?}", rec.handle.0)),
        }
    }
    let rows: Vec<(String, i64)> = {
        let mut v: Vec<_> = promoted
            .read_query("orders", &[], account)
            .map_err(|e| format!("seed {seed}: select {e}"))?
            .into_iter()
            .map(|row| match (&row.values["k"], &row.values["v"]) {
                (Literal::Text(k), Literal::Int(v)) => (k.clone(), *v),
                other => panic!("{other:?}"),
            })
            .collect();
        v.sort();
        v
    };
    ensure(rows == model.sorted()["orders"], || format!("seed {seed}: select {rows:?}"))?;
    let wall = started.elapsed();
    ensure(wall < Duration::from_secs(10), || format!("seed {seed}: drill took {wall:?}"))?;
    Ok(format!(
        "seed {seed}: kill at seq {required_seq}, worst ship {worst} ms, {} txs kept, rto {:?} ms, {waits} promotion waits, {:.2}s",
        report.pre_failure_tx,
        report.rto_ms,
        wall.as_secs_f64()
    ))
}

fn disaster_recovery() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..10 {
        lines.push(dr_drill(seed)?);
    }
    Ok(format!("10 drills ok; {}", lines[0]))
}

// ---- 8 ----

fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

/// 200 binlog lines over one inventory table, with a tab-separated header
/// comment and a blank line mixed in.
fn make_binlog(seed: u64) -> String {
    let mut r = rng(seed);
    let notes = ["fragile", "O'Brien's order", "back-order", "", "mixed, see note"];
    let mut text = String::from("# source inventory\n");
    text.push_str("1\t1000\tCREATE TABLE inventory (sku TEXT, qty INT, note TEXT)\n\n");
    for seq in 2..=200u64 {
        let sku = format!("sku-{}", r.gen_range(0..25));
        let sql = match r.gen_range(0..10) {
            0..=5 => format!(
                "INSERT INTO inventory (sku, qty, note) VALUES ({}, {}, {})",
                quote(&sku),
                r.gen_range(-5..500),
                quote(notes[r.gen_range(0..notes.len())])
            ),
            6..=8 => format!("UPDATE inventory SET qty = {} WHERE sku = {}", r.gen_range(0..900), quote(&sku)),
            _ => format!("DELETE FROM inventory WHERE sku = {}", quote(&sku)),
        };
        text.push_str(&format!("{seq}\t{}\t{sql}\n", 1000 + seq * 37));
    }
    text
}

/// Independent model of the inventory table: (sku, qty, note) multiset.
fn inventory_model(ops: &[SqlOperation]) -> Vec<(String, i64, String)> {
    let mut rows: Vec<(String, i64, String)> = Vec::new();
    let text = |l: &Literal| match l {
        Literal::Text(s) => s.clone(),
        other => panic!("{other:?}"),
    };
    for op in ops {
        match op {
            SqlOperation::CreateTable { .. } => {}
            SqlOperation::Insert { values, .. } => {
                let Literal::Int(q) = values["qty"] else { panic!() };
                rows.push((text(&values["sku"]), q, text(&values["note"])));
            }
            SqlOperation::Update { filter, set, .. } => {
                let Literal::Int(q) = set["qty"] else { panic!() };
                let sku = text(&filter[0].value);
                rows.iter_mut().filter(|r| r.0 == sku).for_each(|r| r.1 = q);
            }
            SqlOperation::Delete { filter, .. } => {
                let sku = text(&filter[0].value);
                rows.retain(|r| r.0 != sku);
            }
            other => panic!("{other:?}"),
        }
    }
    rows.sort();
    rows
}

fn binlog_equivalence() -> Outcome {
    let text = make_binlog(8);
    let (entries, bad) = parse_binlog("inventory-db", &text);
    ensure(bad.is_empty() && entries.len() == 200, || format!("{} entries, {bad:?}", entries.len()))?;
    let service = account_signer("binlog-service", SchemeId::InsecureTest);
    let report = ingest_binlog(&entries, service.as_ref(), 0).map_err(|e| e.to_string())?;
    ensure(report.errors.is_empty() && report.txs.len() == 200, || format!("ingest errors {:?}", report.errors))?;
    let ops: Vec<SqlOperation> = report.txs.iter().map(|tx| tx.op().clone()).collect();

    let mut c = Cluster::build(ClusterSpec::new(5, 8)).unwrap();
    let ids = c.production_ids();
    let mut r = rng(88);
    for (i, tx) in report.txs.iter().enumerate() {
        if i % 20 == 0 {
            c.run_to(c.now() + 700);
        }
        let node = &ids[r.gen_range(0..ids.len())];
        c.submit_signed(node, tx.clone()).map_err(|e| format!("entry {}: {e}", i + 1))?;
    }
    ensure(run_to_quiet(&mut c, 120_000), || "cluster never quiesced".into())?;
    let n1 = c.node(&id("n1")).unwrap();
    for tx in &report.txs {
        ensure(matches!(n1.tx_status(&tx.tx_id()), TxStatus::Validated { .. }), || format!("tx {} missing", tx.seq()))?;
    }
    let (loaded, replayed) = load_chain(&**c.disk(&id("n1")).unwrap(), false)
        .map_err(|e| e.to_string())?
        .ok_or("no chain on disk")?;
    let (reference, results) = reference_execute(&ops, service.as_ref());
    let chain_outcomes: Vec<ApplyResult> = report
        .txs
        .iter()
        .map(|tx| match n1.tx_status(&tx.tx_id()) {
            TxStatus::Validated { result, .. } => result,
            _ => unreachable!(),
        })
        .collect();
    ensure(chain_outcomes == results, || "per-entry results differ from reference".into())?;
    ensure(replayed.state_hash == n1.state_hash(), || "replay differs from live".into())?;
    ensure(loaded.store.content_hash() == reference.content_hash(), || "content differs from reference executor".into())?;
    let live_rows: Vec<(String, i64, String)> = {
        let mut v: Vec<_> = loaded
            .store
            .query_select("inventory", &[], service.account_id())
            .unwrap()
            .into_iter()
            .map(|row| {
                let t = |k: &str| match &row.values[k] {
                    Literal::Text(s) => s.clone(),
                    other => panic!("{other:?}"),
                };
                let Literal::Int(q) = row.values["qty"] else { panic!() };
                (t("sku"), q, t("note"))
            })
            .collect();
        v.sort();
        v
    };
    let model = inventory_model(&ops);
    ensure(live_rows == model, || "rows differ from independent model".into())?;
    Ok(format!(
        "200 entries over {} ledgers: content hash {} equals reference executor, {} rows match model",
        loaded.tip.seq,
        reference.content_hash().short(),
        model.len()
    ))
}

// ---- 9 ----

fn audit_node(c: &Cluster, nid: &NodeId) -> Result<(), String> {
    let n = c.node(nid).unwrap();
    let partial = n.config().role.retain_last().is_some();
    let modes: &[bool] = if partial { &[true] } else { &[false, true] };
    for &use_cp in modes {
        let (_, report) = load_chain(&**n.disk(), use_cp).map_err(|e| format!("{nid}: {e}"))?.ok_or("empty disk")?;
        ensure(report.state_hash == n.state_hash() && report.tip_seq == n.tip().seq, || {
            format!("{nid}: replay from files (checkpoints {use_cp}) differs")
        })?;
    }
    Ok(())
}

fn audit_by_replay() -> Outcome {
    let mut audited = 0;
    for seed in 0..10u64 {
        let mut r = rng(9000 + seed);
        let mut spec = ClusterSpec::new(5, seed);
        spec.partial.insert("n4".into(), 4);
        let mut c = Cluster::build(spec).unwrap();
        let s = signers(&["a0", "a1", "a2"]);
        let ops = workload(&mut r, 3, 40);
        let (first, second) = ops.split_at(20);
        submit_spread(&mut c, &mut r, &s, first.to_vec(), 100, 8_000);
        c.net.kill(&id("n3")).unwrap();
        let t = c.now();
        submit_spread(&mut c, &mut r, &s, second.to_vec(), t, 8_000);
        c.net.revive(&id("n3")).unwrap();
        ensure(run_to_quiet(&mut c, 60_000), || format!("seed {seed}: never quiesced"))?;
        for nid in c.production_ids() {
            audit_node(&c, &nid).map_err(|e| format!("seed {seed}: {e}"))?;
            audited += 1;
        }
    }
    for (name, script) in [("partition_heal", include_str!("../../../scenarios/partition_heal.json")),
                           ("three_nodes", include_str!("../../../scenarios/three_nodes.json"))] {
        let mut script = ScenarioScript::parse(script).map_err(|e| e.to_string())?;
        let end = script.end_time();
        script.actions.push(chainlog::netsim::TimedAction {
            t: end,
            action: chainlog::netsim::ScenarioAction::Assert(chainlog::netsim::AssertCheck::AuditReplay),
        });
        let run = run_scenario(&script, 9).map_err(|e| e.to_string())?;
        ensure(run.passed(), || format!("{name}: {}", run.output()))?;
    }
    Ok(format!("{audited} node stores across 10 runs with restarts and pruning, plus 2 scripts, replay to the live hash"))
}

// ---- 10 ----

fn determinism() -> Outcome {
    let script = ScenarioScript::parse(include_str!("../../../scenarios/dr_drill.json")).map_err(|e| e.to_string())?;
    let a = run_scenario(&script, 42).map_err(|e| e.to_string())?;
    let b = run_scenario(&script, 42).map_err(|e| e.to_string())?;
    ensure(a.passed(), || format!("drill failed:\n{}", a.output()))?;
    ensure(a.output() == b.output() && a.trace_digest == b.trace_digest, || "scenario output differs between runs".into())?;
    let other = run_scenario(&script, 43).map_err(|e| e.to_string())?;
    ensure(other.trace_digest != a.trace_digest, || "seed has no effect on the trace".into())?;

    let traced = |seed: u64| {
        let mut c = Cluster::build(ClusterSpec::new(5, seed)).unwrap();
        c.net.set_keep_trace(true);
        let mut r = rng(seed);
        let s = signers(&["a0", "a1"]);
        let ops = workload(&mut r, 2, 30);
        submit_spread(&mut c, &mut r, &s, ops, 100, 8_000);
        c.net.kill(&id("n2")).unwrap();
        c.run_to(14_000);
        c.net.revive(&id("n2")).unwrap();
        c.run_to(24_000);
        (c.net.trace().to_vec(), c.net.trace_digest())
    };
    let (t1, d1) = traced(10);
    let (t2, d2) = traced(10);
    ensure(t1 == t2 && d1 == d2, || "event trace differs between runs".into())?;
    Ok(format!("drill script: {} identical output lines; cluster run: {} identical trace events", a.lines.len(), t1.len()))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 tamper evidence", tamper_evidence),
        ("2 replica equality", replica_equality),
        ("3 consensus convergence", consensus_convergence),
        ("4 rollback correctness", rollback_correctness),
        ("5 new-node join", new_node_join),
        ("6 failover exactly-once", failover_exactly_once),
        ("7 disaster-recovery drill", disaster_recovery),
        ("8 binlog equivalence", binlog_equivalence),
        ("9 audit by replay", audit_by_replay),
        ("10 determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let results: Vec<(&str, Outcome, Duration)> = criteria
        .iter()
        .filter(|(name, _)| only.is_empty() || only.iter().any(|o| name.contains(o.as_str())))
        .map(|&(name, f)| {
            let start = Instant::now();
            let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
                Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
            });
            (name, r, start.elapsed())
        })
        .collect();
    let mut failed = 0;
    for (name, r, took) in &results {
        match r {
            Ok(detail) => println!("PASS criterion {name} ({:.1}s): {detail}", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name} ({:.1}s): {why}", took.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
