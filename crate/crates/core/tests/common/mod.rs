#![allow(dead_code)]

use std::collections::BTreeMap;

use chainlog::consensus::NodeId;
use chainlog::ledger::{ColumnDef, ColumnType, Ledger, Literal, Predicate, SharedSigner, SqlOperation};
use chainlog::sim::Cluster;
use chainlog::sqlvm::TableStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn id(s: &str) -> NodeId {
    NodeId::new(s)
}

pub fn kv_table(table: &str) -> SqlOperation {
    SqlOperation::CreateTable {
        table: table.into(),
        columns: vec![ColumnDef::new("k", ColumnType::Text), ColumnDef::new("v", ColumnType::Int)],
    }
}

pub fn insert(table: &str, k: &str, v: i64) -> SqlOperation {
    SqlOperation::Insert {
        table: table.into(),
        values: BTreeMap::from([("k".into(), Literal::Text(k.into())), ("v".into(), Literal::Int(v))]),
    }
}

pub fn update(table: &str, k: &str, v: i64) -> SqlOperation {
    SqlOperation::Update {
        table: table.into(),
        filter: vec![Predicate::eq("k", Literal::Text(k.into()))],
        set: BTreeMap::from([("v".into(), Literal::Int(v))]),
    }
}

pub fn delete(table: &str, k: &str) -> SqlOperation {
    SqlOperation::Delete { table: table.into(), filter: vec![Predicate::eq("k", Literal::Text(k.into()))] }
}

/// Random valid ops: every account first creates its own table and then
/// only touches that table.
pub fn workload(rng: &mut impl Rng, accounts: usize, n: usize) -> Vec<(usize, SqlOperation)> {
    let mut out: Vec<(usize, SqlOperation)> = (0..accounts).map(|a| (a, kv_table(&format!("t{a}")))).collect();
    while out.len() < n {
        let a = rng.gen_range(0..accounts);
        let t = format!("t{a}");
        let k = format!("r{}", rng.gen_range(0..6));
        let op = match rng.gen_range(0..10) {
            0..=5 => insert(&t, &k, rng.gen_range(-100..100)),
            6..=8 => update(&t, &k, rng.gen_range(-100..100)),
            _ => delete(&t, &k),
        };
        out.push((a, op));
    }
    out
}

/// Plain row model of the kv tables, independent of the table store.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct KvModel {
    pub tables: BTreeMap<String, Vec<(String, i64)>>,
}

impl KvModel {
    pub fn apply(&mut self, op: &SqlOperation) {
        let text = |l: &Literal| match l {
            Literal::Text(s) => s.clone(),
            other => panic!("unexpected key {other:?}"),
        };
        let int = |l: &Literal| match l {
            Literal::Int(v) => *v,
            other => panic!("unexpected value {other:?}"),
        };
        match op {
            SqlOperation::CreateTable { table, .. } => {
                self.tables.entry(table.clone()).or_default();
            }
            SqlOperation::Insert { table, values } => {
                self.tables.get_mut(table).unwrap().push((text(&values["k"]), int(&values["v"])));
            }
            SqlOperation::Update { table, filter, set } => {
                let k = text(&filter[0].value);
                for row in self.tables.get_mut(table).unwrap().iter_mut().filter(|r| r.0 == k) {
                    row.1 = int(&set["v"]);
                }
            }
            SqlOperation::Delete { table, filter } => {
                let k = text(&filter[0].value);
                self.tables.get_mut(table).unwrap().retain(|r| r.0 != k);
            }
            other => panic!("model does not cover {other:?}"),
        }
    }

    pub fn sorted(&self) -> BTreeMap<String, Vec<(String, i64)>> {
        self.tables.iter().map(|(t, rows)| (t.clone(), sorted(rows.clone()))).collect()
    }
}

fn sorted(mut v: Vec<(String, i64)>) -> Vec<(String, i64)> {
    v.sort();
    v
}

/// The kv rows a store holds, read straight from its tables.
pub fn store_rows(store: &TableStore) -> BTreeMap<String, Vec<(String, i64)>> {
    store
        .tables()
        .map(|t| {
            let rows = store
                .query_select(&t.schema.name, &[], t.schema.owner)
                .unwrap()
                .into_iter()
                .map(|r| match (&r.values["k"], &r.values["v"]) {
                    (Literal::Text(k), Literal::Int(v)) => (k.clone(), *v),
                    other => panic!("{other:?}"),
                })
                .collect();
            (t.schema.name.clone(), sorted(rows))
        })
        .collect()
}

/// Replays `chain` into a fresh store, ledger by ledger.
pub fn replay(chain: &[&Ledger]) -> TableStore {
    let mut store = TableStore::new();
    for l in chain {
        store.apply_ledger(l).unwrap();
    }
    store
}

/// Model of every op in the chain, in chain order. Callers check
/// separately that each op was applied.
pub fn model_of_chain(chain: &[&Ledger]) -> KvModel {
    let mut model = KvModel::default();
    for tx in chain.iter().flat_map(|l| l.txs()) {
        model.apply(tx.op());
    }
    model
}

/// Submits `ops` at random times in `[start, start+span)` to random
/// production nodes. Returns the time of the last submission.
pub fn submit_spread(
    cluster: &mut Cluster,
    rng: &mut impl Rng,
    signers: &[SharedSigner],
    ops: Vec<(usize, SqlOperation)>,
    start: u64,
    span: u64,
) -> u64 {
    let ids = cluster.production_ids();
    let mut times: Vec<u64> = ops.iter().map(|_| start + rng.gen_range(0..span)).collect();
    times.sort();
    let mut last = start;
    for (t, (a, op)) in times.into_iter().zip(ops) {
        cluster.run_to(t);
        let live: Vec<NodeId> = ids.iter().filter(|i| cluster.net.is_alive(i)).cloned().collect();
        let node = live[rng.gen_range(0..live.len())].clone();
        cluster.submit(&node, &signers[a], op).unwrap();
        last = t;
    }
    last
}

/// Runs for at most `within` ms until no live node has open transactions
/// and all voting nodes share one tip.
pub fn run_to_quiet(cluster: &mut Cluster, within: u64) -> bool {
    let max_time = cluster.now() + within;
    cluster.run_until(
        |net| {
            let nodes: Vec<_> = net
                .actors()
                .filter(|(id, _)| net.is_alive(id))
                .filter_map(|(_, a)| a.as_node())
                .collect();
            let tip = nodes.iter().map(|n| n.tip().seq).max().unwrap_or(0);
            nodes.iter().all(|n| n.open_tx_count() == 0 && n.is_voting() && n.tip().seq == tip && !n.has_overlay())
        },
        max_time,
    )
    .is_satisfied()
}
