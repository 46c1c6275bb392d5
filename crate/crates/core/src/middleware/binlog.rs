//! Converts an external database's operation log into signed chain
//! transactions.
//!
//! File format: one entry per line, `seq<TAB>timestamp_ms<TAB>SQL`. Blank
//! lines and lines starting with `#` are skipped.

use serde::Serialize;
use thiserror::Error;

use crate::ledger::{sign_transaction, Signer, SqlOperation, Transaction, TxBody};
use crate::sql::{parse_operation, SqlError};
use crate::sqlvm::{ApplyResult, TableStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BinlogEntry {
    pub source: String,
    pub seq: u64,
    pub timestamp_ms: u64,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[error("line {line}: {message}")]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Splits a binlog file into entries plus one error per bad line.
pub fn parse_binlog(source: &str, text: &str) -> (Vec<BinlogEntry>, Vec<LineError>) {
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let mut parts = raw.splitn(3, '\t');
        let (Some(seq), Some(ts), Some(sql)) = (parts.next(), parts.next(), parts.next()) else {
            errors.push(LineError { line, message: "expected seq<TAB>timestamp_ms<TAB>sql".into() });
            continue;
        };
        let seq = match seq.trim().parse::<u64>() {
            Ok(v) => v,
            Err(_) => {
                errors.push(LineError { line, message: format!("bad entry seq {seq:?}") });
                continue;
            }
        };
        let timestamp_ms = match ts.trim().parse::<u64>() {
            Ok(v) => v,
            Err(_) => {
                errors.push(LineError { line, message: format!("bad timestamp {ts:?}") });
                continue;
            }
        };
        entries.push(BinlogEntry { source: source.to_string(), seq, timestamp_ms, sql: sql.to_string() });
    }
    (entries, errors)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("source {db}: entry seq {got} follows {previous}; expected {}", previous + 1)]
    Gap { db: String, previous: u64, got: u64 },
    #[error("signing failed: {0}")]
    Signing(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryError {
    pub source: String,
    pub seq: u64,
    pub error: SqlError,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// In entry order; account sequence numbers continue from `start_seq`.
    pub txs: Vec<Transaction>,
    pub errors: Vec<EntryError>,
}

/// Parses every entry and signs the parsed operations under the service
/// account. Entry seqs must increase by exactly one per source.
pub fn ingest_binlog(entries: &[BinlogEntry], signer: &dyn Signer, start_seq: u64) -> Result<IngestReport, IngestError> {
    let mut last: std::collections::BTreeMap<&str, u64> = Default::default();
    for e in entries {
        if let Some(&previous) = last.get(e.source.as_str()) {
            if e.seq != previous + 1 {
                return Err(IngestError::Gap { db: e.source.clone(), previous, got: e.seq });
            }
        }
        last.insert(&e.source, e.seq);
    }
    let account = signer.account_id();
    let mut report = IngestReport::default();
    let mut seq = start_seq;
    for e in entries {
        match parse_operation(&e.sql) {
            Ok(op) => {
                seq += 1;
                let tx = sign_transaction(TxBody::new(account, seq, op), signer)
                    .map_err(|err| IngestError::Signing(err.to_string()))?;
                report.txs.push(tx);
            }
            Err(error) => report.errors.push(EntryError { source: e.source.clone(), seq: e.seq, error }),
        }
    }
    Ok(report)
}

/// Applies `ops` in order straight to a fresh store, with no chain or
/// consensus in between.
pub fn reference_execute(ops: &[SqlOperation], signer: &dyn Signer) -> (TableStore, Vec<ApplyResult>) {
    let mut store = TableStore::new();
    let account = signer.account_id();
    let mut results = Vec::new();
    for op in ops {
        let body = TxBody::new(account, store.account_seq(&account) + 1, op.clone());
        let tx = sign_transaction(body, signer).expect("reference ops are prevalidated");
        results.push(store.apply_op(&tx));
    }
    (store, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{InsecureTestSigner, Literal, Predicate};

    fn entries(lines: &[&str]) -> Vec<BinlogEntry> {
        let text: String = lines.iter().enumerate().map(|(i, l)| format!("{}\t{}\t{l}\n", i + 1, 1000 * i)).collect();
        let (e, errs) = parse_binlog("db1", &text);
        assert!(errs.is_empty());
        e
    }

    #[test]
    fn update_entry_becomes_update_op() {
        let signer = InsecureTestSigner::from_seed([4; 32]);
        let r = ingest_binlog(&entries(&["UPDATE t SET a=5 WHERE k='x'"]), &signer, 0).unwrap();
        match r.txs[0].op() {
            SqlOperation::Update { table, filter, set } => {
                assert_eq!(table, "t");
                assert_eq!(filter, &vec![Predicate::eq("k", Literal::Text("x".into()))]);
                assert_eq!(set["a"], Literal::Int(5));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(r.txs[0].seq(), 1);
    }

    #[test]
    fn empty_and_bad_lines() {
        let signer = InsecureTestSigner::from_seed([4; 32]);
        assert!(ingest_binlog(&[], &signer, 0).unwrap().txs.is_empty());
        let (e, errs) = parse_binlog("db1", "1\t5\tDROP TABLE t\nnot a line\n2\tx\tDROP TABLE u\n\n3\t7\tSELECT a FROM t\n");
        assert_eq!(errs.iter().map(|e| e.line).collect::<Vec<_>>(), [2, 3]);
        assert_eq!(e.len(), 2);
        let sparse: Vec<BinlogEntry> = e.into_iter().enumerate().map(|(i, mut x)| { x.seq = i as u64 + 1; x }).collect();
        let r = ingest_binlog(&sparse, &signer, 10).unwrap();
        assert_eq!(r.txs.len(), 1);
        assert_eq!(r.txs[0].seq(), 11);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].seq, 2);
    }

    #[test]
    fn out_of_order_names_the_gap() {
        let signer = InsecureTestSigner::from_seed([4; 32]);
        let mut e = entries(&["DROP TABLE a", "DROP TABLE b", "DROP TABLE c"]);
        e[2].seq = 7;
        let err = ingest_binlog(&e, &signer, 0).unwrap_err();
        assert_eq!(err, IngestError::Gap { db: "db1".into(), previous: 2, got: 7 });
        assert!(err.to_string().contains("expected 3"));
    }
}
