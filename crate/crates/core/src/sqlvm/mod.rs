//! Deterministic replay of validated ledgers into an in-memory table store.

mod checkpoint;
mod undo;

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::ledger::codec::{Canonical, DecodeError, Reader};
use crate::ledger::{hash32, AccountId, ColumnDef, Hash32, Ledger, Literal, Perm, PermSet, Predicate, SqlOperation, Transaction};

pub use checkpoint::{checkpoint_file_name, decode_checkpoint_file, encode_checkpoint_file, Checkpoint};
use undo::Undo;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    pub owner: AccountId,
    pub grants: BTreeMap<AccountId, PermSet>,
}

impl TableSchema {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn allows(&self, account: AccountId, perm: Perm) -> bool {
        account == self.owner || self.grants.get(&account).is_some_and(|p| p.contains(perm))
    }
}

impl Canonical for TableSchema {
    fn encode(&self, out: &mut Vec<u8>) {
        self.name.encode(out);
        self.columns.encode(out);
        self.owner.encode(out);
        self.grants.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            name: String::decode(r)?,
            columns: Vec::decode(r)?,
            owner: AccountId::decode(r)?,
            grants: BTreeMap::decode(r)?,
        })
    }
}

/// A stored row; `values` follow the schema's column order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub row_id: u64,
    pub values: Vec<Literal>,
}

impl Canonical for Row {
    fn encode(&self, out: &mut Vec<u8>) {
        self.row_id.encode(out);
        self.values.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self { row_id: u64::decode(r)?, values: Vec::decode(r)? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub schema: TableSchema,
    pub rows: BTreeMap<u64, Row>,
    pub next_row_id: u64,
}

impl Table {
    fn new(schema: TableSchema) -> Self {
        Self { schema, rows: BTreeMap::new(), next_row_id: 1 }
    }

    fn matches(&self, row: &Row, filter: &[(usize, &Literal)]) -> bool {
        filter.iter().all(|(i, v)| &row.values[*i] == *v)
    }
}

impl Canonical for Table {
    fn encode(&self, out: &mut Vec<u8>) {
        self.schema.encode(out);
        self.next_row_id.encode(out);
        let rows: Vec<&Row> = self.rows.values().collect();
        crate::ledger::codec::put_u32(out, rows.len() as u32);
        for row in rows {
            row.encode(out);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let schema = TableSchema::decode(r)?;
        let next_row_id = u64::decode(r)?;
        let rows: Vec<Row> = Vec::decode(r)?;
        let mut map = BTreeMap::new();
        let mut last = 0;
        for row in rows {
            if row.row_id <= last || row.row_id >= next_row_id {
                return Err(DecodeError::NonCanonical("row ids must ascend below the row counter"));
            }
            if row.values.len() != schema.columns.len() {
                return Err(DecodeError::Invalid(format!("row {} has wrong arity", row.row_id)));
            }
            last = row.row_id;
            map.insert(row.row_id, row);
        }
        Ok(Self { schema, rows: map, next_row_id })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadSeq,
    NoSuchTable,
    TableExists,
    TypeMismatch,
    PermissionDenied,
    MissingColumn,
    /// The operation failed structural validation (bad names, empty SET, ...).
    Malformed,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::BadSeq => "bad_seq",
            RejectReason::NoSuchTable => "no_such_table",
            RejectReason::TableExists => "table_exists",
            RejectReason::TypeMismatch => "type_mismatch",
            RejectReason::PermissionDenied => "permission_denied",
            RejectReason::MissingColumn => "missing_column",
            RejectReason::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "result", content = "reason")]
pub enum ApplyResult {
    Applied,
    Rejected(RejectReason),
}

impl ApplyResult {
    pub fn is_applied(self) -> bool {
        self == ApplyResult::Applied
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TxOutcome {
    pub tx_id: Hash32,
    #[serde(flatten)]
    pub result: ApplyResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("ledger {got} out of order, expected {expected}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("a pending overlay is already active")]
    NestedPending,
    #[error("no pending overlay is active")]
    NoPending,
    #[error("snapshot hash mismatch (expected {expected}, computed {computed})")]
    CorruptSnapshot { expected: Hash32, computed: Hash32 },
    #[error("snapshot decode: {0}")]
    SnapshotDecode(DecodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("no such table {0:?}")]
    NoSuchTable(String),
    #[error("permission denied")]
    PermissionDenied,
    #[error("no such column {0:?}")]
    MissingColumn(String),
}

/// A row as returned by reads: id plus column-name keyed values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowView {
    pub row_id: u64,
    pub values: BTreeMap<String, Literal>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PendingOverlay {
    base_state_hash: Hash32,
    undo: Vec<Undo>,
}

/// Schemas, rows and per-account sequence counters. The pending overlay
/// is bookkeeping only and never part of the hashed state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableStore {
    tables: BTreeMap<String, Table>,
    account_seq: BTreeMap<AccountId, u64>,
    applied_ledger_seq: u64,
    pending: Option<PendingOverlay>,
}

impl Canonical for TableStore {
    fn encode(&self, out: &mut Vec<u8>) {
        self.tables.encode(out);
        self.account_seq.encode(out);
        self.applied_ledger_seq.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tables: BTreeMap<String, Table> = BTreeMap::decode(r)?;
        if tables.iter().any(|(k, t)| *k != t.schema.name) {
            return Err(DecodeError::Invalid("table key differs from schema name".into()));
        }
        Ok(Self { tables, account_seq: BTreeMap::decode(r)?, applied_ledger_seq: u64::decode(r)?, pending: None })
    }
}

fn resolve_filter<'a>(schema: &TableSchema, filter: &'a [Predicate]) -> Result<Vec<(usize, &'a Literal)>, RejectReason> {
    filter
        .iter()
        .map(|p| {
            let i = schema.column_index(&p.column).ok_or(RejectReason::MissingColumn)?;
            if schema.columns[i].ty != p.value.column_type() {
                return Err(RejectReason::TypeMismatch);
            }
            Ok((i, &p.value))
        })
        .collect()
}

fn resolve_assignments(
    schema: &TableSchema,
    values: &BTreeMap<String, Literal>,
) -> Result<Vec<(usize, Literal)>, RejectReason> {
    values
        .iter()
        .map(|(col, v)| {
            let i = schema.column_index(col).ok_or(RejectReason::MissingColumn)?;
            if schema.columns[i].ty != v.column_type() {
                return Err(RejectReason::TypeMismatch);
            }
            Ok((i, v.clone()))
        })
        .collect()
}

impl TableStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn applied_ledger_seq(&self) -> u64 {
        self.applied_ledger_seq
    }

    pub fn account_seq(&self, account: &AccountId) -> u64 {
        self.account_seq.get(account).copied().unwrap_or(0)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn state_hash(&self) -> Hash32 {
        hash32(&self.to_canonical_bytes())
    }

    /// Digest of tables and account counters only, leaving out the applied
    /// ledger seq, so stores built with different ledger boundaries compare.
    pub fn content_hash(&self) -> Hash32 {
        let mut out = Vec::new();
        self.tables.encode(&mut out);
        self.account_seq.encode(&mut out);
        hash32(&out)
    }

    fn record(&mut self, u: Undo) {
        if let Some(p) = self.pending.as_mut() {
            p.undo.push(u);
        }
    }

    /// Applies one transaction. Rejections leave the store untouched,
    /// including the account sequence counter.
    pub fn apply_op(&mut self, tx: &Transaction) -> ApplyResult {
        let account = tx.account();
        if tx.seq() != self.account_seq(&account) + 1 {
            return ApplyResult::Rejected(RejectReason::BadSeq);
        }
        if tx.op().validate().is_err() {
            return ApplyResult::Rejected(RejectReason::Malformed);
        }
        match self.execute(account, tx.op()) {
            Ok(()) => {
                let prev = self.account_seq.insert(account, tx.seq());
                self.record(Undo::AccountSeq { account, prev });
                ApplyResult::Applied
            }
            Err(reason) => ApplyResult::Rejected(reason),
        }
    }

    fn execute(&mut self, account: AccountId, op: &SqlOperation) -> Result<(), RejectReason> {
        match op {
            SqlOperation::CreateTable { table, columns } => {
                if self.tables.contains_key(table) {
                    return Err(RejectReason::TableExists);
                }
                let schema = TableSchema {
                    name: table.clone(),
                    columns: columns.clone(),
                    owner: account,
                    grants: BTreeMap::new(),
                };
                self.tables.insert(table.clone(), Table::new(schema));
                self.record(Undo::RemoveTable(table.clone()));
            }
            SqlOperation::DropTable { table } => {
                let t = self.tables.get(table).ok_or(RejectReason::NoSuchTable)?;
                if t.schema.owner != account {
                    return Err(RejectReason::PermissionDenied);
                }
                let removed = self.tables.remove(table).expect("checked above");
                self.record(Undo::RestoreTable(Box::new(removed)));
            }
            SqlOperation::Insert { table, values } => {
                let t = self.tables.get(table).ok_or(RejectReason::NoSuchTable)?;
                if !t.schema.allows(account, Perm::Insert) {
                    return Err(RejectReason::PermissionDenied);
                }
                let assigned = resolve_assignments(&t.schema, values)?;
                if assigned.len() != t.schema.columns.len() {
                    return Err(RejectReason::MissingColumn);
                }
                let mut row_values = vec![Literal::Int(0); assigned.len()];
                for (i, v) in assigned {
                    row_values[i] = v;
                }
                let t = self.tables.get_mut(table).expect("checked above");
                let row_id = t.next_row_id;
                t.next_row_id += 1;
                t.rows.insert(row_id, Row { row_id, values: row_values });
                self.record(Undo::RemoveRow { table: table.clone(), row_id });
            }
            SqlOperation::Update { table, filter, set } => {
                let t = self.tables.get(table).ok_or(RejectReason::NoSuchTable)?;
                if !t.schema.allows(account, Perm::Update) {
                    return Err(RejectReason::PermissionDenied);
                }
                let filter = resolve_filter(&t.schema, filter)?;
                let set = resolve_assignments(&t.schema, set)?;
                let hits: Vec<u64> = t.rows.values().filter(|r| t.matches(r, &filter)).map(|r| r.row_id).collect();
                let t = self.tables.get_mut(table).expect("checked above");
                let mut old = Vec::with_capacity(hits.len());
                for id in hits {
                    let row = t.rows.get_mut(&id).expect("row listed above");
                    old.push(row.clone());
                    for (i, v) in &set {
                        row.values[*i] = v.clone();
                    }
                }
                self.record(Undo::RestoreRows { table: table.clone(), rows: old });
            }
            SqlOperation::Delete { table, filter } => {
                let t = self.tables.get(table).ok_or(RejectReason::NoSuchTable)?;
                if !t.schema.allows(account, Perm::Delete) {
                    return Err(RejectReason::PermissionDenied);
                }
                let filter = resolve_filter(&t.schema, filter)?;
                let hits: Vec<u64> = t.rows.values().filter(|r| t.matches(r, &filter)).map(|r| r.row_id).collect();
                let t = self.tables.get_mut(table).expect("checked above");
                let old: Vec<Row> = hits.iter().filter_map(|id| t.rows.remove(id)).collect();
                self.record(Undo::RestoreRows { table: table.clone(), rows: old });
            }
            SqlOperation::Grant { table, grantee, perms } => {
                let t = self.tables.get_mut(table).ok_or(RejectReason::NoSuchTable)?;
                if t.schema.owner != account {
                    return Err(RejectReason::PermissionDenied);
                }
                let prev = t.schema.grants.get(grantee).copied();
                let merged = prev.unwrap_or(PermSet::EMPTY).union(*perms);
                t.schema.grants.insert(*grantee, merged);
                self.record(Undo::Grant { table: table.clone(), grantee: *grantee, prev });
            }
        }
        Ok(())
    }

    /// Applies `txs` in the given order as the body of ledger `seq`.
    pub fn apply_block(&mut self, seq: u64, txs: &[Transaction]) -> Result<Vec<TxOutcome>, ReplayError> {
        let expected = self.applied_ledger_seq + 1;
        if seq != expected {
            return Err(ReplayError::OutOfOrder { expected, got: seq });
        }
        let outcomes = txs.iter().map(|tx| TxOutcome { tx_id: tx.tx_id(), result: self.apply_op(tx) }).collect();
        let prev = self.applied_ledger_seq;
        self.applied_ledger_seq = seq;
        self.record(Undo::LedgerSeq(prev));
        Ok(outcomes)
    }

    pub fn apply_ledger(&mut self, ledger: &Ledger) -> Result<Vec<TxOutcome>, ReplayError> {
        self.apply_block(ledger.seq(), ledger.txs())
    }

    pub fn begin_pending(&mut self) -> Result<(), ReplayError> {
        if self.pending.is_some() {
            return Err(ReplayError::NestedPending);
        }
        self.pending = Some(PendingOverlay { base_state_hash: self.state_hash(), undo: Vec::new() });
        Ok(())
    }

    pub fn commit_pending(&mut self) -> Result<(), ReplayError> {
        self.pending.take().map(|_| ()).ok_or(ReplayError::NoPending)
    }

    /// Undoes every change since `begin_pending`, returning the base hash.
    pub fn rollback_pending(&mut self) -> Result<Hash32, ReplayError> {
        let overlay = self.pending.take().ok_or(ReplayError::NoPending)?;
        for u in overlay.undo.into_iter().rev() {
            u.revert(self);
        }
        debug_assert_eq!(self.state_hash(), overlay.base_state_hash);
        Ok(overlay.base_state_hash)
    }

    pub fn pending_base_hash(&self) -> Option<Hash32> {
        self.pending.as_ref().map(|p| p.base_state_hash)
    }

    /// Rows matching every predicate, ordered by row id.
    pub fn query_select(&self, table: &str, filter: &[Predicate], as_account: AccountId) -> Result<Vec<RowView>, QueryError> {
        let t = self.tables.get(table).ok_or_else(|| QueryError::NoSuchTable(table.to_string()))?;
        if !t.schema.allows(as_account, Perm::Select) {
            return Err(QueryError::PermissionDenied);
        }
        let mut resolved = Vec::with_capacity(filter.len());
        for p in filter {
            let i = t.schema.column_index(&p.column).ok_or_else(|| QueryError::MissingColumn(p.column.clone()))?;
            resolved.push((i, &p.value));
        }
        Ok(t
            .rows
            .values()
            .filter(|r| t.matches(r, &resolved))
            .map(|r| RowView {
                row_id: r.row_id,
                values: t.schema.columns.iter().map(|c| c.name.clone()).zip(r.values.iter().cloned()).collect(),
            })
            .collect())
    }
}
