use crate::ledger::{AccountId, PermSet};

use super::{Row, Table, TableStore};

/// Inverse of one primitive store mutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) enum Undo {
    AccountSeq { account: AccountId, prev: Option<u64> },
    LedgerSeq(u64),
    RemoveTable(String),
    RestoreTable(Box<Table>),
    RemoveRow { table: String, row_id: u64 },
    RestoreRows { table: String, rows: Vec<Row> },
    Grant { table: String, grantee: AccountId, prev: Option<PermSet> },
}

impl Undo {
    pub(super) fn revert(self, store: &mut TableStore) {
        match self {
            Undo::AccountSeq { account, prev } => match prev {
                Some(seq) => {
                    store.account_seq.insert(account, seq);
                }
                None => {
                    store.account_seq.remove(&account);
                }
            },
            Undo::LedgerSeq(prev) => store.applied_ledger_seq = prev,
            Undo::RemoveTable(name) => {
                store.tables.remove(&name);
            }
            Undo::RestoreTable(table) => {
                store.tables.insert(table.schema.name.clone(), *table);
            }
            Undo::RemoveRow { table, row_id } => {
                let t = store.tables.get_mut(&table).expect("undo targets existing table");
                t.rows.remove(&row_id);
                t.next_row_id = row_id;
            }
            Undo::RestoreRows { table, rows } => {
                let t = store.tables.get_mut(&table).expect("undo targets existing table");
                for row in rows {
                    t.rows.insert(row.row_id, row);
                }
            }
            Undo::Grant { table, grantee, prev } => {
                let t = store.tables.get_mut(&table).expect("undo targets existing table");
                match prev {
                    Some(p) => {
                        t.schema.grants.insert(grantee, p);
                    }
                    None => {
                        t.schema.grants.remove(&grantee);
                    }
                }
            }
        }
    }
}
