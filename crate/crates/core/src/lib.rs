//! A blockchain-backed log database: SQL-like operations are signed,
//! agreed on by a UNL consensus, chained into ledgers and replayed into a
//! deterministic table store.

pub mod ledger;
pub mod netsim;
pub mod consensus;
pub mod sqlvm;
pub mod node;
pub mod sql;
pub mod middleware;
pub mod sim;
