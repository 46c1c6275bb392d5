//! Transactions, blocks, canonical encoding, signatures and chain checks.

pub mod block;
pub mod codec;
pub mod crypto;
pub mod store;
pub mod tx;
pub mod types;

use thiserror::Error;

pub use block::{
    build_ledger, tx_set_hash, verify_chain, verify_chain_from, BrokenReason, ChainAnchor, ChainError, Ledger,
    LedgerHeader,
};
pub use codec::{canonical_deserialize, canonical_serialize, Canonical, DecodeError, Reader};
pub use crypto::{
    load_key_file, seed_from_label, signer_from_seed, Ed25519Signer, InsecureTestSigner, KeyError, PublicKey,
    SchemeId, SharedSigner, Signer,
};
pub use tx::{sign_transaction, verify_signature, Transaction, TxBody};
pub use types::{
    hash32, AccountId, ColumnDef, ColumnType, Hash32, Literal, OpError, Perm, PermSet, Predicate, SqlOperation,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("malformed operation: {0}")]
    MalformedOp(OpError),
    #[error("account sequence numbers start at 1")]
    ZeroSeq,
    #[error("signing key does not belong to the transaction account")]
    AccountKeyMismatch,
    #[error("transaction {0} has an invalid signature")]
    InvalidTransaction(Hash32),
}
