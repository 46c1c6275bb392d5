use std::cmp::Ordering;

use super::codec::{put_bytes, Canonical, DecodeError, Reader};
use super::crypto::{PublicKey, Signer};
use super::types::{hash32, AccountId, Hash32, SqlOperation};
use super::LedgerError;

/// The signed part of a transaction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxBody {
    pub account: AccountId,
    pub seq: u64,
    pub op: SqlOperation,
}

impl TxBody {
    pub fn new(account: AccountId, seq: u64, op: SqlOperation) -> Self {
        Self { account, seq, op }
    }

    pub fn tx_id(&self) -> Hash32 {
        hash32(&self.to_canonical_bytes())
    }
}

impl Canonical for TxBody {
    fn encode(&self, out: &mut Vec<u8>) {
        self.account.encode(out);
        self.seq.encode(out);
        self.op.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self { account: AccountId::decode(r)?, seq: u64::decode(r)?, op: SqlOperation::decode(r)? })
    }
}

/// A signed, per-account-sequenced operation. The id is cached and always
/// equals the hash of the canonical body.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transaction {
    body: TxBody,
    public_key: PublicKey,
    signature: Vec<u8>,
    tx_id: Hash32,
}

impl Transaction {
    pub fn body(&self) -> &TxBody {
        &self.body
    }

    pub fn account(&self) -> AccountId {
        self.body.account
    }

    pub fn seq(&self) -> u64 {
        self.body.seq
    }

    pub fn op(&self) -> &SqlOperation {
        &self.body.op
    }

    pub fn tx_id(&self) -> Hash32 {
        self.tx_id
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    pub fn signature(&self) -> &[u8] {
        &self.signature
    }

    /// Checks the embedded public key against the account and the signature.
    pub fn verify(&self) -> bool {
        verify_signature(self, &self.public_key)
    }

    /// Key used by canonical block ordering: account bytes, then seq, then id.
    pub fn order_key(&self) -> (AccountId, u64, Hash32) {
        (self.body.account, self.body.seq, self.tx_id)
    }

    /// Reassembles a transaction from parts without checking the signature.
    pub fn from_parts(body: TxBody, public_key: PublicKey, signature: Vec<u8>) -> Self {
        let tx_id = body.tx_id();
        Self { body, public_key, signature, tx_id }
    }
}

impl Ord for Transaction {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_key()
            .cmp(&other.order_key())
            .then_with(|| self.to_canonical_bytes().cmp(&other.to_canonical_bytes()))
    }
}

impl PartialOrd for Transaction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Canonical for Transaction {
    fn encode(&self, out: &mut Vec<u8>) {
        self.body.encode(out);
        self.public_key.encode(out);
        put_bytes(out, &self.signature);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let body = TxBody::decode(r)?;
        let public_key = PublicKey::decode(r)?;
        let signature = r.bytes()?;
        Ok(Self::from_parts(body, public_key, signature))
    }
}

/// Signs `body` after structural validation of its operation.
pub fn sign_transaction(body: TxBody, signer: &dyn Signer) -> Result<Transaction, LedgerError> {
    body.op.validate().map_err(LedgerError::MalformedOp)?;
    if body.seq == 0 {
        return Err(LedgerError::ZeroSeq);
    }
    let public_key = signer.public_key();
    if public_key.account_id() != body.account {
        return Err(LedgerError::AccountKeyMismatch);
    }
    let tx_id = body.tx_id();
    let signature = signer.sign(&tx_id.0);
    Ok(Transaction { body, public_key, signature, tx_id })
}

/// True iff `public_key` belongs to the transaction's account and signed
/// its id.
pub fn verify_signature(tx: &Transaction, public_key: &PublicKey) -> bool {
    public_key.account_id() == tx.body.account
        && tx.body.tx_id() == tx.tx_id
        && public_key.verify(&tx.tx_id.0, &tx.signature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::crypto::Ed25519Signer;

    fn op() -> SqlOperation {
        SqlOperation::DropTable { table: "t".into() }
    }

    #[test]
    fn sign_then_verify() {
        let s = Ed25519Signer::from_seed([3; 32]);
        let tx = sign_transaction(TxBody::new(s.account_id(), 1, op()), &s).unwrap();
        assert!(tx.verify());
        assert!(verify_signature(&tx, &s.public_key()));
    }

    #[test]
    fn wrong_key_fails() {
        let a = Ed25519Signer::from_seed([3; 32]);
        let b = Ed25519Signer::from_seed([4; 32]);
        let tx = sign_transaction(TxBody::new(a.account_id(), 1, op()), &a).unwrap();
        assert!(!verify_signature(&tx, &b.public_key()));
    }

    #[test]
    fn signing_for_foreign_account_is_refused() {
        let a = Ed25519Signer::from_seed([3; 32]);
        let b = Ed25519Signer::from_seed([4; 32]);
        let err = sign_transaction(TxBody::new(b.account_id(), 1, op()), &a).unwrap_err();
        assert_eq!(err, LedgerError::AccountKeyMismatch);
    }

    #[test]
    fn decode_round_trip() {
        let s = Ed25519Signer::from_seed([3; 32]);
        let tx = sign_transaction(TxBody::new(s.account_id(), 9, op()), &s).unwrap();
        let back = Transaction::from_canonical_bytes(&tx.to_canonical_bytes()).unwrap();
        assert_eq!(back, tx);
        assert!(back.verify());
    }
}
