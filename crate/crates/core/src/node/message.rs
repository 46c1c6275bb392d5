//! Peer wire format. A frame is a 4-byte big-endian payload length, a
//! 1-byte message tag, then the canonical payload.

use serde::Serialize;
use thiserror::Error;

use crate::consensus::{Proposal, Validation};
use crate::ledger::codec::put_u32;
use crate::ledger::types::Blob;
use crate::ledger::{Canonical, DecodeError, Hash32, LedgerHeader, Reader, Transaction};
use crate::sqlvm::{ApplyResult, RejectReason};

pub const TAG_TX_SUBMIT: u8 = 0;
pub const TAG_PROPOSAL: u8 = 1;
pub const TAG_VALIDATION: u8 = 2;
pub const TAG_LEDGER_REQUEST: u8 = 3;
pub const TAG_LEDGER_DATA: u8 = 4;
pub const TAG_INFO: u8 = 5;

pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("frame shorter than its header")]
    Truncated,
    #[error("frame length {declared} does not match {actual} payload bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("payload: {0}")]
    Payload(#[from] DecodeError),
}

/// A checkpoint shipped to a peer that cannot be served from ledger 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointData {
    pub ledger_seq: u64,
    /// Header hash of ledger `ledger_seq`; the shipped suffix must extend it.
    pub anchor_hash: Hash32,
    pub snapshot_hash: Hash32,
    pub snapshot: Vec<u8>,
}

impl Canonical for CheckpointData {
    fn encode(&self, out: &mut Vec<u8>) {
        self.ledger_seq.encode(out);
        self.anchor_hash.encode(out);
        self.snapshot_hash.encode(out);
        Blob(self.snapshot.clone()).encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            ledger_seq: u64::decode(r)?,
            anchor_hash: Hash32::decode(r)?,
            snapshot_hash: Hash32::decode(r)?,
            snapshot: r.bytes()?,
        })
    }
}

/// Reply to a ledger request. Ledgers travel as opaque canonical bytes so
/// the receiver can tell a malformed block from a broken chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerData {
    /// The sender's validated tip; its `state_hash` is the advertised state.
    pub tip: LedgerHeader,
    pub checkpoint: Option<CheckpointData>,
    pub ledgers: Vec<Blob>,
}

impl Canonical for LedgerData {
    fn encode(&self, out: &mut Vec<u8>) {
        self.tip.encode(out);
        self.checkpoint.encode(out);
        self.ledgers.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self { tip: LedgerHeader::decode(r)?, checkpoint: Option::decode(r)?, ledgers: Vec::decode(r)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitError {
    /// The node does not accept client traffic (a backup before promotion).
    NotServing,
    BadSignature,
    Malformed,
    Duplicate,
    BadSeq,
}

impl SubmitError {
    fn tag(self) -> u8 {
        match self {
            SubmitError::NotServing => 0,
            SubmitError::BadSignature => 1,
            SubmitError::Malformed => 2,
            SubmitError::Duplicate => 3,
            SubmitError::BadSeq => 4,
        }
    }
}

impl std::fmt::Display for SubmitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SubmitError::NotServing => "not_serving",
            SubmitError::BadSignature => "bad_signature",
            SubmitError::Malformed => "malformed",
            SubmitError::Duplicate => "duplicate",
            SubmitError::BadSeq => "bad_seq",
        })
    }
}

impl std::error::Error for SubmitError {}

impl Canonical for SubmitError {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.tag());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            0 => SubmitError::NotServing,
            1 => SubmitError::BadSignature,
            2 => SubmitError::Malformed,
            3 => SubmitError::Duplicate,
            4 => SubmitError::BadSeq,
            tag => return Err(DecodeError::InvalidTag { ty: "submit error", tag }),
        })
    }
}

const REJECT_REASONS: [RejectReason; 7] = [
    RejectReason::BadSeq,
    RejectReason::NoSuchTable,
    RejectReason::TableExists,
    RejectReason::TypeMismatch,
    RejectReason::PermissionDenied,
    RejectReason::MissingColumn,
    RejectReason::Malformed,
];

fn encode_apply_result(r: &ApplyResult, out: &mut Vec<u8>) {
    match r {
        ApplyResult::Applied => out.push(0),
        ApplyResult::Rejected(reason) => {
            out.push(1);
            out.push(REJECT_REASONS.iter().position(|x| x == reason).expect("listed") as u8);
        }
    }
}

fn decode_apply_result(r: &mut Reader<'_>) -> Result<ApplyResult, DecodeError> {
    match r.u8()? {
        0 => Ok(ApplyResult::Applied),
        1 => {
            let tag = r.u8()?;
            let reason =
                REJECT_REASONS.get(tag as usize).ok_or(DecodeError::InvalidTag { ty: "reject reason", tag })?;
            Ok(ApplyResult::Rejected(*reason))
        }
        tag => Err(DecodeError::InvalidTag { ty: "apply result", tag }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TxStatus {
    Unknown,
    Pending,
    Validated { ledger_seq: u64, result: ApplyResult },
}

impl Canonical for TxStatus {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            TxStatus::Unknown => out.push(0),
            TxStatus::Pending => out.push(1),
            TxStatus::Validated { ledger_seq, result } => {
                out.push(2);
                ledger_seq.encode(out);
                encode_apply_result(result, out);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            0 => TxStatus::Unknown,
            1 => TxStatus::Pending,
            2 => TxStatus::Validated { ledger_seq: u64::decode(r)?, result: decode_apply_result(r)? },
            tag => return Err(DecodeError::InvalidTag { ty: "tx status", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Info {
    /// `history_from` is the oldest ledger the sender can ship without a checkpoint.
    Heartbeat { validated_seq: u64, validated_hash: Hash32, state_hash: Hash32, voting: bool, history_from: u64 },
    SubmitAck { tx_id: Hash32, result: Result<(), SubmitError> },
    StatusQuery { tx_id: Hash32 },
    StatusReply { tx_id: Hash32, status: TxStatus },
}

impl Canonical for Info {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Info::Heartbeat { validated_seq, validated_hash, state_hash, voting, history_from } => {
                out.push(0);
                validated_seq.encode(out);
                validated_hash.encode(out);
                state_hash.encode(out);
                voting.encode(out);
                history_from.encode(out);
            }
            Info::SubmitAck { tx_id, result } => {
                out.push(1);
                tx_id.encode(out);
                result.err().encode(out);
            }
            Info::StatusQuery { tx_id } => {
                out.push(2);
                tx_id.encode(out);
            }
            Info::StatusReply { tx_id, status } => {
                out.push(3);
                tx_id.encode(out);
                status.encode(out);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            0 => Info::Heartbeat {
                validated_seq: u64::decode(r)?,
                validated_hash: Hash32::decode(r)?,
                state_hash: Hash32::decode(r)?,
                voting: bool::decode(r)?,
                history_from: u64::decode(r)?,
            },
            1 => {
                let tx_id = Hash32::decode(r)?;
                let err: Option<SubmitError> = Option::decode(r)?;
                Info::SubmitAck { tx_id, result: err.map_or(Ok(()), Err) }
            }
            2 => Info::StatusQuery { tx_id: Hash32::decode(r)? },
            3 => Info::StatusReply { tx_id: Hash32::decode(r)?, status: TxStatus::decode(r)? },
            tag => return Err(DecodeError::InvalidTag { ty: "info", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    TxSubmit(Transaction),
    Proposal(Proposal),
    Validation(Validation),
    LedgerRequest { from_seq: u64 },
    LedgerData(LedgerData),
    Info(Info),
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::TxSubmit(_) => TAG_TX_SUBMIT,
            Message::Proposal(_) => TAG_PROPOSAL,
            Message::Validation(_) => TAG_VALIDATION,
            Message::LedgerRequest { .. } => TAG_LEDGER_REQUEST,
            Message::LedgerData(_) => TAG_LEDGER_DATA,
            Message::Info(_) => TAG_INFO,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::TxSubmit(_) => "tx_submit",
            Message::Proposal(_) => "proposal",
            Message::Validation(_) => "validation",
            Message::LedgerRequest { .. } => "ledger_request",
            Message::LedgerData(_) => "ledger_data",
            Message::Info(_) => "info",
        }
    }

    fn encode_payload(&self, out: &mut Vec<u8>) {
        match self {
            Message::TxSubmit(tx) => tx.encode(out),
            Message::Proposal(p) => p.encode(out),
            Message::Validation(v) => v.encode(out),
            Message::LedgerRequest { from_seq } => from_seq.encode(out),
            Message::LedgerData(d) => d.encode(out),
            Message::Info(i) => i.encode(out),
        }
    }

    pub fn to_frame(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        self.encode_payload(&mut payload);
        let mut out = Vec::with_capacity(payload.len() + 5);
        put_u32(&mut out, u32::try_from(payload.len()).expect("frame exceeds u32 length"));
        out.push(self.tag());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_frame(frame: &[u8]) -> Result<Message, WireError> {
        if frame.len() < 5 {
            return Err(WireError::Truncated);
        }
        let declared = u32::from_be_bytes(frame[..4].try_into().expect("4 bytes")) as usize;
        if declared > MAX_FRAME {
            return Err(WireError::TooLarge(declared));
        }
        let payload = &frame[5..];
        if declared != payload.len() {
            return Err(WireError::LengthMismatch { declared, actual: payload.len() });
        }
        Ok(match frame[4] {
            TAG_TX_SUBMIT => Message::TxSubmit(Transaction::from_canonical_bytes(payload)?),
            TAG_PROPOSAL => Message::Proposal(Proposal::from_canonical_bytes(payload)?),
            TAG_VALIDATION => Message::Validation(Validation::from_canonical_bytes(payload)?),
            TAG_LEDGER_REQUEST => Message::LedgerRequest { from_seq: u64::from_canonical_bytes(payload)? },
            TAG_LEDGER_DATA => Message::LedgerData(LedgerData::from_canonical_bytes(payload)?),
            TAG_INFO => Message::Info(Info::from_canonical_bytes(payload)?),
            tag => return Err(WireError::UnknownTag(tag)),
        })
    }

    /// Length of the first complete frame in `buf`, if any.
    pub fn frame_len(buf: &[u8]) -> Option<usize> {
        if buf.len() < 5 {
            return None;
        }
        let declared = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
        let total = declared.checked_add(5)?;
        (buf.len() >= total).then_some(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{sign_transaction, Ed25519Signer, SqlOperation, TxBody, Signer};

    fn samples() -> Vec<Message> {
        let signer = Ed25519Signer::from_seed([3; 32]);
        let tx = sign_transaction(
            TxBody::new(signer.account_id(), 1, SqlOperation::DropTable { table: "t".into() }),
            &signer,
        )
        .unwrap();
        vec![
            Message::TxSubmit(tx.clone()),
            Message::LedgerRequest { from_seq: 9 },
            Message::LedgerData(LedgerData {
                tip: LedgerHeader {
                    seq: 3,
                    parent_hash: Hash32([1; 32]),
                    tx_set_hash: Hash32([2; 32]),
                    state_hash: Hash32([3; 32]),
                    close_time: 4,
                },
                checkpoint: Some(CheckpointData {
                    ledger_seq: 2,
                    anchor_hash: Hash32([5; 32]),
                    snapshot_hash: Hash32([6; 32]),
                    snapshot: vec![1, 2, 3],
                }),
                ledgers: vec![Blob(vec![9, 9])],
            }),
            Message::Info(Info::Heartbeat {
                validated_seq: 2,
                validated_hash: Hash32([7; 32]),
                state_hash: Hash32([8; 32]),
                voting: true,
                history_from: 1,
            }),
            Message::Info(Info::SubmitAck { tx_id: tx.tx_id(), result: Err(SubmitError::BadSeq) }),
            Message::Info(Info::SubmitAck { tx_id: tx.tx_id(), result: Ok(()) }),
            Message::Info(Info::StatusReply {
                tx_id: tx.tx_id(),
                status: TxStatus::Validated {
                    ledger_seq: 5,
                    result: ApplyResult::Rejected(RejectReason::PermissionDenied),
                },
            }),
        ]
    }

    #[test]
    fn frames_round_trip() {
        for m in samples() {
            let frame = m.to_frame();
            assert_eq!(frame[4], m.tag());
            assert_eq!(Message::frame_len(&frame), Some(frame.len()));
            assert_eq!(Message::from_frame(&frame).unwrap(), m);
        }
    }

    #[test]
    fn bad_frames() {
        let mut frame = Message::LedgerRequest { from_seq: 1 }.to_frame();
        assert_eq!(Message::from_frame(&frame[..3]), Err(WireError::Truncated));
        frame[4] = 77;
        assert_eq!(Message::from_frame(&frame), Err(WireError::UnknownTag(77)));
        frame.push(0);
        assert!(matches!(Message::from_frame(&frame), Err(WireError::LengthMismatch { .. })));
    }
}
