//! Client-side layers: a failover session with payload encryption, binlog
//! ingestion, and backup streaming into a recovery center.

pub mod binlog;
pub mod cipher;
pub mod client;
pub mod recovery;

pub use binlog::{ingest_binlog, parse_binlog, reference_execute, BinlogEntry, EntryError, IngestError, IngestReport, LineError};
pub use cipher::{
    decrypt_payload, decrypt_rows, encrypt_filter, encrypt_operation, encrypt_payload, CipherError, EncryptionMode,
    Keyring, PayloadCipher, SymmetricScheme,
};
pub use client::{ClientError, ClientSession, HandleRecord, HandleStatus, RetryPolicy, TxHandle};
pub use recovery::{
    measure_recovery, promote_backup, IntegrityAlarm, PromoteError, PromoteRequest, RecoveryCenter, RecoveryReport,
    ShipRecord, DEFAULT_RPO_WINDOW_MS,
};
