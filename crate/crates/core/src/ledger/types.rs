use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::codec::{put_bytes, Canonical, DecodeError, Reader};

pub const MAX_NAME_LEN: usize = 64;
pub const MAX_TEXT_BYTES: usize = 1024;

/// SHA-256 digest of `data`.
pub fn hash32(data: &[u8]) -> Hash32 {
    Hash32(Sha256::digest(data).into())
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0u8; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash32({})", self.short())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid hex identifier: {0}")]
pub struct ParseIdError(pub String);

impl FromStr for Hash32 {
    type Err = ParseIdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out).map_err(|_| ParseIdError(s.to_string()))?;
        Ok(Hash32(out))
    }
}

impl Canonical for Hash32 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Hash32(r.array()?))
    }
}

impl Serialize for Hash32 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 20-byte account identifier: the leading bytes of the hash of the
/// account's canonical public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct AccountId(pub [u8; 20]);

impl AccountId {
    pub fn from_public_key_bytes(canonical_pk: &[u8]) -> Self {
        let h = hash32(canonical_pk);
        let mut out = [0u8; 20];
        out.copy_from_slice(&h.0[..20]);
        AccountId(out)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccountId({})", hex::encode(&self.0[..4]))
    }
}

impl FromStr for AccountId {
    type Err = ParseIdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 20];
        hex::decode_to_slice(s.trim(), &mut out).map_err(|_| ParseIdError(s.to_string()))?;
        Ok(AccountId(out))
    }
}

impl Canonical for AccountId {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(AccountId(r.array()?))
    }
}

impl Serialize for AccountId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ColumnType {
    Int,
    Text,
}

impl ColumnType {
    pub fn keyword(self) -> &'static str {
        match self {
            ColumnType::Int => "INT",
            ColumnType::Text => "TEXT",
        }
    }
}

impl Canonical for ColumnType {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(match self {
            ColumnType::Int => 0,
            ColumnType::Text => 1,
        });
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(ColumnType::Int),
            1 => Ok(ColumnType::Text),
            tag => Err(DecodeError::InvalidTag { ty: "column type", tag }),
        }
    }
}

/// A cell value. INT is signed 64-bit, TEXT is UTF-8 of at most 1 KiB;
/// there is no NULL.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Literal {
    Int(i64),
    Text(String),
}

impl Literal {
    pub fn column_type(&self) -> ColumnType {
        match self {
            Literal::Int(_) => ColumnType::Int,
            Literal::Text(_) => ColumnType::Text,
        }
    }
}

impl fmt::Display for Literal {
    /// SQL literal syntax: integers bare, text single-quoted with `''` escape.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(v) => write!(f, "{v}"),
            Literal::Text(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

impl Serialize for Literal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Literal::Int(v) => s.serialize_i64(*v),
            Literal::Text(t) => s.serialize_str(t),
        }
    }
}

impl Canonical for Literal {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Literal::Int(v) => {
                out.push(0);
                v.encode(out);
            }
            Literal::Text(s) => {
                out.push(1);
                s.encode(out);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Literal::Int(i64::decode(r)?)),
            1 => Ok(Literal::Text(String::decode(r)?)),
            tag => Err(DecodeError::InvalidTag { ty: "literal", tag }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ColumnDef {
    pub name: String,
    pub ty: ColumnType,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, ty: ColumnType) -> Self {
        Self { name: name.into(), ty }
    }
}

impl Canonical for ColumnDef {
    fn encode(&self, out: &mut Vec<u8>) {
        self.name.encode(out);
        self.ty.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self { name: String::decode(r)?, ty: ColumnType::decode(r)? })
    }
}

/// Equality predicate `column = value`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Predicate {
    pub column: String,
    pub value: Literal,
}

impl Predicate {
    pub fn eq(column: impl Into<String>, value: Literal) -> Self {
        Self { column: column.into(), value }
    }
}

impl Canonical for Predicate {
    fn encode(&self, out: &mut Vec<u8>) {
        self.column.encode(out);
        self.value.encode(out);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self { column: String::decode(r)?, value: Literal::decode(r)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Perm {
    Select,
    Insert,
    Update,
    Delete,
}

impl Perm {
    pub const ALL: [Perm; 4] = [Perm::Select, Perm::Insert, Perm::Update, Perm::Delete];

    fn bit(self) -> u8 {
        match self {
            Perm::Select => 1,
            Perm::Insert => 2,
            Perm::Update => 4,
            Perm::Delete => 8,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Perm::Select => "SELECT",
            Perm::Insert => "INSERT",
            Perm::Update => "UPDATE",
            Perm::Delete => "DELETE",
        }
    }
}

/// Subset of {select, insert, update, delete}, encoded as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PermSet(u8);

impl PermSet {
    pub const EMPTY: PermSet = PermSet(0);
    pub const ALL: PermSet = PermSet(0b1111);

    pub fn contains(self, p: Perm) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn with(self, p: Perm) -> Self {
        PermSet(self.0 | p.bit())
    }

    pub fn union(self, other: PermSet) -> Self {
        PermSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Perm> {
        Perm::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl FromIterator<Perm> for PermSet {
    fn from_iter<I: IntoIterator<Item = Perm>>(iter: I) -> Self {
        iter.into_iter().fold(PermSet::EMPTY, PermSet::with)
    }
}

impl fmt::Debug for PermSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Canonical for PermSet {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let bits = r.u8()?;
        if bits & !PermSet::ALL.0 != 0 {
            return Err(DecodeError::Invalid(format!("permission bits {bits:#x}")));
        }
        Ok(PermSet(bits))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpError {
    #[error("invalid identifier {0:?}")]
    InvalidName(String),
    #[error("duplicate column {0:?}")]
    DuplicateColumn(String),
    #[error("CREATE TABLE needs at least one column")]
    NoColumns,
    #[error("UPDATE needs a nonempty SET list")]
    EmptySet,
    #[error("GRANT needs at least one permission")]
    EmptyGrant,
    #[error("INSERT needs at least one value")]
    EmptyInsert,
    #[error("TEXT literal exceeds {MAX_TEXT_BYTES} bytes")]
    TextTooLong,
}

/// `[a-zA-Z_][a-zA-Z0-9_]*`, nonempty, at most 64 characters.
pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    name.len() <= MAX_NAME_LEN && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn check_name(name: &str) -> Result<(), OpError> {
    if is_valid_name(name) {
        Ok(())
    } else {
        Err(OpError::InvalidName(name.to_string()))
    }
}

fn check_literal(lit: &Literal) -> Result<(), OpError> {
    match lit {
        Literal::Text(s) if s.len() > MAX_TEXT_BYTES => Err(OpError::TextTooLong),
        _ => Ok(()),
    }
}

fn check_predicates(filter: &[Predicate]) -> Result<(), OpError> {
    for p in filter {
        check_name(&p.column)?;
        check_literal(&p.value)?;
    }
    Ok(())
}

fn check_assignments(values: &BTreeMap<String, Literal>) -> Result<(), OpError> {
    for (col, lit) in values {
        check_name(col)?;
        check_literal(lit)?;
    }
    Ok(())
}

/// The closed set of data-definition and data-manipulation operations
/// recorded on the chain.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SqlOperation {
    CreateTable { table: String, columns: Vec<ColumnDef> },
    DropTable { table: String },
    Insert { table: String, values: BTreeMap<String, Literal> },
    Update { table: String, filter: Vec<Predicate>, set: BTreeMap<String, Literal> },
    Delete { table: String, filter: Vec<Predicate> },
    Grant { table: String, grantee: AccountId, perms: PermSet },
}

impl SqlOperation {
    pub fn table(&self) -> &str {
        match self {
            SqlOperation::CreateTable { table, .. }
            | SqlOperation::DropTable { table }
            | SqlOperation::Insert { table, .. }
            | SqlOperation::Update { table, .. }
            | SqlOperation::Delete { table, .. }
            | SqlOperation::Grant { table, .. } => table,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SqlOperation::CreateTable { .. } => "create_table",
            SqlOperation::DropTable { .. } => "drop_table",
            SqlOperation::Insert { .. } => "insert",
            SqlOperation::Update { .. } => "update",
            SqlOperation::Delete { .. } => "delete",
            SqlOperation::Grant { .. } => "grant",
        }
    }

    /// Structural checks that do not depend on any table schema.
    pub fn validate(&self) -> Result<(), OpError> {
        check_name(self.table())?;
        match self {
            SqlOperation::CreateTable { columns, .. } => {
                if columns.is_empty() {
                    return Err(OpError::NoColumns);
                }
                for (i, c) in columns.iter().enumerate() {
                    check_name(&c.name)?;
                    if columns[..i].iter().any(|o| o.name == c.name) {
                        return Err(OpError::DuplicateColumn(c.name.clone()));
                    }
                }
                Ok(())
            }
            SqlOperation::DropTable { .. } => Ok(()),
            SqlOperation::Insert { values, .. } => {
                if values.is_empty() {
                    return Err(OpError::EmptyInsert);
                }
                check_assignments(values)
            }
            SqlOperation::Update { filter, set, .. } => {
                if set.is_empty() {
                    return Err(OpError::EmptySet);
                }
                check_predicates(filter)?;
                check_assignments(set)
            }
            SqlOperation::Delete { filter, .. } => check_predicates(filter),
            SqlOperation::Grant { perms, .. } => {
                if perms.is_empty() {
                    Err(OpError::EmptyGrant)
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl Canonical for SqlOperation {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            SqlOperation::CreateTable { table, columns } => {
                out.push(0);
                table.encode(out);
                columns.encode(out);
            }
            SqlOperation::DropTable { table } => {
                out.push(1);
                table.encode(out);
            }
            SqlOperation::Insert { table, values } => {
                out.push(2);
                table.encode(out);
                values.encode(out);
            }
            SqlOperation::Update { table, filter, set } => {
                out.push(3);
                table.encode(out);
                filter.encode(out);
                set.encode(out);
            }
            SqlOperation::Delete { table, filter } => {
                out.push(4);
                table.encode(out);
                filter.encode(out);
            }
            SqlOperation::Grant { table, grantee, perms } => {
                out.push(5);
                table.encode(out);
                grantee.encode(out);
                perms.encode(out);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let op = match r.u8()? {
            0 => SqlOperation::CreateTable { table: String::decode(r)?, columns: Vec::decode(r)? },
            1 => SqlOperation::DropTable { table: String::decode(r)? },
            2 => SqlOperation::Insert { table: String::decode(r)?, values: BTreeMap::decode(r)? },
            3 => SqlOperation::Update {
                table: String::decode(r)?,
                filter: Vec::decode(r)?,
                set: BTreeMap::decode(r)?,
            },
            4 => SqlOperation::Delete { table: String::decode(r)?, filter: Vec::decode(r)? },
            5 => SqlOperation::Grant {
                table: String::decode(r)?,
                grantee: AccountId::decode(r)?,
                perms: PermSet::decode(r)?,
            },
            tag => return Err(DecodeError::InvalidTag { ty: "sql operation", tag }),
        };
        Ok(op)
    }
}

/// Raw blob wrapper, encoded as a length-prefixed byte string.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Blob(pub Vec<u8>);

impl Canonical for Blob {
    fn encode(&self, out: &mut Vec<u8>) {
        put_bytes(out, &self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Blob(r.bytes()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_empty_vector() {
        assert_eq!(
            hash32(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn sha256_abc_vector() {
        assert_eq!(
            hash32(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn name_rules() {
        assert!(is_valid_name("_a1"));
        assert!(is_valid_name(&"x".repeat(64)));
        assert!(!is_valid_name(&"x".repeat(65)));
        assert!(!is_valid_name(""));
        assert!(!is_valid_name("1abc"));
        assert!(!is_valid_name("a-b"));
    }

    #[test]
    fn insert_construction_order_does_not_matter() {
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), Literal::Int(1));
        a.insert("y".to_string(), Literal::Text("v".into()));
        let mut b = BTreeMap::new();
        b.insert("y".to_string(), Literal::Text("v".into()));
        b.insert("x".to_string(), Literal::Int(1));
        let op_a = SqlOperation::Insert { table: "t".into(), values: a };
        let op_b = SqlOperation::Insert { table: "t".into(), values: b };
        assert_eq!(op_a.to_canonical_bytes(), op_b.to_canonical_bytes());
    }

    #[test]
    fn empty_insert_map_is_tag_then_table_then_zero_length() {
        let op = SqlOperation::Insert { table: "t".into(), values: BTreeMap::new() };
        assert_eq!(op.to_canonical_bytes(), vec![2, 0, 0, 0, 1, b't', 0, 0, 0, 0]);
    }

    #[test]
    fn validate_rejects_structural_problems() {
        let dup = SqlOperation::CreateTable {
            table: "t".into(),
            columns: vec![ColumnDef::new("a", ColumnType::Int), ColumnDef::new("a", ColumnType::Text)],
        };
        assert_eq!(dup.validate(), Err(OpError::DuplicateColumn("a".into())));
        let empty_set = SqlOperation::Update { table: "t".into(), filter: vec![], set: BTreeMap::new() };
        assert_eq!(empty_set.validate(), Err(OpError::EmptySet));
        let long = SqlOperation::Delete {
            table: "t".into(),
            filter: vec![Predicate::eq("a", Literal::Text("x".repeat(1025)))],
        };
        assert_eq!(long.validate(), Err(OpError::TextTooLong));
    }
}
