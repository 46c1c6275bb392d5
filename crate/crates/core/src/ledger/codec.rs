//! Canonical binary encoding used for every hashed or transmitted value.
//!
//! Layout rules:
//!
//! * integers are fixed-width big-endian;
//! * strings and byte blobs are a `u32` length followed by the raw bytes;
//! * lists are a `u32` element count followed by the elements;
//! * maps are a `u32` entry count followed by entries in strictly ascending
//!   key order (byte-lexicographic for string keys);
//! * sum types are a one-byte tag followed by the variant payload.
//!
//! Decoding is strict: unsorted or duplicate map keys, unknown tags,
//! invalid UTF-8 and trailing bytes are all rejected, so every accepted
//! byte string re-encodes to itself.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    UnexpectedEof,
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("invalid tag {tag} for {ty}")]
    InvalidTag { ty: &'static str, tag: u8 },
    #[error("invalid utf-8 in string")]
    InvalidUtf8,
    #[error("non-canonical encoding: {0}")]
    NonCanonical(&'static str),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Cursor over a byte slice being decoded.
#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::UnexpectedEof);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    /// Reads a length prefix and checks it against the remaining input,
    /// assuming each element occupies at least `min_elem` bytes.
    pub fn len_prefix(&mut self, min_elem: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem.max(1)) > self.remaining() && min_elem > 0 {
            return Err(DecodeError::UnexpectedEof);
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.len_prefix(1)?;
        Ok(self.take(n)?.to_vec())
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, u32::try_from(bytes.len()).expect("blob exceeds u32 length"));
    out.extend_from_slice(bytes);
}

/// A value with a single canonical byte representation.
pub trait Canonical: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError>;

    fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

/// Canonical bytes of any domain value.
pub fn canonical_serialize<T: Canonical>(value: &T) -> Vec<u8> {
    value.to_canonical_bytes()
}

pub fn canonical_deserialize<T: Canonical>(bytes: &[u8]) -> Result<T, DecodeError> {
    T::from_canonical_bytes(bytes)
}

impl Canonical for u8 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(*self);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.u8()
    }
}

impl Canonical for bool {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(u8::from(*self));
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::InvalidTag { ty: "bool", tag }),
        }
    }
}

impl Canonical for u32 {
    fn encode(&self, out: &mut Vec<u8>) {
        put_u32(out, *self);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.u32()
    }
}

impl Canonical for u64 {
    fn encode(&self, out: &mut Vec<u8>) {
        put_u64(out, *self);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.u64()
    }
}

impl Canonical for i64 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_be_bytes());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(i64::from_be_bytes(r.array()?))
    }
}

impl Canonical for String {
    fn encode(&self, out: &mut Vec<u8>) {
        put_bytes(out, self.as_bytes());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        String::from_utf8(r.bytes()?).map_err(|_| DecodeError::InvalidUtf8)
    }
}

impl<T: Canonical> Canonical for Option<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                v.encode(out);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode(r)?)),
            tag => Err(DecodeError::InvalidTag { ty: "option", tag }),
        }
    }
}

impl<T: Canonical> Canonical for Vec<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        put_u32(out, u32::try_from(self.len()).expect("list exceeds u32 length"));
        for item in self {
            item.encode(out);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.len_prefix(1)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(T::decode(r)?);
        }
        Ok(out)
    }
}

impl<K: Canonical + Ord, V: Canonical> Canonical for BTreeMap<K, V> {
    fn encode(&self, out: &mut Vec<u8>) {
        put_u32(out, u32::try_from(self.len()).expect("map exceeds u32 length"));
        for (k, v) in self {
            k.encode(out);
            v.encode(out);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.len_prefix(1)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let k = K::decode(r)?;
            let v = V::decode(r)?;
            if let Some((last, _)) = out.last_key_value() {
                if *last >= k {
                    return Err(DecodeError::NonCanonical("map keys not strictly ascending"));
                }
            }
            out.insert(k, v);
        }
        Ok(out)
    }
}

impl<T: Canonical + Ord> Canonical for BTreeSet<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        put_u32(out, u32::try_from(self.len()).expect("set exceeds u32 length"));
        for item in self {
            item.encode(out);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.len_prefix(1)?;
        let mut out = BTreeSet::new();
        for _ in 0..n {
            let item = T::decode(r)?;
            if let Some(last) = out.last() {
                if *last >= item {
                    return Err(DecodeError::NonCanonical("set items not strictly ascending"));
                }
            }
            out.insert(item);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map_is_only_a_length_prefix() {
        let m: BTreeMap<String, u64> = BTreeMap::new();
        assert_eq!(m.to_canonical_bytes(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn integers_are_big_endian() {
        assert_eq!(0x0102_0304u32.to_canonical_bytes(), vec![1, 2, 3, 4]);
        assert_eq!((-1i64).to_canonical_bytes(), vec![0xff; 8]);
    }

    #[test]
    fn unsorted_map_keys_are_rejected() {
        let mut bytes = Vec::new();
        put_u32(&mut bytes, 2);
        "b".to_string().encode(&mut bytes);
        1u64.encode(&mut bytes);
        "a".to_string().encode(&mut bytes);
        2u64.encode(&mut bytes);
        let err = BTreeMap::<String, u64>::from_canonical_bytes(&bytes).unwrap_err();
        assert!(matches!(err, DecodeError::NonCanonical(_)));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = 7u64.to_canonical_bytes();
        bytes.push(0);
        assert_eq!(u64::from_canonical_bytes(&bytes), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn huge_length_prefix_does_not_allocate() {
        let bytes = [0xff, 0xff, 0xff, 0xff, 1];
        assert_eq!(Vec::<u64>::from_canonical_bytes(&bytes), Err(DecodeError::UnexpectedEof));
    }

    #[test]
    fn map_order_is_byte_lexicographic() {
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), 1u8);
        m.insert("B".to_string(), 2u8);
        m.insert("a".to_string(), 3u8);
        let bytes = m.to_canonical_bytes();
        // "B" (0x42) < "a" (0x61) < "b" (0x62)
        assert_eq!(&bytes[4..10], &[0, 0, 0, 1, b'B', 2]);
    }
}
