//! Key-value store executed inside the trusted context.

use std::collections::BTreeMap;

use crate::context::Functionality;
use crate::wire::{put_bytes, Reader, WireError};

pub const MAX_KEY_LEN: usize = 1024;

const KIND_GET: u8 = 1;
const KIND_PUT: u8 = 2;
const KIND_DEL: u8 = 3;

const RES_OK: u8 = 0;
const RES_VALUE: u8 = 1;
const RES_NOT_FOUND: u8 = 2;
const RES_MALFORMED: u8 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum KvsOperation {
    Get { key: Vec<u8> },
    Put { key: Vec<u8>, value: Vec<u8> },
    Del { key: Vec<u8> },
}

impl KvsOperation {
    pub fn get(key: impl Into<Vec<u8>>) -> Self {
        Self::Get { key: key.into() }
    }

    pub fn put(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        Self::Put {
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn del(key: impl Into<Vec<u8>>) -> Self {
        Self::Del { key: key.into() }
    }

    pub fn key(&self) -> &[u8] {
        match self {
            Self::Get { key } | Self::Put { key, .. } | Self::Del { key } => key,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Self::Get { key } => {
                out.push(KIND_GET);
                put_bytes(&mut out, key);
            }
            Self::Put { key, value } => {
                out.push(KIND_PUT);
                put_bytes(&mut out, key);
                put_bytes(&mut out, value);
            }
            Self::Del { key } => {
                out.push(KIND_DEL);
                put_bytes(&mut out, key);
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let kind = r.u8("kvs kind")?;
        let key = r.bytes("kvs key")?.to_vec();
        if key.is_empty() || key.len() > MAX_KEY_LEN {
            return Err(WireError::MalformedMessage("kvs key length"));
        }
        let op = match kind {
            KIND_GET => Self::Get { key },
            KIND_PUT => Self::Put {
                key,
                value: r.bytes("kvs value")?.to_vec(),
            },
            KIND_DEL => Self::Del { key },
            _ => return Err(WireError::MalformedMessage("kvs kind")),
        };
        r.finish()?;
        Ok(op)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum KvsResult {
    Ok,
    Value(Vec<u8>),
    NotFound,
    /// The operation bytes did not decode. An application-level outcome,
    /// not a protocol violation.
    Malformed,
}

impl KvsResult {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Self::Ok => vec![RES_OK],
            Self::Value(v) => {
                let mut out = vec![RES_VALUE];
                put_bytes(&mut out, v);
                out
            }
            Self::NotFound => vec![RES_NOT_FOUND],
            Self::Malformed => vec![RES_MALFORMED],
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let res = match r.u8("kvs result")? {
            RES_OK => Self::Ok,
            RES_VALUE => Self::Value(r.bytes("kvs result value")?.to_vec()),
            RES_NOT_FOUND => Self::NotFound,
            RES_MALFORMED => Self::Malformed,
            _ => return Err(WireError::MalformedMessage("kvs result tag")),
        };
        r.finish()?;
        Ok(res)
    }
}

/// Flat ordered key-value map; ordering makes the serialized form canonical.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvsState {
    pub entries: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl KvsState {
    pub fn apply(&mut self, op: &KvsOperation) -> KvsResult {
        match op {
            KvsOperation::Get { key } => match self.entries.get(key) {
                Some(v) => KvsResult::Value(v.clone()),
                None => KvsResult::NotFound,
            },
            KvsOperation::Put { key, value } => {
                self.entries.insert(key.clone(), value.clone());
                KvsResult::Ok
            }
            KvsOperation::Del { key } => match self.entries.remove(key) {
                Some(_) => KvsResult::Ok,
                None => KvsResult::NotFound,
            },
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for (k, v) in &self.entries {
            put_bytes(&mut out, k);
            put_bytes(&mut out, v);
        }
        out
    }

    pub fn deserialize(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let count = r.u32("kvs count")?;
        let mut entries = BTreeMap::new();
        let mut prev: Option<Vec<u8>> = None;
        for _ in 0..count {
            let k = r.bytes("kvs key")?.to_vec();
            let v = r.bytes("kvs value")?.to_vec();
            if prev.as_ref().is_some_and(|p| *p >= k) {
                return Err(WireError::MalformedMessage("kvs keys not sorted"));
            }
            prev = Some(k.clone());
            entries.insert(k, v);
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

impl Functionality for KvsState {
    fn execute(&mut self, op_bytes: &[u8]) -> Vec<u8> {
        match KvsOperation::decode(op_bytes) {
            Ok(op) => self.apply(&op).encode(),
            Err(_) => KvsResult::Malformed.encode(),
        }
    }

    fn snapshot(&self) -> Vec<u8> {
        self.serialize()
    }

    fn restore(bytes: &[u8]) -> Result<Self, WireError> {
        Self::deserialize(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exec(s: &mut KvsState, op: KvsOperation) -> KvsResult {
        KvsResult::decode(&s.execute(&op.encode())).unwrap()
    }

    #[test]
    fn put_then_get() {
        let mut s = KvsState::default();
        assert_eq!(exec(&mut s, KvsOperation::put("k", "v")), KvsResult::Ok);
        assert_eq!(exec(&mut s, KvsOperation::get("k")), KvsResult::Value(b"v".to_vec()));
    }

    #[test]
    fn get_on_empty_store() {
        let mut s = KvsState::default();
        assert_eq!(exec(&mut s, KvsOperation::get("k")), KvsResult::NotFound);
    }

    #[test]
    fn del_reports_presence() {
        let mut s = KvsState::default();
        assert_eq!(exec(&mut s, KvsOperation::del("k")), KvsResult::NotFound);
        exec(&mut s, KvsOperation::put("k", "v"));
        assert_eq!(exec(&mut s, KvsOperation::del("k")), KvsResult::Ok);
        assert!(s.entries.is_empty());
    }

    #[test]
    fn malformed_is_a_result() {
        let mut s = KvsState::default();
        let r = KvsResult::decode(&s.execute(&[9, 0, 0])).unwrap();
        assert_eq!(r, KvsResult::Malformed);
        let empty_key = [KIND_GET, 0, 0, 0, 0];
        assert_eq!(KvsResult::decode(&s.execute(&empty_key)).unwrap(), KvsResult::Malformed);
    }

    #[test]
    fn oversized_key_rejected() {
        let op = KvsOperation::get(vec![b'a'; MAX_KEY_LEN + 1]);
        assert!(KvsOperation::decode(&op.encode()).is_err());
        let op = KvsOperation::get(vec![b'a'; MAX_KEY_LEN]);
        assert!(KvsOperation::decode(&op.encode()).is_ok());
    }

    #[test]
    fn serialization_is_canonical() {
        let mut a = KvsState::default();
        a.apply(&KvsOperation::put("b", "2"));
        a.apply(&KvsOperation::put("a", "1"));
        let mut b = KvsState::default();
        b.apply(&KvsOperation::put("a", "1"));
        b.apply(&KvsOperation::put("b", "2"));
        assert_eq!(a.serialize(), b.serialize());
        assert_eq!(KvsState::deserialize(&a.serialize()).unwrap(), a);
    }
}
