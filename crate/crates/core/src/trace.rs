//! Simulation traces, written and read as one JSON object per line.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crypto::Digest;

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad digest"))
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

/// Who raised a violation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "role", content = "id", rename_all = "kebab-case")]
pub enum Party {
    Client(u32),
    Context(usize),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Client(i) => write!(f, "client {i}"),
            Party::Context(x) => write!(f, "context instance {x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    /// A client sends an invoke (first attempt or retry).
    Invoke {
        client: u32,
        op_idx: u64,
        t_c: u64,
        #[serde(with = "hex_bytes")]
        op: Vec<u8>,
        dummy: bool,
        retry: bool,
    },
    /// A client accepted a reply.
    Response {
        client: u32,
        op_idx: u64,
        t: u64,
        q: u64,
        h: Digest,
        #[serde(with = "hex_bytes")]
        result: Vec<u8>,
    },
    Violation {
        party: Party,
        client: Option<u32>,
        op_idx: Option<u64>,
        reason: String,
    },
    /// Context-side execution of an operation (simulator introspection).
    Exec {
        instance: usize,
        client: u32,
        op_idx: u64,
        t: u64,
        t_ack: u64,
        q: u64,
        prev_h: Digest,
        h: Digest,
        #[serde(with = "hex_bytes")]
        op: Vec<u8>,
        #[serde(with = "hex_bytes")]
        result: Vec<u8>,
        dummy: bool,
        /// The sealed state containing this execution reached storage.
        committed: bool,
    },
    /// A retry answered from the context's result cache.
    CachedReply {
        instance: usize,
        client: u32,
        op_idx: u64,
        t: u64,
    },
    ContextRestart {
        instance: usize,
        lineage: usize,
        epoch: u64,
        version: Option<usize>,
    },
    Fork {
        instance: usize,
        from_instance: usize,
        lineage: usize,
        clients: Vec<u32>,
    },
    Route {
        client: u32,
        instance: usize,
    },
    Migrate {
        from_instance: usize,
        to_instance: usize,
    },
    Store {
        instance: usize,
        lineage: usize,
        version: usize,
    },
    Load {
        instance: usize,
        lineage: usize,
        version: Option<usize>,
    },
    /// A client gave up retrying.
    Stalled {
        client: u32,
        op_idx: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Position in the trace; totally orders all events.
    pub seq: u64,
    /// Simulated time in ticks.
    pub time: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, time: u64, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent { seq, time, kind });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn violations(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Violation { .. }))
    }

    pub fn first_violation(&self) -> Option<&TraceEvent> {
        self.violations().next()
    }

    /// Events strictly before `seq`.
    pub fn prefix(&self, seq: u64) -> Trace {
        Trace {
            events: self.events.iter().filter(|e| e.seq < seq).cloned().collect(),
        }
    }
}

impl FromStr for Trace {
    type Err = serde_json::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let events = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<TraceEvent>, _>>()?;
        Ok(Trace { events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut t = Trace::default();
        t.push(
            3,
            EventKind::Response {
                client: 1,
                op_idx: 0,
                t: 1,
                q: 0,
                h: Digest([1; 32]),
                result: vec![0],
            },
        );
        t.push(
            4,
            EventKind::Violation {
                party: Party::Context(0),
                client: Some(2),
                op_idx: Some(1),
                reason: "view mismatch".into(),
            },
        );
        let text = t.to_jsonl();
        assert!(text.lines().next().unwrap().contains("\"kind\":\"response\""));
        let back: Trace = text.parse().unwrap();
        assert_eq!(back, t);
        assert_eq!(back.first_violation().unwrap().seq, 1);
        assert_eq!(back.prefix(1).events.len(), 1);
    }
}
