//! Offline consistency checks over simulation traces.
//!
//! The checks only read [`Trace`] events. Client-visible events (invokes and
//! responses) give the history; context-side `exec` events give the hash
//! chain, from which each client's view is rebuilt by walking back from the
//! last digest it accepted.

pub mod fork;
pub mod linearizability;
pub mod stability;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::crypto::Digest;
use crate::kvs::{KvsOperation, KvsResult};
use crate::trace::{EventKind, Trace};

pub use fork::{check_fork_linearizable, ForkReport, ForkWitness};
pub use linearizability::{is_linearizable, non_linearizable_key, HistoryOp};
pub use stability::{check_stable_prefix, q_monotone, q_samples, QSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OpId {
    pub client: u32,
    pub op_idx: u64,
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client {} op {}", self.client, self.op_idx)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("not fork-linearizable: {0}")]
    NotForkLinearizable(ForkWitness),
    #[error("history not linearizable on key {}", String::from_utf8_lossy(.0))]
    NotLinearizable(Vec<u8>),
    #[error("stable operations diverge: digest {a} vs {b} at t={t}")]
    StableDivergence { t: u64, a: Digest, b: Digest },
}

fn malformed(msg: impl Into<String>) -> CheckError {
    CheckError::MalformedTrace(msg.into())
}

#[derive(Clone, Debug)]
pub(crate) struct InvokeRec {
    pub seq: u64,
    pub op: Vec<u8>,
    pub dummy: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct ResponseRec {
    pub seq: u64,
    pub t: u64,
    pub q: u64,
    pub h: Digest,
    pub result: Vec<u8>,
}

#[derive(Clone, Debug)]
pub(crate) struct ExecRec {
    pub seq: u64,
    pub id: OpId,
    pub t: u64,
    pub t_ack: u64,
    pub q: u64,
    pub prev_h: Digest,
    pub h: Digest,
    pub op: Vec<u8>,
    pub result: Vec<u8>,
    pub dummy: bool,
}

/// Everything the checks need, indexed once.
pub(crate) struct Index {
    pub invokes: BTreeMap<OpId, InvokeRec>,
    pub responses: BTreeMap<OpId, ResponseRec>,
    pub execs: Vec<ExecRec>,
    pub by_digest: HashMap<Digest, usize>,
}

impl Index {
    pub fn build(trace: &Trace) -> Result<Self, CheckError> {
        let mut idx = Index {
            invokes: BTreeMap::new(),
            responses: BTreeMap::new(),
            execs: Vec::new(),
            by_digest: HashMap::new(),
        };
        for e in &trace.events {
            match &e.kind {
                EventKind::Invoke {
                    client,
                    op_idx,
                    op,
                    dummy,
                    ..
                } => {
                    let id = OpId {
                        client: *client,
                        op_idx: *op_idx,
                    };
                    idx.invokes.entry(id).or_insert(InvokeRec {
                        seq: e.seq,
                        op: op.clone(),
                        dummy: *dummy,
                    });
                }
                EventKind::Response {
                    client,
                    op_idx,
                    t,
                    q,
                    h,
                    result,
                } => {
                    let id = OpId {
                        client: *client,
                        op_idx: *op_idx,
                    };
                    if !idx.invokes.contains_key(&id) {
                        return Err(malformed(format!("response without invoke for {id}")));
                    }
                    let rec = ResponseRec {
                        seq: e.seq,
                        t: *t,
                        q: *q,
                        h: *h,
                        result: result.clone(),
                    };
                    if idx.responses.insert(id, rec).is_some() {
                        return Err(malformed(format!("two responses for {id}")));
                    }
                }
                EventKind::Exec {
                    client,
                    op_idx,
                    t,
                    t_ack,
                    q,
                    prev_h,
                    h,
                    op,
                    result,
                    dummy,
                    ..
                } => {
                    let rec = ExecRec {
                        seq: e.seq,
                        id: OpId {
                            client: *client,
                            op_idx: *op_idx,
                        },
                        t: *t,
                        t_ack: *t_ack,
                        q: *q,
                        prev_h: *prev_h,
                        h: *h,
                        op: op.clone(),
                        result: result.clone(),
                        dummy: *dummy,
                    };
                    // identical executions in two forks produce the same node
                    idx.by_digest.entry(rec.h).or_insert(idx.execs.len());
                    idx.execs.push(rec);
                }
                _ => {}
            }
        }
        Ok(idx)
    }

    /// Chain from the first operation up to and including `h`; position
    /// `k` holds the node with `t = k + 1`.
    pub fn path_to(&self, h: Digest) -> Result<Vec<&ExecRec>, CheckError> {
        let mut path = Vec::new();
        let mut cur = h;
        while cur != Digest::ZERO {
            let &i = self
                .by_digest
                .get(&cur)
                .ok_or_else(|| malformed(format!("no execution produced digest {cur}")))?;
            let node = &self.execs[i];
            path.push(node);
            cur = node.prev_h;
        }
        path.reverse();
        if path.iter().enumerate().any(|(k, n)| n.t != k as u64 + 1) {
            return Err(malformed(format!("chain ending at {h} skips a sequence number")));
        }
        Ok(path)
    }

    /// Client-visible history of non-dummy operations.
    pub fn history(&self) -> Result<Vec<HistoryOp>, CheckError> {
        let mut out = Vec::new();
        for (id, inv) in &self.invokes {
            if inv.dummy {
                continue;
            }
            let op = KvsOperation::decode(&inv.op).map_err(|_| malformed(format!("undecodable op for {id}")))?;
            let resp = self.responses.get(id);
            let result = resp
                .map(|r| KvsResult::decode(&r.result))
                .transpose()
                .map_err(|_| malformed(format!("undecodable result for {id}")))?;
            out.push(HistoryOp {
                id: *id,
                op,
                result,
                invoke: inv.seq,
                response: resp.map(|r| r.seq),
            });
        }
        Ok(out)
    }
}

/// Plain linearizability of the client-visible history. Only meaningful for
/// runs without forks.
pub fn check_linearizable(trace: &Trace) -> Result<(), CheckError> {
    let history = Index::build(trace)?.history()?;
    match non_linearizable_key(&history) {
        None => Ok(()),
        Some(key) => Err(CheckError::NotLinearizable(key)),
    }
}

/// Inconsistencies the clients accepted without noticing: the trace up to
/// (excluding) the first violation must be fork-linearizable with a common
/// stable prefix.
pub fn check_undetected(trace: &Trace) -> Result<(), CheckError> {
    let prefix = match trace.first_violation() {
        Some(v) => trace.prefix(v.seq),
        None => trace.clone(),
    };
    check_fork_linearizable(&prefix)?;
    check_stable_prefix(&prefix)
}
