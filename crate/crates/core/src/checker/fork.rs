//! Fork-linearizability against the views the clients actually accepted.
//!
//! A client's view is the chain ending at the digest of its last response.
//! The trace is fork-linearizable when every view contains all of its
//! client's completed operations with the answers the client saw, replays
//! correctly from the empty store, respects real-time order, executes each
//! operation at most once, and any operation shared by two views sits on
//! the same chain node in both.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use crate::crypto::Digest;
use crate::kvs::{KvsOperation, KvsResult};

use super::{CheckError, ExecRec, Index, OpId};
use crate::trace::Trace;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ForkWitness {
    /// A completed operation is missing from its own client's view.
    MissingOwnOp { view: u32, op: OpId },
    /// The operation appears twice in one view.
    DuplicateExecution { view: u32, op: OpId },
    /// Replaying the view gives a different answer than the one recorded.
    WrongResult { view: u32, op: OpId },
    /// `later` completed before `earlier` was invoked but is ordered after it.
    RealTime { view: u32, earlier: OpId, later: OpId },
    /// The operation sits at different chain nodes in two views.
    Join { op: OpId, a: Digest, b: Digest },
}

impl fmt::Display for ForkWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForkWitness::MissingOwnOp { view, op } => write!(f, "{op} missing from view of client {view}"),
            ForkWitness::DuplicateExecution { view, op } => {
                write!(f, "{op} executed twice in view of client {view}")
            }
            ForkWitness::WrongResult { view, op } => write!(f, "{op} has a wrong result in view of client {view}"),
            ForkWitness::RealTime { view, earlier, later } => {
                write!(f, "view of client {view} orders {earlier} before {later}, against real time")
            }
            ForkWitness::Join { op, a, b } => write!(f, "{op} reached views through {a} and {b}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForkReport {
    /// Length of each client's view.
    pub views: BTreeMap<u32, u64>,
    /// Whether some two views are not prefixes of one another.
    pub forked: bool,
}

pub fn check_fork_linearizable(trace: &Trace) -> Result<ForkReport, CheckError> {
    let idx = Index::build(trace)?;
    let mut report = ForkReport::default();
    let mut last: BTreeMap<u32, (OpId, Digest)> = BTreeMap::new();
    for (id, r) in &idx.responses {
        // responses iterate in op order, so the last one wins
        last.insert(id.client, (*id, r.h));
    }

    let mut placed: HashMap<OpId, Digest> = HashMap::new();
    let mut tips: Vec<Vec<Digest>> = Vec::new();
    for (&client, &(_, tip)) in &last {
        let path = idx.path_to(tip)?;
        report.views.insert(client, path.len() as u64);
        check_view(&idx, client, &path)?;
        for node in &path {
            match placed.get(&node.id) {
                Some(&other) if other != node.h => {
                    return Err(CheckError::NotForkLinearizable(ForkWitness::Join {
                        op: node.id,
                        a: other,
                        b: node.h,
                    }))
                }
                _ => {
                    placed.insert(node.id, node.h);
                }
            }
        }
        tips.push(path.iter().map(|n| n.h).collect());
    }

    report.forked = tips.iter().enumerate().any(|(i, a)| {
        tips[i + 1..].iter().any(|b| {
            let n = a.len().min(b.len());
            n > 0 && a[n - 1] != b[n - 1]
        })
    });
    Ok(report)
}

fn check_view(idx: &Index, view: u32, path: &[&ExecRec]) -> Result<(), CheckError> {
    let fail = |w| Err(CheckError::NotForkLinearizable(w));

    for (id, r) in idx.responses.range(OpId { client: view, op_idx: 0 }..=OpId { client: view, op_idx: u64::MAX }) {
        let node = r.t.checked_sub(1).and_then(|k| path.get(k as usize));
        if !node.is_some_and(|n| n.id == *id && n.h == r.h && n.result == r.result) {
            return fail(ForkWitness::MissingOwnOp { view, op: *id });
        }
    }

    let mut seen = HashSet::new();
    for node in path {
        if !seen.insert(node.id) {
            return fail(ForkWitness::DuplicateExecution { view, op: node.id });
        }
    }

    let mut store: HashMap<Vec<u8>, Vec<u8>> = HashMap::new();
    for node in path.iter().filter(|n| !n.dummy) {
        let expected = match KvsOperation::decode(&node.op) {
            Ok(KvsOperation::Get { key }) => store.get(&key).cloned().map_or(KvsResult::NotFound, KvsResult::Value),
            Ok(KvsOperation::Put { key, value }) => {
                store.insert(key, value);
                KvsResult::Ok
            }
            Ok(KvsOperation::Del { key }) => match store.remove(&key) {
                Some(_) => KvsResult::Ok,
                None => KvsResult::NotFound,
            },
            Err(_) => KvsResult::Malformed,
        };
        if expected.encode() != node.result {
            return fail(ForkWitness::WrongResult { view, op: node.id });
        }
    }

    let mut latest_invoke: Option<(u64, OpId)> = None;
    for node in path {
        if let (Some((inv, earlier)), Some(resp)) = (latest_invoke, idx.responses.get(&node.id)) {
            if resp.seq < inv {
                return fail(ForkWitness::RealTime {
                    view,
                    earlier,
                    later: node.id,
                });
            }
        }
        if let Some(inv) = idx.invokes.get(&node.id) {
            if latest_invoke.is_none_or(|(s, _)| inv.seq > s) {
                latest_invoke = Some((inv.seq, node.id));
            }
        }
    }
    Ok(())
}
