//! Oracles for the stability point `q` reported with each reply.
//!
//! Three reference values are rebuilt from the trace for every execution:
//!
//! * `ack_rule`: a client counts for `t` once the context holds an
//!   acknowledgement from it of `t` or later. The reported `q` must equal it.
//! * `definition`: the operation at `t` is stable w.r.t. its owner
//!   unconditionally, and w.r.t. another client once that client
//!   acknowledged a sequence number bigger than `t`. For non-owners this
//!   agrees with `ack_rule`; only the owner clause can make it larger.
//! * `observed`: as `definition`, but counting the replies clients actually
//!   accepted instead of what reached the context. Acknowledgements lag
//!   behind acceptance, so this bounds the other two from above.

use std::collections::{BTreeMap, HashSet};

use super::{CheckError, ExecRec, Index, OpId};
use crate::crypto::Digest;
use crate::trace::Trace;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QSample {
    pub op: OpId,
    pub t: u64,
    pub reported: u64,
    pub ack_rule: u64,
    pub definition: u64,
    pub observed: u64,
}

/// Largest `t` that at least a majority of the `n` observations reach.
fn majority_reach(observed: &BTreeMap<u32, u64>, n: u32) -> u64 {
    let need = n as usize / 2 + 1;
    let mut values: Vec<u64> = observed.values().copied().collect();
    values.resize(n as usize, 0);
    let mut candidates = values.clone();
    candidates.sort_unstable();
    candidates.dedup();
    candidates
        .into_iter()
        .rev()
        .find(|&c| values.iter().filter(|&&v| v >= c).count() >= need)
        .unwrap_or(0)
}

/// Largest position on `path` whose operation is stable among a majority,
/// given how far each client has seen.
fn definition_reach(path: &[&ExecRec], seen: &BTreeMap<u32, u64>, n: u32) -> u64 {
    let need = n as usize / 2 + 1;
    path.iter()
        .rev()
        .find(|node| {
            let owner = node.id.client;
            let others = seen.iter().filter(|&(&j, &s)| j != owner && s > node.t).count();
            1 + others >= need
        })
        .map_or(0, |node| node.t)
}

/// One sample per execution in the trace; `n` is the group size.
pub fn q_samples(trace: &Trace, n: u32) -> Result<Vec<QSample>, CheckError> {
    let idx = Index::build(trace)?;
    let mut out = Vec::with_capacity(idx.execs.len());
    for exec in &idx.execs {
        let path = idx.path_to(exec.h)?;
        let on_path: HashSet<Digest> = path.iter().map(|n| n.h).collect();

        let mut acks = BTreeMap::new();
        for node in &path {
            acks.insert(node.id.client, node.t_ack);
        }
        let mut accepted: BTreeMap<u32, u64> = BTreeMap::new();
        for (id, r) in &idx.responses {
            if r.seq < exec.seq && on_path.contains(&r.h) {
                let e = accepted.entry(id.client).or_default();
                *e = (*e).max(r.t);
            }
        }
        out.push(QSample {
            op: exec.id,
            t: exec.t,
            reported: exec.q,
            ack_rule: majority_reach(&acks, n),
            definition: definition_reach(&path, &acks, n),
            observed: definition_reach(&path, &accepted, n),
        });
    }
    Ok(out)
}

/// Per-client sequences of reported `q` never decrease.
pub fn q_monotone(trace: &Trace) -> Result<bool, CheckError> {
    let idx = Index::build(trace)?;
    let mut last: BTreeMap<u32, u64> = BTreeMap::new();
    let mut responses: Vec<_> = idx.responses.iter().collect();
    responses.sort_by_key(|(_, r)| r.seq);
    for (id, r) in responses {
        let prev = last.insert(id.client, r.q).unwrap_or(0);
        if r.q < prev {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Every prefix a client was told is stable must lie on one common chain.
pub fn check_stable_prefix(trace: &Trace) -> Result<(), CheckError> {
    let idx = Index::build(trace)?;
    let mut stable: Vec<(u64, Digest)> = Vec::new();
    for r in idx.responses.values().filter(|r| r.q > 0) {
        let path = idx.path_to(r.h)?;
        stable.push((r.q, path[r.q as usize - 1].h));
    }
    let Some(&(q_max, _)) = stable.iter().max_by_key(|(q, _)| *q) else {
        return Ok(());
    };
    let longest = stable.iter().find(|(q, _)| *q == q_max).expect("max exists").1;
    let reference = idx.path_to(longest)?;
    for (q, h) in stable {
        let expected = reference[q as usize - 1].h;
        if expected != h {
            return Err(CheckError::StableDivergence { t: q, a: expected, b: h });
        }
    }
    Ok(())
}
