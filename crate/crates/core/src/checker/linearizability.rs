//! Linearizability of key-value histories (Wing & Gong search with memoized
//! configurations, split per key).

use std::collections::{BTreeMap, HashSet};

use crate::kvs::{KvsOperation, KvsResult};

use super::OpId;

/// One client operation as seen from outside: invocation and (if it
/// completed) response, with trace positions as timestamps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryOp {
    pub id: OpId,
    pub op: KvsOperation,
    /// `None` for operations that never completed.
    pub result: Option<KvsResult>,
    pub invoke: u64,
    pub response: Option<u64>,
}

/// Sequential model of one key.
fn step(value: &Option<Vec<u8>>, op: &KvsOperation) -> (Option<Vec<u8>>, KvsResult) {
    match op {
        KvsOperation::Get { .. } => (
            value.clone(),
            value.clone().map_or(KvsResult::NotFound, KvsResult::Value),
        ),
        KvsOperation::Put { value: v, .. } => (Some(v.clone()), KvsResult::Ok),
        KvsOperation::Del { .. } => (
            None,
            if value.is_some() {
                KvsResult::Ok
            } else {
                KvsResult::NotFound
            },
        ),
    }
}

/// Returns the first key (in byte order) whose sub-history is not
/// linearizable, or `None` when the whole history is.
pub fn non_linearizable_key(history: &[HistoryOp]) -> Option<Vec<u8>> {
    let mut by_key: BTreeMap<&[u8], Vec<&HistoryOp>> = BTreeMap::new();
    for op in history {
        by_key.entry(op.op.key()).or_default().push(op);
    }
    by_key
        .into_iter()
        .find(|(_, ops)| !linearizable_single_key(ops))
        .map(|(k, _)| k.to_vec())
}

pub fn is_linearizable(history: &[HistoryOp]) -> bool {
    non_linearizable_key(history).is_none()
}

struct Search<'a> {
    ops: Vec<&'a HistoryOp>,
    seen: HashSet<(Vec<u64>, Option<Vec<u8>>)>,
}

fn linearizable_single_key(ops: &[&HistoryOp]) -> bool {
    let mut ops = ops.to_vec();
    ops.sort_by_key(|o| o.invoke);
    let mut search = Search {
        ops,
        seen: HashSet::new(),
    };
    let words = search.ops.len().div_ceil(64);
    search.explore(&mut vec![0u64; words], &None)
}

impl Search<'_> {
    fn done(&self, bits: &[u64], i: usize) -> bool {
        bits[i / 64] & (1 << (i % 64)) != 0
    }

    fn explore(&mut self, bits: &mut Vec<u64>, value: &Option<Vec<u8>>) -> bool {
        let open: Vec<usize> = (0..self.ops.len()).filter(|&i| !self.done(bits, i)).collect();
        if open.iter().all(|&i| self.ops[i].response.is_none()) {
            return true;
        }
        if !self.seen.insert((bits.clone(), value.clone())) {
            return false;
        }
        // an op may go next only if it was invoked before every open op responded
        let horizon = open
            .iter()
            .filter_map(|&i| self.ops[i].response)
            .min()
            .unwrap_or(u64::MAX);
        for i in open {
            let op = self.ops[i];
            if op.invoke > horizon {
                break;
            }
            let (next, result) = step(value, &op.op);
            if op.result.as_ref().is_some_and(|r| *r != result) {
                continue;
            }
            bits[i / 64] |= 1 << (i % 64);
            if self.explore(bits, &next) {
                return true;
            }
            bits[i / 64] &= !(1 << (i % 64));
        }
        false
    }
}
