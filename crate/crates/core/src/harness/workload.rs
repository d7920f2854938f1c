//! YCSB-style workload generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvs::KvsOperation;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("operation mix sums to {0}%, expected 100%")]
    BadMix(u32),
    #[error("{0} must be positive")]
    Zero(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub clients: u32,
    pub put_percent: u32,
    pub get_percent: u32,
    pub del_percent: u32,
    /// Size of the key space.
    pub objects: u32,
    pub value_size: usize,
    /// Total number of (non-dummy) operations across all clients.
    pub ops: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    /// YCSB workload A: 50% put, 50% get.
    fn default() -> Self {
        Self {
            clients: 3,
            put_percent: 50,
            get_percent: 50,
            del_percent: 0,
            objects: 16,
            value_size: 100,
            ops: 60,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let total = self.put_percent + self.get_percent + self.del_percent;
        if total != 100 {
            return Err(WorkloadError::BadMix(total));
        }
        if self.clients == 0 {
            return Err(WorkloadError::Zero("clients"));
        }
        if self.objects == 0 {
            return Err(WorkloadError::Zero("objects"));
        }
        Ok(())
    }

    pub fn key(idx: u32) -> Vec<u8> {
        format!("user{idx:06}").into_bytes()
    }

    /// One operation list per client (index 0 is client 1). Operations are
    /// dealt round-robin so every client gets `ops / clients` (+1) of them.
    pub fn generate(&self) -> Vec<Vec<KvsOperation>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut per_client = vec![Vec::new(); self.clients as usize];
        for k in 0..self.ops {
            let key = Self::key(rng.gen_range(0..self.objects));
            let roll = rng.gen_range(0..100);
            let op = if roll < self.put_percent {
                let mut value = vec![0u8; self.value_size];
                rng.fill(value.as_mut_slice());
                KvsOperation::put(key, value)
            } else if roll < self.put_percent + self.get_percent {
                KvsOperation::get(key)
            } else {
                KvsOperation::del(key)
            };
            per_client[(k % self.clients as u64) as usize].push(op);
        }
        per_client
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_workload_a() {
        let w = WorkloadSpec::default();
        assert_eq!((w.put_percent, w.get_percent), (50, 50));
        w.validate().unwrap();
    }

    #[test]
    fn mix_must_sum_to_100() {
        let w = WorkloadSpec {
            put_percent: 60,
            ..WorkloadSpec::default()
        };
        assert_eq!(w.validate(), Err(WorkloadError::BadMix(110)));
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let w = WorkloadSpec {
            clients: 3,
            ops: 150,
            ..WorkloadSpec::default()
        };
        let a = w.generate();
        assert_eq!(a, w.generate());
        assert!(a.iter().all(|ops| ops.len() == 50));
        let puts = a
            .iter()
            .flatten()
            .filter(|op| matches!(op, KvsOperation::Put { .. }))
            .count();
        assert!((40..=110).contains(&puts), "{puts} puts");
    }
}
