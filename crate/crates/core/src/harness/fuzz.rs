//! Randomized attack search: one random adversary script per seed, each run
//! checked for inconsistencies the clients accepted without noticing.

use std::ops::Range;

use crate::host::{simulate, AdversaryScript, SimConfig};

use super::scenario::Outcome;
use super::workload::WorkloadSpec;

#[derive(Clone, Debug)]
pub struct FuzzConfig {
    pub seeds: Range<u64>,
    /// Maximum number of adversary actions per script; 0 runs a correct host.
    pub budget: usize,
    pub clients: u32,
    pub ops: u64,
    pub batch_size: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self {
            seeds: 0..1000,
            budget: 8,
            clients: 3,
            ops: 100,
            batch_size: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FuzzSummary {
    pub runs: u64,
    /// Runs where some party raised a violation.
    pub detected: u64,
    /// Runs whose script was benign (no attack) but raised a violation.
    pub false_alarms: Vec<u64>,
    /// Runs where the checker found an inconsistency nobody flagged.
    pub undetected: Vec<u64>,
}

impl FuzzSummary {
    pub fn ok(&self) -> bool {
        self.undetected.is_empty() && self.false_alarms.is_empty()
    }
}

pub fn config_for(cfg: &FuzzConfig, seed: u64) -> SimConfig {
    SimConfig {
        workload: WorkloadSpec {
            clients: cfg.clients,
            ops: cfg.ops,
            seed,
            ..WorkloadSpec::default()
        },
        seed,
        batch_size: cfg.batch_size,
        ..SimConfig::default()
    }
}

pub fn script_for(cfg: &FuzzConfig, seed: u64) -> AdversaryScript {
    AdversaryScript::random(seed, cfg.budget, cfg.ops, cfg.clients)
}

/// Runs one seed.
pub fn fuzz_one(cfg: &FuzzConfig, seed: u64) -> (AdversaryScript, Outcome) {
    let script = script_for(cfg, seed);
    let out = Outcome::from_simulator(simulate(config_for(cfg, seed), script.clone()));
    (script, out)
}

pub fn fuzz(cfg: &FuzzConfig) -> FuzzSummary {
    let mut summary = FuzzSummary::default();
    for seed in cfg.seeds.clone() {
        let (script, out) = fuzz_one(cfg, seed);
        summary.runs += 1;
        if out.detection.is_some() {
            summary.detected += 1;
            if script.is_correct() {
                summary.false_alarms.push(seed);
            }
        }
        if !out.ok() {
            summary.undetected.push(seed);
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_budget_is_clean() {
        let s = fuzz(&FuzzConfig {
            seeds: 0..20,
            budget: 0,
            ops: 30,
            ..FuzzConfig::default()
        });
        assert_eq!(s.runs, 20);
        assert_eq!(s.detected, 0);
        assert!(s.ok());
    }

    #[test]
    fn attacks_get_detected_sometimes() {
        let s = fuzz(&FuzzConfig {
            seeds: 0..40,
            ops: 60,
            ..FuzzConfig::default()
        });
        assert!(s.detected > 0);
        assert!(s.ok(), "{s:?}");
    }
}
