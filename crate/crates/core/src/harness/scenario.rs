//! Scenario files: a simulation configuration plus an adversary script, in
//! TOML.
//!
//! ```toml
//! name = "rollback"
//! seed = 7
//! store_mode = "sync-faithful"
//!
//! [workload]
//! clients = 3
//! ops = 60
//!
//! [[actions]]
//! at = 40
//! action = "restart-context-from"
//! version = 5
//! ```
//!
//! Every top-level key except `name`, `description`, `workload` and
//! `actions` maps onto a [`SimConfig`] field of the same name.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{self, CheckError, ForkReport};
use crate::host::{simulate, Action, AdversaryScript, ScheduledAction, SimConfig, Simulator, StoreMode};
use crate::trace::{EventKind, Party, Trace};

use super::workload::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub store_mode: StoreMode,
    pub retry_timeout: Option<u64>,
    pub max_retries: Option<u32>,
    pub latency: Option<u64>,
    pub dummy_every: Option<u32>,
    #[serde(default)]
    pub trailing_dummies: u32,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub actions: Vec<ScheduledAction>,
}

fn one() -> usize {
    1
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ScenarioError::Parse(m) => ScenarioError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        self.workload
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if !(1..=crate::context::DEFAULT_MAX_BATCH).contains(&self.batch_size) {
            return Err(ScenarioError::Invalid(format!(
                "batch_size {} outside 1..={}",
                self.batch_size,
                crate::context::DEFAULT_MAX_BATCH
            )));
        }
        let n = self.workload.clients;
        for a in &self.actions {
            let clients: Vec<u32> = match &a.action {
                Action::DropRepliesTo { client } | Action::Route { client, .. } => vec![*client],
                Action::ForkContexts { groups } => groups.iter().flatten().copied().collect(),
                _ => continue,
            };
            if let Some(c) = clients.iter().find(|&&c| c == 0 || c > n) {
                return Err(ScenarioError::Invalid(format!(
                    "action at step {} names client {c}, group has {n}",
                    a.at
                )));
            }
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        let d = SimConfig::default();
        SimConfig {
            workload: self.workload.clone(),
            seed: self.seed,
            batch_size: self.batch_size,
            store_mode: self.store_mode,
            retry_timeout: self.retry_timeout.unwrap_or(d.retry_timeout),
            max_retries: self.max_retries.unwrap_or(d.max_retries),
            latency: self.latency.unwrap_or(d.latency),
            dummy_every: self.dummy_every,
            trailing_dummies: self.trailing_dummies,
            ..d
        }
    }

    pub fn script(&self) -> AdversaryScript {
        AdversaryScript {
            actions: self.actions.clone(),
        }
    }

    pub fn run(&self) -> Outcome {
        Outcome::from_simulator(simulate(self.sim_config(), self.script()))
    }
}

/// First violation raised in a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detection {
    pub seq: u64,
    pub party: Party,
    pub client: Option<u32>,
    pub op_idx: Option<u64>,
    pub reason: String,
}

/// Result of one simulation plus the checker's verdict on it.
#[derive(Debug)]
pub struct Outcome {
    pub trace: Trace,
    pub clients: u32,
    pub completed: Vec<u64>,
    pub violations: usize,
    pub detection: Option<Detection>,
    /// Fork-linearizability and stable-prefix check of everything the
    /// clients accepted before the first violation.
    pub verdict: Result<ForkReport, CheckError>,
}

impl Outcome {
    pub fn from_simulator(sim: Simulator) -> Self {
        let clients = sim.clients();
        let completed = (1..=clients).map(|c| sim.completed(c)).collect();
        let trace = sim.into_trace();
        Self::from_trace(trace, clients, completed)
    }

    pub fn from_trace(trace: Trace, clients: u32, completed: Vec<u64>) -> Self {
        let detection = trace.first_violation().map(|e| match &e.kind {
            EventKind::Violation {
                party,
                client,
                op_idx,
                reason,
            } => Detection {
                seq: e.seq,
                party: *party,
                client: *client,
                op_idx: *op_idx,
                reason: reason.clone(),
            },
            _ => unreachable!("first_violation returns violations"),
        });
        let prefix = match &detection {
            Some(d) => trace.prefix(d.seq),
            None => trace.clone(),
        };
        let verdict = checker::check_fork_linearizable(&prefix)
            .and_then(|report| checker::check_stable_prefix(&prefix).map(|()| report));
        Self {
            violations: trace.violations().count(),
            trace,
            clients,
            completed,
            detection,
            verdict,
        }
    }

    /// No inconsistency slipped past the clients.
    pub fn ok(&self) -> bool {
        self.verdict.is_ok()
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.detection {
            Some(d) => {
                write!(f, "DETECTED")?;
                if let Some(k) = d.op_idx {
                    write!(f, " at op {k}")?;
                }
                if let Some(c) = d.client {
                    write!(f, " of client {c}")?;
                }
                write!(f, " by {}: {}", d.party, d.reason)?;
            }
            None => write!(f, "no violations")?,
        }
        match &self.verdict {
            Ok(r) if r.forked => write!(f, "; views forked, fork-linearizable"),
            Ok(_) => write!(f, ", fork-linearizable"),
            Err(e) => write!(f, "; UNDETECTED INCONSISTENCY: {e}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROLLBACK: &str = r#"
name = "rollback"
seed = 3

[workload]
clients = 3
ops = 60

[[actions]]
at = 40
action = "restart-context-from"
version = 5
"#;

    #[test]
    fn parses_and_runs() {
        let s = Scenario::parse(ROLLBACK).unwrap();
        assert_eq!(s.actions[0].action, Action::RestartContextFrom { version: 5 });
        let out = s.run();
        assert!(out.detection.is_some());
        assert!(out.ok());
        assert!(out.to_string().starts_with("DETECTED"), "{out}");
    }

    #[test]
    fn parse_error_has_line_context() {
        let err = Scenario::parse("name = \"x\"\nbatch_size = \"many\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Scenario::parse("name = \"x\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn client_out_of_range_rejected() {
        let text = "name = \"x\"\n[[actions]]\nat = 1\naction = \"drop-replies-to\"\nclient = 9\n";
        assert!(matches!(Scenario::parse(text), Err(ScenarioError::Invalid(_))));
    }
}
