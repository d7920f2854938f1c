//! Workloads, scenario files, fuzzing and benchmarks.

pub mod bench;
pub mod fuzz;
pub mod scenario;
pub mod workload;
