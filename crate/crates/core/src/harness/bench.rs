//! Relative throughput of the KVS with and without the protocol.
//!
//! Everything runs in-process on one thread: clients, context and store are
//! called directly, without the simulated network. Numbers are only
//! comparable between modes of the same run.

use std::fmt;
use std::fs::File;
use std::io::{Seek, SeekFrom, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::LcmClient;
use crate::context::AdminProvision;
use crate::crypto::{PlatformIdentity, SymKey};
use crate::host::{StoreMode, PROGRAM_ID};
use crate::kvs::{KvsOperation, KvsState};
use crate::wire::OperationRequest;
use crate::KvsContext;

use super::workload::WorkloadSpec;

pub const TMC_INCREMENT: Duration = Duration::from_millis(60);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    /// Plain KVS, no protocol.
    BaselineNoLcm,
    Lcm,
    /// The protocol with invokes handed over in batches.
    LcmBatch,
    /// The protocol plus a trusted monotonic counter bumped on every store.
    TmcEmulated,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [
        BenchMode::BaselineNoLcm,
        BenchMode::Lcm,
        BenchMode::LcmBatch,
        BenchMode::TmcEmulated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::BaselineNoLcm => "baseline-no-lcm",
            BenchMode::Lcm => "lcm",
            BenchMode::LcmBatch => "lcm-batch",
            BenchMode::TmcEmulated => "tmc-emulated",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown bench mode {s:?}"))
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub workload: WorkloadSpec,
    pub modes: Vec<BenchMode>,
    pub store_mode: StoreMode,
    pub batch_size: usize,
    /// Operations for the counter-bound mode, which costs 60 ms each.
    pub tmc_ops: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec {
                clients: 16,
                ops: 2000,
                ..WorkloadSpec::default()
            },
            modes: BenchMode::ALL.to_vec(),
            store_mode: StoreMode::Async,
            batch_size: 16,
            tmc_ops: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub store_mode: StoreMode,
    pub ops: u64,
    pub seconds: f64,
    pub ops_per_sec: f64,
}

/// Where sealed state goes: memory, or a file synced on every write.
enum Sink {
    Memory(Vec<u8>),
    File(File),
}

impl Sink {
    fn new(mode: StoreMode) -> std::io::Result<Self> {
        Ok(match mode {
            StoreMode::Async => Sink::Memory(Vec::new()),
            StoreMode::SyncFaithful => Sink::File(tempfile::tempfile()?),
        })
    }

    fn write(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        match self {
            Sink::Memory(buf) => {
                buf.clear();
                buf.extend_from_slice(bytes);
            }
            Sink::File(f) => {
                f.seek(SeekFrom::Start(0))?;
                f.write_all(bytes)?;
                f.set_len(bytes.len() as u64)?;
                f.sync_data()?;
            }
        }
        Ok(())
    }
}

struct Rig {
    ctx: KvsContext,
    clients: Vec<LcmClient>,
    sink: Sink,
}

impl Rig {
    fn new(n: u32, batch: usize, store: StoreMode, seed: u64) -> std::io::Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let platform = PlatformIdentity::generate_with("bench", &mut rng);
        let comm_key = SymKey::generate_with(&mut rng);
        let mut ctx = KvsContext::new(platform, PROGRAM_ID, 0).with_max_batch(batch);
        ctx.init(None).expect("fresh context");
        let mut sink = Sink::new(store)?;
        let blob = ctx
            .bootstrap(AdminProvision {
                protocol_key: SymKey::generate_with(&mut rng),
                comm_key: comm_key.clone(),
                clients: (1..=n).collect(),
            })
            .expect("bootstrap");
        sink.write(&blob.encode())?;
        let clients = (1..=n).map(|i| LcmClient::new(i, comm_key.clone())).collect();
        Ok(Self { ctx, clients, sink })
    }
}

fn interleave(workload: &WorkloadSpec) -> Vec<(usize, KvsOperation)> {
    let per_client = workload.generate();
    let longest = per_client.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for k in 0..longest {
        for (c, ops) in per_client.iter().enumerate() {
            if let Some(op) = ops.get(k) {
                out.push((c, op.clone()));
            }
        }
    }
    out
}

fn run_baseline(ops: &[(usize, KvsOperation)], store: StoreMode) -> std::io::Result<()> {
    let mut state = KvsState::default();
    let mut sink = Sink::new(store)?;
    for (_, op) in ops {
        std::hint::black_box(state.apply(op));
        sink.write(&state.serialize())?;
    }
    Ok(())
}

fn run_lcm(ops: &[(usize, KvsOperation)], cfg: &BenchConfig, tmc: bool) -> std::io::Result<()> {
    let mut rig = Rig::new(cfg.workload.clients, 1, cfg.store_mode, cfg.workload.seed)?;
    for (c, op) in ops {
        let invoke = rig.clients[*c]
            .invoke(OperationRequest::new(op.encode()))
            .expect("idle client");
        let p = rig.ctx.handle_invoke(&invoke).expect("honest run");
        if let Some(blob) = p.blob {
            if tmc {
                std::thread::sleep(TMC_INCREMENT);
            }
            rig.sink.write(&blob.encode())?;
        }
        std::hint::black_box(rig.clients[*c].handle_reply(&p.reply).expect("honest reply"));
    }
    Ok(())
}

fn run_lcm_batch(ops: &[(usize, KvsOperation)], cfg: &BenchConfig) -> std::io::Result<()> {
    let batch = cfg.batch_size.min(cfg.workload.clients as usize).max(1);
    let mut rig = Rig::new(cfg.workload.clients, batch, cfg.store_mode, cfg.workload.seed)?;
    let mut rest = ops;
    while !rest.is_empty() {
        // one invoke per client per batch, since clients are sequential
        let mut taken = Vec::with_capacity(batch);
        let mut used = vec![false; rig.clients.len()];
        let mut k = 0;
        while k < rest.len() && taken.len() < batch && !used[rest[k].0] {
            used[rest[k].0] = true;
            taken.push(k);
            k += 1;
        }
        let envs: Vec<_> = taken
            .iter()
            .map(|&j| {
                let (c, op) = &rest[j];
                rig.clients[*c]
                    .invoke(OperationRequest::new(op.encode()))
                    .expect("idle client")
            })
            .collect();
        let out = rig.ctx.handle_batch(&envs).expect("honest batch");
        assert!(out.error.is_none(), "honest batch raised {:?}", out.error);
        if let Some(blob) = out.blob {
            rig.sink.write(&blob.encode())?;
        }
        for (&j, (reply, _)) in taken.iter().zip(&out.replies) {
            std::hint::black_box(rig.clients[rest[j].0].handle_reply(reply).expect("honest reply"));
        }
        rest = &rest[k..];
    }
    Ok(())
}

pub fn bench_mode(cfg: &BenchConfig, mode: BenchMode) -> std::io::Result<BenchRow> {
    let mut ops = interleave(&cfg.workload);
    if mode == BenchMode::TmcEmulated {
        ops.truncate(cfg.tmc_ops as usize);
    }
    let start = Instant::now();
    match mode {
        BenchMode::BaselineNoLcm => run_baseline(&ops, cfg.store_mode)?,
        BenchMode::Lcm => run_lcm(&ops, cfg, false)?,
        BenchMode::LcmBatch => run_lcm_batch(&ops, cfg)?,
        BenchMode::TmcEmulated => run_lcm(&ops, cfg, true)?,
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchRow {
        mode,
        store_mode: cfg.store_mode,
        ops: ops.len() as u64,
        seconds,
        ops_per_sec: ops.len() as f64 / seconds.max(f64::MIN_POSITIVE),
    })
}

pub fn bench(cfg: &BenchConfig) -> std::io::Result<Vec<BenchRow>> {
    cfg.modes.iter().map(|&m| bench_mode(cfg, m)).collect()
}

/// CSV with throughput relative to the baseline row of the same store mode,
/// when one is present.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("mode,store_mode,ops,seconds,ops_per_sec,relative\n");
    for r in rows {
        let base = rows
            .iter()
            .find(|b| b.mode == BenchMode::BaselineNoLcm && b.store_mode == r.store_mode);
        let rel = base.map_or(String::new(), |b| format!("{:.4}", r.ops_per_sec / b.ops_per_sec));
        let store = match r.store_mode {
            StoreMode::Async => "async",
            StoreMode::SyncFaithful => "sync-faithful",
        };
        out.push_str(&format!(
            "{},{},{},{:.6},{:.2},{}\n",
            r.mode, store, r.ops, r.seconds, r.ops_per_sec, rel
        ));
    }
    out
}

/// A gnuplot script drawing a log-scale bar chart from `csv_name`.
pub fn gnuplot_script(csv_name: &str, png_name: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set terminal pngcairo size 800,480\n\
         set output '{png_name}'\n\
         set style data histograms\n\
         set style fill solid 0.8\n\
         set logscale y\n\
         set ylabel 'ops/s'\n\
         set key off\n\
         plot '{csv_name}' every ::1 using 5:xtic(stringcolumn(1).' ('.stringcolumn(2).')')\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(store_mode: StoreMode) -> BenchConfig {
        BenchConfig {
            workload: WorkloadSpec {
                clients: 4,
                ops: 40,
                ..WorkloadSpec::default()
            },
            modes: vec![BenchMode::BaselineNoLcm, BenchMode::Lcm, BenchMode::LcmBatch],
            store_mode,
            batch_size: 4,
            tmc_ops: 1,
        }
    }

    #[test]
    fn modes_run_all_ops() {
        for store in [StoreMode::Async, StoreMode::SyncFaithful] {
            let rows = bench(&small(store)).unwrap();
            assert_eq!(rows.len(), 3);
            assert!(rows.iter().all(|r| r.ops == 40 && r.ops_per_sec > 0.0));
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BenchMode::ALL {
            assert_eq!(m.name().parse::<BenchMode>().unwrap(), m);
        }
        assert!("fast".parse::<BenchMode>().is_err());
    }

    #[test]
    fn csv_has_relative_column() {
        let rows = bench(&small(StoreMode::Async)).unwrap();
        let csv = to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("baseline-no-lcm,async,40,"));
        assert!(lines[1].ends_with(",1.0000"));
    }
}
