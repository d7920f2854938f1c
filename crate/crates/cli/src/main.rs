use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lcm::harness::bench::{self, BenchConfig, BenchMode};
use lcm::harness::fuzz::{self, FuzzConfig};
use lcm::harness::scenario::{Outcome, Scenario};
use lcm::harness::workload::WorkloadSpec;
use lcm::host::StoreMode;
use lcm::trace::Trace;

/// Exit code for bad input (unreadable or invalid scenario, trace or flags).
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "lcm", version, about = "Rollback and fork detection simulator for the LCM protocol")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario files and check each resulting trace.
    Run(RunArgs),
    /// Run random adversary scripts and report undetected inconsistencies.
    Fuzz(FuzzArgs),
    /// Measure relative throughput of the protocol modes.
    Bench(BenchArgs),
    /// Check a recorded trace (JSON lines).
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StoreArg {
    Async,
    SyncFaithful,
}

impl From<StoreArg> for StoreMode {
    fn from(s: StoreArg) -> Self {
        match s {
            StoreArg::Async => StoreMode::Async,
            StoreArg::SyncFaithful => StoreMode::SyncFaithful,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario files (TOML).
    #[arg(required = true)]
    scenarios: Vec<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the client count.
    #[arg(long)]
    clients: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    store_mode: Option<StoreArg>,
    /// Directory for trace files; one `<name>.jsonl` per scenario.
    #[arg(long, short, env = "LCM_OUT_DIR")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct FuzzArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeds.
    #[arg(long, default_value_t = 1000)]
    count: u64,
    /// Maximum adversary actions per script.
    #[arg(long, default_value_t = 8)]
    budget: usize,
    #[arg(long, default_value_t = 3)]
    clients: u32,
    #[arg(long, default_value_t = 100)]
    ops: u64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Directory to write traces of failing seeds to.
    #[arg(long, short, env = "LCM_OUT_DIR")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated modes: baseline-no-lcm, lcm, lcm-batch, tmc-emulated.
    #[arg(long, value_delimiter = ',', default_value = "baseline-no-lcm,lcm,lcm-batch,tmc-emulated")]
    modes: Vec<BenchMode>,
    #[arg(long, default_value_t = 16)]
    clients: u32,
    #[arg(long, default_value_t = 2000)]
    ops: u64,
    #[arg(long, default_value_t = 100)]
    value_size: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "async")]
    store_mode: StoreArg,
    /// Operations for tmc-emulated, which sleeps 60 ms per store.
    #[arg(long, default_value_t = 10)]
    tmc_ops: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for bench.csv and bench.gp.
    #[arg(long, short, env = "LCM_OUT_DIR")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    trace: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Fuzz(a) => fuzz_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run(a: RunArgs) -> Result<bool> {
    let mut scenarios = Vec::new();
    for path in &a.scenarios {
        let mut s = Scenario::load(path)?;
        if let Some(seed) = a.seed {
            s.seed = seed;
            s.workload.seed = seed;
        }
        if let Some(n) = a.clients {
            s.workload.clients = n;
        }
        if let Some(b) = a.batch_size {
            s.batch_size = b;
        }
        if let Some(m) = a.store_mode {
            s.store_mode = m.into();
        }
        // re-validate after overrides
        let s = Scenario::parse(&toml::to_string(&s)?).with_context(|| format!("{} with overrides", path.display()))?;
        scenarios.push(s);
    }
    let mut all_ok = true;
    for s in scenarios {
        let out = s.run();
        println!("{}: {out}", s.name);
        if let Some(dir) = &a.output {
            write_file(dir, &format!("{}.jsonl", s.name), &out.trace.to_jsonl())?;
        }
        all_ok &= out.ok();
    }
    Ok(all_ok)
}

fn fuzz_cmd(a: FuzzArgs) -> Result<bool> {
    let cfg = FuzzConfig {
        seeds: a.seed..a.seed + a.count,
        budget: a.budget,
        clients: a.clients,
        ops: a.ops,
        batch_size: a.batch_size,
    };
    anyhow::ensure!(a.clients > 0, "clients must be positive");
    anyhow::ensure!((1..=16).contains(&a.batch_size), "batch size must be within 1..=16");
    let summary = fuzz::fuzz(&cfg);
    println!(
        "runs {}  detected {}  undetected {}  false alarms {}",
        summary.runs,
        summary.detected,
        summary.undetected.len(),
        summary.false_alarms.len()
    );
    for &seed in summary.undetected.iter().chain(&summary.false_alarms) {
        let (script, out) = fuzz::fuzz_one(&cfg, seed);
        println!("seed {seed}: {out}");
        println!("  script: {}", serde_json::to_string(&script)?);
        if let Some(dir) = &a.output {
            write_file(dir, &format!("fuzz-{seed}.jsonl"), &out.trace.to_jsonl())?;
        }
    }
    Ok(summary.ok())
}

fn bench_cmd(a: BenchArgs) -> Result<bool> {
    let workload = WorkloadSpec {
        clients: a.clients,
        ops: a.ops,
        value_size: a.value_size,
        seed: a.seed,
        ..WorkloadSpec::default()
    };
    workload.validate()?;
    anyhow::ensure!((1..=16).contains(&a.batch_size), "batch size must be within 1..=16");
    let cfg = BenchConfig {
        workload,
        modes: a.modes,
        store_mode: a.store_mode.into(),
        batch_size: a.batch_size,
        tmc_ops: a.tmc_ops,
    };
    let rows = bench::bench(&cfg)?;
    let csv = bench::to_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &a.output {
        let path = write_file(dir, "bench.csv", &csv)?;
        write_file(dir, "bench.gp", &bench::gnuplot_script("bench.csv", "bench.png"))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(true)
}

fn check(a: CheckArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let trace: Trace = text
        .parse()
        .with_context(|| format!("parsing {}", a.trace.display()))?;
    let out = Outcome::from_trace(trace, 0, Vec::new());
    if let Err(lcm::checker::CheckError::MalformedTrace(m)) = &out.verdict {
        anyhow::bail!("{}: malformed trace: {m}", a.trace.display());
    }
    println!("{}: {out}", a.trace.display());
    Ok(out.ok())
}
