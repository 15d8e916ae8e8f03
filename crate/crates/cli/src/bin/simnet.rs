use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use upc_cli::{emit, finish, init_logging, parse_mode};
use upc_core::protocol::ChannelMode;
use upc_core::simnet::{run_scenario, throughput_bench, Metrics, RunReport, Scenario, TraceEntry};

/// Deterministic network simulator.
#[derive(Parser)]
#[command(name = "simnet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs a scenario file; exits nonzero if any assertion or expectation fails.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the JSON-lines trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Writes the run report here, with wall time zeroed.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Streams `n` payments through one channel pair and reports throughput.
    Bench {
        #[arg(long, default_value_t = 10_000)]
        n: u64,
        #[arg(long, default_value = "serialized", value_parser = parse_mode)]
        mode: ChannelMode,
    },
    /// Recomputes a run's metrics from its trace file.
    Replay { trace: PathBuf },
}

fn main() -> ExitCode {
    init_logging();
    finish(run(Cli::parse()))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::Run { scenario, seed, trace, report } => {
            let text = std::fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let mut s = Scenario::from_json(&text)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let r = run_scenario(&s)?;
            if let Some(path) = trace {
                write(&path, r.trace_jsonl().as_bytes())?;
            }
            if let Some(path) = report {
                write(&path, &r.deterministic_bytes())?;
            }
            emit(&summary(&r));
            Ok(r.passed())
        }
        Cmd::Bench { n, mode } => {
            let r = throughput_bench(n, mode);
            let mut record = summary(&r);
            record["payments_per_sec"] = r.metrics.payments_per_sec().round().into();
            emit(&record);
            Ok(r.passed())
        }
        Cmd::Replay { trace } => {
            let text = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let entries = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("trace line {}", i + 1)))
                .collect::<anyhow::Result<Vec<TraceEntry>>>()?;
            emit(&serde_json::json!({ "outcome": "OK", "metrics": Metrics::from_trace(&entries) }));
            Ok(true)
        }
    }
}

fn summary(r: &RunReport) -> serde_json::Value {
    serde_json::json!({
        "outcome": if r.passed() { "PASSED" } else { "FAILED" },
        "scenario": r.scenario,
        "seed": r.seed,
        "metrics": r.metrics,
        "final_balances": r.final_balances,
        "failures": r.failures(),
    })
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
