use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mica_bench::{report, BackendKind, BenchmarkConfig, HarnessError};
use mica_core::topologies::Topology;

#[derive(Parser)]
#[command(
    name = "mica-bench",
    version,
    about = "Step-fusion evaluation and topology benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score step fusion before and after replaying the feedback schedule.
    AsfEval(Common),
    /// Run the topology benchmark over the query protocol.
    Bench(Common),
    /// Rebuild the benchmark report from an archived traces.jsonl.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated topology names.
    #[arg(long, value_delimiter = ',')]
    topology: Vec<Topology>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
}

impl Common {
    fn load(&self) -> Result<(BenchmarkConfig, PathBuf), HarnessError> {
        let mut cfg = BenchmarkConfig::load(&self.config)?;
        if !self.topology.is_empty() {
            cfg.topologies = self.topology.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(b) = self.backend {
            cfg.backend.kind = b;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        let out = cfg.out.clone();
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::AsfEval(c) => {
            let (cfg, out) = c.load()?;
            let result = mica_bench::run_asf_eval_from_config(&cfg, &out)?;
            print!("{}", report::asf_table(&result.report));
        }
        Command::Bench(c) => {
            let (cfg, out) = c.load()?;
            let r = mica_bench::run_bench_from_config(&cfg, &out)?;
            print!("{}", report::bench_table(&r));
        }
        Command::Report(c) => {
            let (cfg, out) = c.load()?;
            let r = mica_bench::report_from_archive(&cfg, &out)?;
            print!("{}", report::bench_table(&r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
