//! Benchmark harness: the step-fusion evaluation and the multi-agent
//! topology benchmark, driven from one TOML config.

use std::path::{Path, PathBuf};

use mica_core::agents::{Auditor, Backend, RemoteBackend, Router, TemplateBackend};
use mica_core::asf::{self, AsfError, AsfState};
use mica_core::kb::{load_kb, KbError};
use mica_core::metrics::MetricError;
use mica_core::perception::{load_stream, PerceptionError};
use mica_core::step_experts::{ExpertError, ReferenceGallery};
use thiserror::Error;

pub mod asf_eval;
pub mod bench;
pub mod config;
pub mod queries;
pub mod report;

pub use asf_eval::{AsfReport, FeedbackSchedule};
pub use bench::{ArchiveRecord, BenchReport};
pub use config::{BackendKind, BenchmarkConfig};
pub use report::ReportFormat;

pub const ASF_STATE_FILE: &str = "asf_state.toml";
pub const TRACES_FILE: &str = "traces.jsonl";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("feedback schedule: {0}")]
    Schedule(String),
    #[error("query file line {line}: {reason}")]
    Query { line: usize, reason: String },
    #[error("trace archive line {line}: {reason}")]
    Archive { line: usize, reason: String },
    #[error("report: {0}")]
    Report(String),
    #[error("no recorded embedding for frame {0}")]
    MissingEmbedding(u64),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Asf(#[from] AsfError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl HarnessError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

/// Loads every input named by the config, runs the step-fusion evaluation
/// and writes both report formats plus the adapted state into `out`.
pub fn run_asf_eval_from_config(
    cfg: &BenchmarkConfig,
    out: &Path,
) -> Result<asf_eval::AsfEvalOutput, HarnessError> {
    cfg.check_paths()?;
    let kb = load_kb(&cfg.kb)?;
    let gallery = ReferenceGallery::load(&cfg.gallery)?;
    let stream = load_stream(&cfg.stream)?;
    let schedule = FeedbackSchedule::load(&cfg.schedule)?;
    let initial = match &cfg.initial_state {
        Some(p) => asf::load_state(p, &cfg.asf)?,
        None => AsfState::new(kb.num_steps()),
    };
    let inputs = asf_eval::AsfInputs {
        kb: &kb,
        gallery: &gallery,
        stream: &stream,
        perception: cfg.perception,
        top_k: cfg.experts.top_k,
        asf: cfg.asf.clone(),
        ece_bins: cfg.metrics.ece_bins,
    };
    let result = asf_eval::run_asf_eval(&inputs, &schedule, initial, cfg.seed, cfg.echo())?;
    report::emit_asf_report(&result.report, ReportFormat::TableText, out)?;
    report::emit_asf_report(&result.report, ReportFormat::Delimited, out)?;
    asf::save_state(&result.state, out.join(ASF_STATE_FILE))?;
    Ok(result)
}

pub fn make_backend(cfg: &BenchmarkConfig) -> Box<dyn Backend> {
    match cfg.backend.kind {
        BackendKind::Template => Box::new(TemplateBackend::new(cfg.backend.templates.clone())),
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.backend.remote.clone())),
    }
}

/// Runs the topology benchmark with the given backend, archives the traces
/// and writes both report formats into `out`.
pub fn run_bench_with_backend(
    cfg: &BenchmarkConfig,
    backend: &dyn Backend,
    out: &Path,
) -> Result<BenchReport, HarnessError> {
    let kb = load_kb(&cfg.kb)?;
    let qs = queries::load_queries(&cfg.queries)?;
    queries::check_rubrics(&qs, &kb)?;
    let router = Router::new(cfg.lexicon.clone());
    let auditor = Auditor::new(cfg.audit.clone(), &kb);
    let inputs = bench::BenchInputs {
        kb: &kb,
        queries: &qs,
        topologies: &cfg.topologies,
        settings: &cfg.agents,
        router: &router,
        auditor: &auditor,
        topology: &cfg.topology,
        backend,
        energy: cfg.energy,
    };
    let records = bench::run_benchmark(&inputs);
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    bench::write_archive(&records, &out.join(TRACES_FILE))?;
    let report = bench::aggregate(
        &records,
        cfg.energy.idle_watts,
        cfg.seed,
        cfg.backend.kind.as_str(),
        cfg.echo(),
    )?;
    write_bench_reports(&report, out)?;
    Ok(report)
}

pub fn run_bench_from_config(
    cfg: &BenchmarkConfig,
    out: &Path,
) -> Result<BenchReport, HarnessError> {
    let backend = make_backend(cfg);
    run_bench_with_backend(cfg, backend.as_ref(), out)
}

/// Rebuilds the benchmark report from an archived `traces.jsonl` alone.
pub fn report_from_archive(cfg: &BenchmarkConfig, out: &Path) -> Result<BenchReport, HarnessError> {
    let records = bench::read_archive(&out.join(TRACES_FILE))?;
    let report = bench::aggregate(
        &records,
        cfg.energy.idle_watts,
        cfg.seed,
        cfg.backend.kind.as_str(),
        cfg.echo(),
    )?;
    write_bench_reports(&report, out)?;
    Ok(report)
}

fn write_bench_reports(report: &BenchReport, out: &Path) -> Result<(), HarnessError> {
    report::emit_bench_report(report, ReportFormat::TableText, out)?;
    report::emit_bench_report(report, ReportFormat::Delimited, out)?;
    Ok(())
}
