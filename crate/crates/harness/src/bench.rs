//! Topology benchmark over the query protocol: execution, scoring and
//! aggregation into table rows.

use std::io::{BufRead, Write};
use std::path::Path;

use mica_core::agents::{AgentSettings, Auditor, Backend, Router};
use mica_core::kb::KnowledgeBase;
use mica_core::metrics;
use mica_core::topologies::{AnswerTrace, Team, Topology, TopologyConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EnergyConfig;
use crate::queries::{QueryCategory, QueryRecord};
use crate::HarnessError;

/// One scored trace. The archive of these is the source of every report
/// number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub category: QueryCategory,
    pub reference: String,
    pub success: bool,
    /// Not scored for general questions.
    pub kba: Option<f64>,
    pub trace: AnswerTrace,
}

pub struct BenchInputs<'a> {
    pub kb: &'a KnowledgeBase,
    pub queries: &'a [QueryRecord],
    pub topologies: &'a [Topology],
    pub settings: &'a AgentSettings,
    pub router: &'a Router,
    pub auditor: &'a Auditor,
    pub topology: &'a TopologyConfig,
    pub backend: &'a dyn Backend,
    pub energy: EnergyConfig,
}

fn score(inputs: &BenchInputs, q: &QueryRecord, mut trace: AnswerTrace) -> ArchiveRecord {
    trace.attach_energy(&inputs.energy.sampler());
    let answer = &trace.final_answer.text;
    let success = trace.failed.is_none()
        && inputs
            .kb
            .rubric(&q.rubric)
            .is_some_and(|r| metrics::task_success(answer, r));
    let kba = q
        .category
        .has_kba()
        .then(|| metrics::kba(answer, inputs.kb.phrases(), inputs.kb.categories().len()));
    ArchiveRecord {
        category: q.category,
        reference: q.reference.clone(),
        success,
        kba,
        trace,
    }
}

/// Runs every selected topology on every query. Work is spread over the
/// rayon pool; the output order is topology order, then query order.
pub fn run_benchmark(inputs: &BenchInputs) -> Vec<ArchiveRecord> {
    let team = Team {
        kb: inputs.kb,
        backend: inputs.backend,
        settings: inputs.settings,
        router: inputs.router,
        auditor: inputs.auditor,
        config: inputs.topology,
    };
    let jobs: Vec<(Topology, &QueryRecord)> = inputs
        .topologies
        .iter()
        .flat_map(|t| inputs.queries.iter().map(move |q| (*t, q)))
        .collect();
    jobs.par_iter()
        .map(|(t, q)| {
            let trace = team.run(*t, &q.id, &q.text, &q.context());
            score(inputs, q, trace)
        })
        .collect()
}

/// One table row: a topology's scores within one category block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub topology: Topology,
    pub items: usize,
    /// Task success, percent.
    pub ts: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    /// Percent; `None` where not scored.
    pub kba: Option<f64>,
    /// Mean latency, seconds.
    pub latency: f64,
    /// kJ per successful answer; `None` when nothing succeeded.
    pub energy: Option<f64>,
    pub tokens: f64,
    pub calls: f64,
    pub failures: usize,
}

/// Rows of one category, or of the overall average when `category` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBlock {
    pub category: Option<QueryCategory>,
    pub rows: Vec<BenchRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub backend: String,
    pub blocks: Vec<CategoryBlock>,
    pub config_echo: String,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn category_row(
    topology: Topology,
    records: &[&ArchiveRecord],
    idle_watts: f64,
) -> Result<BenchRow, HarnessError> {
    let traces: Vec<AnswerTrace> = records.iter().map(|r| r.trace.clone()).collect();
    let successes: Vec<bool> = records.iter().map(|r| r.success).collect();
    let n = records.len() as f64;
    Ok(BenchRow {
        topology,
        items: records.len(),
        ts: 100.0 * successes.iter().filter(|s| **s).count() as f64 / n,
        bleu: metrics::corpus_bleu(
            records
                .iter()
                .map(|r| (r.trace.final_answer.text.as_str(), r.reference.as_str())),
        ),
        rouge_l: mean(
            records
                .iter()
                .map(|r| metrics::rouge_l(&r.trace.final_answer.text, &r.reference)),
        )
        .unwrap_or(0.0),
        kba: mean(records.iter().filter_map(|r| r.kba)).map(|k| 100.0 * k),
        latency: metrics::average_latency(&traces)?,
        energy: metrics::energy_per_success(&traces, &successes, idle_watts)?,
        tokens: mean(traces.iter().map(|t| t.total_tokens() as f64)).unwrap_or(0.0),
        calls: mean(traces.iter().map(|t| t.calls.len() as f64)).unwrap_or(0.0),
        failures: records.iter().filter(|r| r.trace.failed.is_some()).count(),
    })
}

/// The overall row averages the category rows; undefined entries are
/// skipped, and the result is undefined only if every category is.
fn overall_row(topology: Topology, rows: &[&BenchRow]) -> BenchRow {
    BenchRow {
        topology,
        items: rows.iter().map(|r| r.items).sum(),
        ts: mean(rows.iter().map(|r| r.ts)).unwrap_or(0.0),
        bleu: mean(rows.iter().map(|r| r.bleu)).unwrap_or(0.0),
        rouge_l: mean(rows.iter().map(|r| r.rouge_l)).unwrap_or(0.0),
        kba: mean(rows.iter().filter_map(|r| r.kba)),
        latency: mean(rows.iter().map(|r| r.latency)).unwrap_or(0.0),
        energy: mean(rows.iter().filter_map(|r| r.energy)),
        tokens: mean(rows.iter().map(|r| r.tokens)).unwrap_or(0.0),
        calls: mean(rows.iter().map(|r| r.calls)).unwrap_or(0.0),
        failures: rows.iter().map(|r| r.failures).sum(),
    }
}

/// Builds the report from archive records alone.
pub fn aggregate(
    records: &[ArchiveRecord],
    idle_watts: f64,
    seed: u64,
    backend: &str,
    config_echo: String,
) -> Result<BenchReport, HarnessError> {
    let mut topologies: Vec<Topology> = records.iter().map(|r| r.trace.topology).collect();
    topologies.sort();
    topologies.dedup();
    let mut blocks = Vec::new();
    for cat in QueryCategory::ALL {
        let mut rows = Vec::new();
        for t in &topologies {
            let mine: Vec<&ArchiveRecord> = records
                .iter()
                .filter(|r| r.category == cat && r.trace.topology == *t)
                .collect();
            if !mine.is_empty() {
                rows.push(category_row(*t, &mine, idle_watts)?);
            }
        }
        if !rows.is_empty() {
            blocks.push(CategoryBlock {
                category: Some(cat),
                rows,
            });
        }
    }
    let overall = topologies
        .iter()
        .map(|t| {
            let rows: Vec<&BenchRow> = blocks
                .iter()
                .flat_map(|b| b.rows.iter().filter(|r| r.topology == *t))
                .collect();
            overall_row(*t, &rows)
        })
        .collect();
    blocks.push(CategoryBlock {
        category: None,
        rows: overall,
    });
    Ok(BenchReport {
        seed,
        backend: backend.to_string(),
        blocks,
        config_echo,
    })
}

pub fn write_archive(records: &[ArchiveRecord], path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("archive records serialise");
        writeln!(w, "{line}").map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveRecord>, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| HarnessError::Archive {
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
