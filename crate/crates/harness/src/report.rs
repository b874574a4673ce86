//! Table-text and delimited renderings of both reports. The delimited form
//! carries full float precision and parses back to the same report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mica_core::topologies::Topology;

use crate::asf_eval::{AsfReport, AsfRow, PassSummary, StepMetrics};
use crate::bench::{BenchReport, BenchRow, CategoryBlock};
use crate::queries::QueryCategory;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    TableText,
    Delimited,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::TableText => "txt",
            ReportFormat::Delimited => "csv",
        }
    }
}

const NA: &str = "n/a";

fn fixed(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x:.decimals$}"))
}

fn exact(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x:?}"))
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>, HarnessError> {
    if field == NA {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| HarnessError::Report(format!("line {line}: bad number \"{field}\"")))
}

fn parse_num(field: &str, line: usize) -> Result<f64, HarnessError> {
    parse_opt(field, line)?
        .ok_or_else(|| HarnessError::Report(format!("line {line}: value required")))
}

fn parse_count(field: &str, line: usize) -> Result<usize, HarnessError> {
    field
        .parse()
        .map_err(|_| HarnessError::Report(format!("line {line}: bad count \"{field}\"")))
}

fn echo_lines(out: &mut String, echo: &str) {
    for line in echo.lines() {
        let _ = writeln!(out, "#|{line}");
    }
}

/// Splits the comment header (`# key = value` and `#|` config lines) from
/// the data lines.
struct Parsed<'a> {
    meta: Vec<(&'a str, &'a str)>,
    echo: String,
    data: Vec<(usize, Vec<&'a str>)>,
}

fn split_delimited(src: &str) -> Parsed<'_> {
    let mut meta = Vec::new();
    let mut echo = String::new();
    let mut data = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if let Some(cfg) = line.strip_prefix("#|") {
            echo.push_str(cfg);
            echo.push('\n');
        } else if let Some(kv) = line.strip_prefix("# ") {
            if let Some((k, v)) = kv.split_once(" = ") {
                meta.push((k, v));
            }
        } else if !line.trim().is_empty() {
            data.push((i + 1, line.split(',').collect()));
        }
    }
    Parsed { meta, echo, data }
}

fn meta<'a>(p: &Parsed<'a>, key: &str) -> Result<&'a str, HarnessError> {
    p.meta
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| HarnessError::Report(format!("missing \"{key}\" header")))
}

// ---- benchmark report ----

const BENCH_HEADER: &str =
    "block,topology,items,ts,bleu,rouge_l,kba,latency_s,energy_kj,tokens,calls,failures";

pub fn bench_table(report: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Topology benchmark");
    let _ = writeln!(out, "seed: {}", report.seed);
    let _ = writeln!(out, "backend: {}", report.backend);
    let _ = writeln!(
        out,
        "TS = task success (%), BL = corpus BLEU-4, RG = ROUGE-L F1, KBA = KB alignment (%), \
         AL = mean latency (s), E/succ = energy per successful answer (kJ)"
    );
    for block in &report.blocks {
        let title = block
            .category
            .map_or("Overall Average", QueryCategory::label);
        let _ = writeln!(out);
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "{:<24}{:>8}{:>8}{:>8}{:>8}{:>9}{:>11}{:>9}{:>7}{:>6}",
            "Topology", "TS", "BL", "RG", "KBA", "AL", "E/succ", "Tokens", "Calls", "Fail"
        );
        for r in &block.rows {
            let _ = writeln!(
                out,
                "{:<24}{:>8.2}{:>8.4}{:>8.4}{:>8}{:>9.3}{:>11}{:>9.1}{:>7.1}{:>6}",
                r.topology.as_str(),
                r.ts,
                r.bleu,
                r.rouge_l,
                fixed(r.kba, 2),
                r.latency,
                fixed(r.energy, 4),
                r.tokens,
                r.calls,
                r.failures
            );
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Configuration");
    out.push_str(&report.config_echo);
    out
}

pub fn bench_delimited(report: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# seed = {}", report.seed);
    let _ = writeln!(out, "# backend = {}", report.backend);
    echo_lines(&mut out, &report.config_echo);
    let _ = writeln!(out, "{BENCH_HEADER}");
    for block in &report.blocks {
        let name = block.category.map_or("overall", QueryCategory::as_str);
        for r in &block.rows {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{},{},{},{}",
                r.topology.as_str(),
                r.items,
                exact(Some(r.ts)),
                exact(Some(r.bleu)),
                exact(Some(r.rouge_l)),
                exact(r.kba),
                exact(Some(r.latency)),
                exact(r.energy),
                exact(Some(r.tokens)),
                exact(Some(r.calls)),
                r.failures
            );
        }
    }
    out
}

pub fn parse_bench_delimited(src: &str) -> Result<BenchReport, HarnessError> {
    let p = split_delimited(src);
    let seed = meta(&p, "seed")?
        .parse()
        .map_err(|_| HarnessError::Report("bad seed".into()))?;
    let backend = meta(&p, "backend")?.to_string();
    let mut blocks: Vec<CategoryBlock> = Vec::new();
    for (line, f) in &p.data {
        if f.join(",") == BENCH_HEADER {
            continue;
        }
        if f.len() != 12 {
            return Err(HarnessError::Report(format!(
                "line {line}: expected 12 fields"
            )));
        }
        let category = match f[0] {
            "overall" => None,
            c => Some(c.parse::<QueryCategory>().map_err(HarnessError::Report)?),
        };
        let row = BenchRow {
            topology: f[1].parse::<Topology>().map_err(HarnessError::Report)?,
            items: parse_count(f[2], *line)?,
            ts: parse_num(f[3], *line)?,
            bleu: parse_num(f[4], *line)?,
            rouge_l: parse_num(f[5], *line)?,
            kba: parse_opt(f[6], *line)?,
            latency: parse_num(f[7], *line)?,
            energy: parse_opt(f[8], *line)?,
            tokens: parse_num(f[9], *line)?,
            calls: parse_num(f[10], *line)?,
            failures: parse_count(f[11], *line)?,
        };
        match blocks.last_mut() {
            Some(b) if b.category == category => b.rows.push(row),
            _ => blocks.push(CategoryBlock {
                category,
                rows: vec![row],
            }),
        }
    }
    Ok(BenchReport {
        seed,
        backend,
        blocks,
        config_echo: p.echo,
    })
}

// ---- step-fusion report ----

const ASF_HEADER: &str = "step,frames,acc_before,acc_after,prec_before,prec_after,rec_before,rec_after,f1_before,f1_after,ece_before,ece_after";

pub fn asf_table(report: &AsfReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Step fusion before and after online adaptation");
    let _ = writeln!(out, "seed: {}", report.seed);
    let _ = writeln!(
        out,
        "held-out frames: {}, frames without context: {}, updates applied: {}, over budget: {}",
        report.evaluated_frames,
        report.frames_without_context,
        report.updates_applied,
        report.updates_over_budget
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<6}{:>7} | {:>8}{:>8} | {:>8}{:>8} | {:>8}{:>8} | {:>8}{:>8} | {:>7}{:>7}",
        "Step", "Frames", "Acc", "", "Prec", "", "Rec", "", "F1", "", "ECE", ""
    );
    let _ = writeln!(
        out,
        "{:<6}{:>7} | {:>8}{:>8} | {:>8}{:>8} | {:>8}{:>8} | {:>8}{:>8} | {:>7}{:>7}",
        "",
        "",
        "before",
        "after",
        "before",
        "after",
        "before",
        "after",
        "before",
        "after",
        "before",
        "after"
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:<6}{:>7} | {:>8.2}{:>8.2} | {:>8.2}{:>8.2} | {:>8.2}{:>8.2} | {:>8.2}{:>8.2} | {:>7}{:>7}",
            r.step,
            r.before.frames,
            r.before.accuracy,
            r.after.accuracy,
            r.before.precision,
            r.after.precision,
            r.before.recall,
            r.after.recall,
            r.before.f1,
            r.after.f1,
            fixed(r.before.ece, 3),
            fixed(r.after.ece, 3)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "All frames: accuracy {:.2} -> {:.2} %, ECE {:.3} -> {:.3}",
        report.before.accuracy, report.after.accuracy, report.before.ece, report.after.ece
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "Configuration");
    out.push_str(&report.config_echo);
    out
}

pub fn asf_delimited(report: &AsfReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# seed = {}", report.seed);
    let _ = writeln!(out, "# evaluated_frames = {}", report.evaluated_frames);
    let _ = writeln!(
        out,
        "# frames_without_context = {}",
        report.frames_without_context
    );
    let _ = writeln!(out, "# updates_applied = {}", report.updates_applied);
    let _ = writeln!(
        out,
        "# updates_over_budget = {}",
        report.updates_over_budget
    );
    echo_lines(&mut out, &report.config_echo);
    let _ = writeln!(out, "{ASF_HEADER}");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.before.frames,
            exact(Some(r.before.accuracy)),
            exact(Some(r.after.accuracy)),
            exact(Some(r.before.precision)),
            exact(Some(r.after.precision)),
            exact(Some(r.before.recall)),
            exact(Some(r.after.recall)),
            exact(Some(r.before.f1)),
            exact(Some(r.after.f1)),
            exact(r.before.ece),
            exact(r.after.ece)
        );
    }
    let _ = writeln!(
        out,
        "overall,{},{},{},,,,,,,{},{}",
        report.evaluated_frames,
        exact(Some(report.before.accuracy)),
        exact(Some(report.after.accuracy)),
        exact(Some(report.before.ece)),
        exact(Some(report.after.ece))
    );
    out
}

pub fn parse_asf_delimited(src: &str) -> Result<AsfReport, HarnessError> {
    let p = split_delimited(src);
    let count = |key: &str| -> Result<usize, HarnessError> {
        meta(&p, key)?
            .parse()
            .map_err(|_| HarnessError::Report(format!("bad \"{key}\" header")))
    };
    let seed = meta(&p, "seed")?
        .parse()
        .map_err(|_| HarnessError::Report("bad seed".into()))?;
    let mut rows = Vec::new();
    let mut summary = None;
    for (line, f) in &p.data {
        if f.join(",") == ASF_HEADER {
            continue;
        }
        if f.len() != 12 {
            return Err(HarnessError::Report(format!(
                "line {line}: expected 12 fields"
            )));
        }
        if f[0] == "overall" {
            summary = Some((
                PassSummary {
                    accuracy: parse_num(f[2], *line)?,
                    ece: parse_num(f[10], *line)?,
                },
                PassSummary {
                    accuracy: parse_num(f[3], *line)?,
                    ece: parse_num(f[11], *line)?,
                },
            ));
            continue;
        }
        let frames = parse_count(f[1], *line)?;
        let side = |i: usize| -> Result<StepMetrics, HarnessError> {
            Ok(StepMetrics {
                accuracy: parse_num(f[2 + i], *line)?,
                precision: parse_num(f[4 + i], *line)?,
                recall: parse_num(f[6 + i], *line)?,
                f1: parse_num(f[8 + i], *line)?,
                ece: parse_opt(f[10 + i], *line)?,
                frames,
            })
        };
        rows.push(AsfRow {
            step: f[0].to_string(),
            before: side(0)?,
            after: side(1)?,
        });
    }
    let (before, after) =
        summary.ok_or_else(|| HarnessError::Report("missing overall row".into()))?;
    Ok(AsfReport {
        seed,
        rows,
        before,
        after,
        evaluated_frames: count("evaluated_frames")?,
        frames_without_context: count("frames_without_context")?,
        updates_applied: count("updates_applied")?,
        updates_over_budget: count("updates_over_budget")?,
        config_echo: p.echo,
    })
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

pub fn emit_bench_report(
    report: &BenchReport,
    format: ReportFormat,
    dir: &Path,
) -> Result<PathBuf, HarnessError> {
    let body = match format {
        ReportFormat::TableText => bench_table(report),
        ReportFormat::Delimited => bench_delimited(report),
    };
    write(dir, &format!("bench_report.{}", format.extension()), &body)
}

pub fn emit_asf_report(
    report: &AsfReport,
    format: ReportFormat,
    dir: &Path,
) -> Result<PathBuf, HarnessError> {
    let body = match format {
        ReportFormat::TableText => asf_table(report),
        ReportFormat::Delimited => asf_delimited(report),
    };
    write(dir, &format!("asf_report.{}", format.extension()), &body)
}
