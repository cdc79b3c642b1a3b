//! Report directory: CSV tables and JSON summaries of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{RunReport, REFERENCE_PEARSON_R};
use crate::space::ModelConfig;

pub const PROFILE_CSV: &str = "profile.csv";
pub const TRACE_CSV: &str = "trace.csv";
pub const PARETO_CSV: &str = "pareto.csv";
pub const ALLOCATION_CSV: &str = "allocation.csv";
pub const REFINE_CSV: &str = "refine.csv";
pub const BEST_CONFIG_JSON: &str = "best_config.json";
pub const SUMMARY_JSON: &str = "summary.json";

/// Headline numbers of a run. Contains nothing time-dependent, so identical
/// runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ok: bool,
    pub layers: usize,
    pub budget_bytes: u64,
    pub phases: Vec<String>,
    pub best_performance: Option<f64>,
    pub best_memory_bytes: Option<u64>,
    pub best_average_bit: Option<f64>,
    pub best_average_rank: Option<f64>,
    pub best_mean_rank: Option<f64>,
    pub seed_performance: Option<f64>,
    pub uniform_best_performance: Option<f64>,
    pub uniform_best_config: Option<ModelConfig>,
    pub pareto_size: usize,
    pub evaluations: usize,
    pub failed_evaluations: usize,
    pub proxy_steps_total: u64,
    pub baseline_evaluations: usize,
    pub pearson_bits_vs_sensitivity: Option<f64>,
    pub reference_pearson_r: f64,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

impl Summary {
    pub fn from_report(r: &RunReport) -> Self {
        let mut phases = Vec::new();
        if r.phases.profile {
            phases.push("profile".to_string());
        }
        if r.phases.evolve {
            phases.push("evolve".to_string());
        }
        if r.phases.refine {
            phases.push("refine".to_string());
        }
        let uniform = r.uniform_baseline.as_ref().and_then(|u| u.best.as_ref());
        Self {
            ok: r.succeeded(),
            layers: r.layers,
            budget_bytes: r.budget_bytes,
            phases,
            best_performance: r.best.as_ref().map(|b| b.performance),
            best_memory_bytes: r.best.as_ref().map(|b| b.memory_bytes),
            best_average_bit: r.best.as_ref().map(|b| b.average_bit),
            best_average_rank: r.best.as_ref().map(|b| b.average_rank),
            best_mean_rank: r.best.as_ref().map(|b| b.mean_rank),
            seed_performance: r.seed.as_ref().map(|s| s.performance),
            uniform_best_performance: uniform.map(|u| u.performance),
            uniform_best_config: uniform.map(|u| u.config.clone()),
            pareto_size: r.pareto.len(),
            evaluations: r.evaluations,
            failed_evaluations: r.failed_evaluations,
            proxy_steps_total: r.proxy_steps_total,
            baseline_evaluations: r.uniform_baseline.as_ref().map_or(0, |u| u.evaluations),
            pearson_bits_vs_sensitivity: r.pearson_bits_vs_sensitivity,
            reference_pearson_r: REFERENCE_PEARSON_R,
            warnings: r.warnings.clone(),
            errors: r.errors.clone(),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

/// Renders every report file in memory, keyed by file name.
pub fn render(report: &RunReport) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let mut files = Vec::new();

    let profile = match &report.profile {
        Some(p) => p.to_csv()?,
        None => csv_bytes(&["layer", "score", "normalized"], [])?,
    };
    files.push((PROFILE_CSV, profile));

    files.push((
        TRACE_CSV,
        csv_bytes(
            &["phase", "step", "best_perf", "evals"],
            report.trace.iter().map(|t| {
                vec![
                    t.phase.to_string(),
                    t.step.to_string(),
                    t.best_perf.to_string(),
                    t.evals.to_string(),
                ]
            }),
        )?,
    ));

    files.push((
        PARETO_CSV,
        csv_bytes(
            &["perf", "memory_bytes", "avg_bit", "avg_rank", "config"],
            report.pareto.iter().map(|p| {
                vec![
                    p.performance.to_string(),
                    p.memory_bytes.to_string(),
                    p.average_bit.to_string(),
                    p.average_rank.to_string(),
                    p.config.to_string(),
                ]
            }),
        )?,
    ));

    let allocation = report
        .best
        .iter()
        .flat_map(|b| b.config.layers().iter().enumerate())
        .map(|(l, lc)| vec![l.to_string(), lc.bit.to_string(), lc.rank.to_string()]);
    files.push((ALLOCATION_CSV, csv_bytes(&["layer", "bit", "rank"], allocation)?));

    files.push((
        REFINE_CSV,
        csv_bytes(
            &[
                "member",
                "round",
                "candidate",
                "ei",
                "performance",
                "best_perf",
                "evals",
            ],
            report.refine_rounds.iter().map(|r| {
                vec![
                    r.member.to_string(),
                    r.round.to_string(),
                    r.candidate.as_ref().map(|c| c.to_string()).unwrap_or_default(),
                    opt(r.expected_improvement),
                    opt(r.performance),
                    r.best_performance.to_string(),
                    r.evaluations.to_string(),
                ]
            }),
        )?,
    ));

    let best = match &report.best {
        Some(b) => serde_json::to_vec_pretty(&b.config)?,
        None => b"null".to_vec(),
    };
    files.push((BEST_CONFIG_JSON, best));

    let mut summary = serde_json::to_vec_pretty(&Summary::from_report(report))?;
    summary.push(b'\n');
    files.push((SUMMARY_JSON, summary));
    Ok(files)
}

/// Writes the report files into `dir`. Each file is written to a temporary
/// name and renamed into place.
pub fn emit_reports(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = render(report)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ParetoRow {
    pub perf: f64,
    pub memory_bytes: u64,
    pub avg_bit: f64,
    pub avg_rank: f64,
    pub config: String,
}

pub fn read_pareto(dir: &Path) -> Result<Vec<ParetoRow>> {
    let path = dir.join(PARETO_CSV);
    let mut r = csv::Reader::from_path(&path)?;
    Ok(r.deserialize().collect::<Result<Vec<ParetoRow>, _>>()?)
}
