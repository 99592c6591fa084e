//! Aggregation of the evaluation CSV into a human table and a JSON summary.

use super::pipeline::{METRICS_FILE, REPORT_JSON_FILE, REPORT_TEXT_FILE};
use super::{HarnessError, Pipeline, RunManifest};
use crate::harness::pipeline::CONFIG_FILE;
use crate::harness::ExperimentConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One parsed `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub target_id: String,
    pub method: String,
    pub seed: u64,
    pub qwk: f64,
}

/// Strict four-column parser for the evaluation CSV; the file is written by
/// this crate, so any deviation is a bug worth surfacing.
pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let fail = |line: usize, message: String| HarnessError::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "target_id,method,seed,qwk")) => {}
        Some((_, other)) => return Err(fail(1, format!("unexpected header {other:?}"))),
        None => return Err(fail(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(fail(idx + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let seed: u64 = fields[2]
            .parse()
            .map_err(|e| fail(idx + 1, format!("bad seed {:?}: {e}", fields[2])))?;
        let qwk: f64 = fields[3]
            .parse()
            .map_err(|e| fail(idx + 1, format!("bad qwk {:?}: {e}", fields[3])))?;
        if !qwk.is_finite() {
            return Err(fail(idx + 1, format!("non-finite qwk {qwk}")));
        }
        rows.push(MetricsRow {
            target_id: fields[0].to_string(),
            method: fields[1].to_string(),
            seed,
            qwk,
        });
    }
    if rows.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_qwk: f64,
    pub n_runs: usize,
    /// (seed, qwk) pairs in seed order.
    pub per_seed: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub target_id: String,
    pub config_hash: Option<String>,
    /// Sorted by mean QWK, best first; name breaks exact ties.
    pub methods: Vec<MethodSummary>,
    pub best: String,
}

fn summarize(rows: &[MetricsRow]) -> Report {
    let mut groups: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
    for row in rows {
        groups.entry(&row.method).or_default().push((row.seed, row.qwk));
    }
    let mut methods: Vec<MethodSummary> = groups
        .into_iter()
        .map(|(method, mut per_seed)| {
            per_seed.sort_by_key(|&(seed, _)| seed);
            let mean = per_seed.iter().map(|&(_, q)| q).sum::<f64>() / per_seed.len() as f64;
            MethodSummary {
                method: method.to_string(),
                mean_qwk: mean,
                n_runs: per_seed.len(),
                per_seed,
            }
        })
        .collect();
    methods.sort_by(|a, b| {
        b.mean_qwk
            .total_cmp(&a.mean_qwk)
            .then_with(|| a.method.cmp(&b.method))
    });
    Report {
        target_id: rows[0].target_id.clone(),
        config_hash: None,
        best: methods[0].method.clone(),
        methods,
    }
}

pub fn render_text(report: &Report) -> String {
    let width = report
        .methods
        .iter()
        .map(|m| m.method.len())
        .max()
        .unwrap_or(6)
        .max("method".len());
    let mut text = format!(
        "target {}{}\n\n  {:width$}  {:>10}  {:>4}\n",
        report.target_id,
        report
            .config_hash
            .as_deref()
            .map(|h| format!(", config {}", &h[..12.min(h.len())]))
            .unwrap_or_default(),
        "method",
        "mean qwk",
        "runs",
    );
    for (i, m) in report.methods.iter().enumerate() {
        let marker = if i == 0 { '*' } else { ' ' };
        text.push_str(&format!(
            "{marker} {:width$}  {:>10.4}  {:>4}\n",
            m.method, m.mean_qwk, m.n_runs,
        ));
    }
    text
}

/// Reads the evaluation CSV and writes `report.txt` and `report.json`.
/// The returned report matches the JSON file. Errors when the CSV is
/// missing or carries no rows.
pub fn run_report(out: &Path) -> Result<Report, HarnessError> {
    let pipe = Pipeline::new(out);
    let text = pipe.read(METRICS_FILE)?;
    let rows = parse_metrics_csv(&text, &out.join(METRICS_FILE))?;
    let mut report = summarize(&rows);
    if pipe.exists(CONFIG_FILE) {
        let cfg = ExperimentConfig::from_json(&pipe.read(CONFIG_FILE)?)?;
        report.config_hash = Some(cfg.hash()?);
    }
    pipe.write(REPORT_TEXT_FILE, &render_text(&report))?;
    pipe.write(REPORT_JSON_FILE, &serde_json::to_string_pretty(&report)?)?;
    if let Some(hash) = &report.config_hash {
        RunManifest::record(
            out,
            hash,
            "report",
            vec![REPORT_TEXT_FILE.to_string(), REPORT_JSON_FILE.to_string()],
        )?;
    }
    Ok(report)
}
