//! On-disk formats: `rounds.jsonl`, `summary.json`, and the summary, metrics,
//! comparison and plot CSVs.
//!
//! Every CSV carries a `schema_version` column except the comparison table,
//! whose column order is fixed. Readers reject a version they do not know.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation;
use crate::config::{Algorithm, RunConfig};
use crate::error::{AfflError, Result};
use crate::metrics::{MetricsReport, REPORT_KEYS};
use crate::sim::{Evaluation, RoundRecord, RunLog, SCHEMA_VERSION};

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_KV: &str = "metrics.txt";

pub const COMPARE_HEADER: [&str; 7] =
    ["method", "rounds_to_target", "final_accuracy", "gini", "kwh_per_round", "bytes_per_round", "fairness_gap"];

fn csv_err(e: csv::Error) -> AfflError {
    AfflError::Io(e.to_string())
}

fn json_err(e: serde_json::Error) -> AfflError {
    AfflError::Io(e.to_string())
}

/// Everything in a [`RunLog`] except the per-round records, plus headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub config_digest: String,
    pub seed: u64,
    pub target_accuracy: f64,
    pub rounds: usize,
    pub rounds_to_target: Option<usize>,
    pub final_accuracy: f64,
    pub gini: f64,
    pub fairness_gap: f64,
    pub kwh_per_round: f64,
    pub bytes_per_round: f64,
    pub total_eps: f64,
    pub mia_success: f64,
    pub h_max: f64,
    pub final_class_accuracy: BTreeMap<String, f64>,
    pub client_classes: Vec<String>,
    pub initial: Evaluation,
}

impl RunSummary {
    pub fn from_log(log: &RunLog) -> Result<Self> {
        let row = CompareRow::from_log("", log)?;
        Ok(RunSummary {
            schema_version: log.schema_version,
            algorithm: log.algorithm,
            config_digest: log.config_digest.clone(),
            seed: log.seed,
            target_accuracy: log.target_accuracy,
            rounds: log.records.len(),
            rounds_to_target: row.rounds_to_target,
            final_accuracy: row.final_accuracy,
            gini: row.gini,
            fairness_gap: row.fairness_gap,
            kwh_per_round: row.kwh_per_round,
            bytes_per_round: row.bytes_per_round,
            total_eps: log.records.last().map_or(0.0, |r| r.eps_spent),
            mia_success: log.mia_success,
            h_max: log.h_max,
            final_class_accuracy: log.final_class_accuracy.clone(),
            client_classes: log.client_classes.clone(),
            initial: log.initial.clone(),
        })
    }

    pub fn into_log(self, records: Vec<RoundRecord>) -> RunLog {
        RunLog {
            schema_version: self.schema_version,
            algorithm: self.algorithm,
            config_digest: self.config_digest,
            seed: self.seed,
            target_accuracy: self.target_accuracy,
            initial: self.initial,
            records,
            h_max: self.h_max,
            final_class_accuracy: self.final_class_accuracy,
            client_classes: self.client_classes,
            mia_success: self.mia_success,
        }
    }
}

fn check_version(found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(AfflError::SchemaMismatch { expected: SCHEMA_VERSION.to_string(), found: found.to_string() });
    }
    Ok(())
}

pub fn write_rounds<W: Write>(mut out: W, records: &[RoundRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(json_err)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = fs::File::open(path).map_err(|e| AfflError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoundRecord =
            serde_json::from_str(&line).map_err(|e| AfflError::Io(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes `config.toml`, `rounds.jsonl`, `summary.json` and `summary.csv` into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, log: &RunLog) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    write_rounds(BufWriter::new(fs::File::create(dir.join(ROUNDS_FILE))?), &log.records)?;
    let summary = RunSummary::from_log(log)?;
    let mut json = serde_json::to_string_pretty(&summary).map_err(json_err)?;
    json.push('\n');
    fs::write(dir.join(SUMMARY_JSON), json)?;
    let mut w = csv::Writer::from_path(dir.join(SUMMARY_CSV)).map_err(csv_err)?;
    w.write_record(["schema_version", "algorithm", "seed", "config_digest", "rounds", "total_eps", "mia_success"].iter().chain(&COMPARE_HEADER[1..]))
        .map_err(csv_err)?;
    let row = CompareRow::from_log(log.algorithm.name(), log)?;
    let mut fields = vec![
        SCHEMA_VERSION.to_string(),
        log.algorithm.name().to_string(),
        log.seed.to_string(),
        log.config_digest.clone(),
        summary.rounds.to_string(),
        summary.total_eps.to_string(),
        summary.mia_success.to_string(),
    ];
    fields.extend(row.fields().into_iter().skip(1));
    w.write_record(&fields).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

/// Reads a run back from a directory written by [`write_run`], or from the
/// path of its `summary.json`.
pub fn read_run(path: &Path) -> Result<RunLog> {
    let dir = if path.is_dir() { path.to_path_buf() } else { path.parent().map(Path::to_path_buf).unwrap_or_default() };
    let text = fs::read_to_string(dir.join(SUMMARY_JSON)).map_err(|e| AfflError::Io(format!("{}: {e}", dir.join(SUMMARY_JSON).display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) => check_version(v as u32)?,
        None => return Err(AfflError::SchemaMismatch { expected: SCHEMA_VERSION.to_string(), found: "missing".into() }),
    }
    let summary: RunSummary = serde_json::from_value(value).map_err(json_err)?;
    let records = read_rounds(&dir.join(ROUNDS_FILE))?;
    if records.len() != summary.rounds {
        return Err(AfflError::Io(format!("{} holds {} rounds, summary says {}", ROUNDS_FILE, records.len(), summary.rounds)));
    }
    Ok(summary.into_log(records))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub rounds_to_target: Option<usize>,
    pub final_accuracy: f64,
    pub gini: f64,
    pub kwh_per_round: f64,
    pub bytes_per_round: f64,
    pub fairness_gap: f64,
}

impl CompareRow {
    pub fn from_log(method: &str, log: &RunLog) -> Result<Self> {
        let acc = log.final_client_accuracy();
        let n = log.records.len().max(1) as f64;
        Ok(CompareRow {
            method: method.to_string(),
            rounds_to_target: log.rounds_to_target(),
            final_accuracy: log.final_global_accuracy(),
            gini: aggregation::gini(acc)?,
            kwh_per_round: log.records.iter().map(|r| r.energy_kwh).sum::<f64>() / n,
            bytes_per_round: log.records.iter().map(|r| (r.bytes_up + r.bytes_down) as f64).sum::<f64>() / n,
            fairness_gap: aggregation::fairness_gap(acc)?,
        })
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.rounds_to_target.map_or(String::new(), |r| r.to_string()),
            self.final_accuracy.to_string(),
            self.gini.to_string(),
            self.kwh_per_round.to_string(),
            self.bytes_per_round.to_string(),
            self.fairness_gap.to_string(),
        ]
    }

    /// Field-wise difference `self - base`; rounds are compared only when both reached the target.
    pub fn delta(&self, base: &CompareRow) -> CompareRow {
        CompareRow {
            method: format!("{}-{}", self.method, base.method),
            rounds_to_target: None,
            final_accuracy: self.final_accuracy - base.final_accuracy,
            gini: self.gini - base.gini,
            kwh_per_round: self.kwh_per_round - base.kwh_per_round,
            bytes_per_round: self.bytes_per_round - base.bytes_per_round,
            fairness_gap: self.fairness_gap - base.fairness_gap,
        }
    }

    /// Signed rounds difference when both runs reached the target.
    pub fn rounds_delta(&self, base: &CompareRow) -> Option<i64> {
        Some(self.rounds_to_target? as i64 - base.rounds_to_target? as i64)
    }
}

pub fn write_compare<W: Write>(out: W, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARE_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Deltas of every row against the first, in comparison-table layout with
/// `rounds_to_target` holding the signed difference.
pub fn write_compare_deltas<W: Write>(out: W, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARE_HEADER).map_err(csv_err)?;
    if let Some(base) = rows.first() {
        for r in rows {
            let mut f = r.delta(base).fields();
            f[1] = r.rounds_delta(base).map_or(String::new(), |d| d.to_string());
            w.write_record(f).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Writes `metrics.csv` (one row) and `metrics.txt` (`key = value` lines).
pub fn write_metrics(dir: &Path, label: &str, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(METRICS_CSV)).map_err(csv_err)?;
    w.write_record(["schema_version", "label"].iter().chain(&REPORT_KEYS)).map_err(csv_err)?;
    let mut row = vec![SCHEMA_VERSION.to_string(), label.to_string()];
    row.extend(report.values().iter().map(|v| opt(*v)));
    w.write_record(&row).map_err(csv_err)?;
    w.flush()?;
    let mut kv = format!("schema_version = {SCHEMA_VERSION}\nlabel = {label}\n");
    for (k, v) in REPORT_KEYS.iter().zip(report.values()) {
        kv.push_str(&format!("{k} = {}\n", v.map_or("none".to_string(), |x| x.to_string())));
    }
    kv.push_str("privacy_accounting = linear composition\nput_utility = accuracy in place of ndcg\n");
    fs::write(dir.join(METRICS_KV), kv)?;
    Ok(())
}

/// Reads the label and report from a `metrics.csv`.
pub fn read_metrics(path: &Path) -> Result<(String, MetricsReport)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let expected: Vec<&str> = ["schema_version", "label"].iter().chain(&REPORT_KEYS).copied().collect();
    let row = r.records().next().ok_or(AfflError::Empty("metrics rows"))?.map_err(csv_err)?;
    let version = row.get(0).unwrap_or_default();
    if header.get(0) != Some("schema_version") || version != SCHEMA_VERSION.to_string() {
        return Err(AfflError::SchemaMismatch { expected: SCHEMA_VERSION.to_string(), found: version.to_string() });
    }
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(AfflError::SchemaMismatch { expected: expected.join(","), found: header.iter().collect::<Vec<_>>().join(",") });
    }
    let parse = |i: usize| -> Result<Option<f64>> {
        match row.get(i + 2).unwrap_or_default() {
            "" => Ok(None),
            s => s.parse().map(Some).map_err(|_| AfflError::Io(format!("bad value for {}: {s}", REPORT_KEYS[i]))),
        }
    };
    let report = MetricsReport {
        cei: parse(0)?,
        hfi: parse(1)?,
        put: parse(2)?,
        mis: parse(3)?,
        statistical_parity: parse(4)?,
        mia_success: parse(5)?,
        transfer_effectiveness: parse(6)?,
        scaling_exponent: parse(7)?,
        clinical_readiness: parse(8)?,
        gini_accuracy: parse(9)?,
        fairness_gap_final: parse(10)?,
        convergence_slope: parse(11)?,
    };
    Ok((row.get(1).unwrap_or_default().to_string(), report))
}

/// A named (x, y) series for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Long-format plot data: `schema_version,series,x,y`.
pub fn write_series(path: &Path, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["schema_version", "series", x_label, y_label]).map_err(csv_err)?;
    for s in series {
        for (x, y) in &s.points {
            w.write_record([SCHEMA_VERSION.to_string(), s.name.clone(), x.to_string(), y.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
