//! Report rows and their CSV / JSON files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SetMethod};
use super::metrics::Verdict;
use crate::data::ShiftKind;
use crate::error::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// One grid cell for one evaluation seed. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub set_method: SetMethod,
    pub alpha: f64,
    pub shift_kind: ShiftKind,
    pub intensity: u8,
    pub coverage: f64,
    pub avg_set_size: f64,
    pub accuracy: f64,
    pub empty_set_rate: f64,
    pub n_test: usize,
    pub eval_seed: u64,
}

/// Calibration-set diagnostics for one method, alpha and evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub method: String,
    pub alpha: f64,
    pub eval_seed: u64,
    pub n_cal: usize,
    pub credible_coverage_on_cal: f64,
    pub verdict: Verdict,
    /// Average set size on the calibration set, per set method.
    pub cal_avg_set_size: BTreeMap<String, f64>,
    /// Conformal thresholds; infinite values are written as `"inf"`.
    #[serde(serialize_with = "ser_taus", deserialize_with = "de_taus")]
    pub tau: BTreeMap<String, f64>,
}

fn ser_taus<S: serde::Serializer>(m: &BTreeMap<String, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        if v.is_infinite() {
            map.serialize_entry(k, "inf")?;
        } else {
            map.serialize_entry(k, v)?;
        }
    }
    map.end()
}

fn de_taus<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, f64>, D::Error> {
    let raw = BTreeMap::<String, serde_json::Value>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            let tau = match &v {
                serde_json::Value::String(s) if s == "inf" => f64::INFINITY,
                other => other
                    .as_f64()
                    .ok_or_else(|| serde::de::Error::custom(format!("invalid tau {other}")))?,
            };
            Ok((k, tau))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub diagnoses: Vec<DiagnosisRecord>,
    pub config_hash: String,
}

/// Mean over evaluation seeds of one `(method, set method, alpha, shift)` cell.
/// Standard deviations use the sample (n - 1) convention and are blank for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub set_method: SetMethod,
    pub alpha: f64,
    pub shift_kind: ShiftKind,
    pub intensity: u8,
    pub n_eval_seeds: usize,
    pub coverage_mean: f64,
    pub coverage_sd_sample: Option<f64>,
    pub avg_set_size_mean: f64,
    pub avg_set_size_sd_sample: Option<f64>,
    pub accuracy_mean: f64,
    pub empty_set_rate_mean: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub config_hash: String,
    pub n_rows: usize,
    pub diagnoses: Vec<DiagnosisRecord>,
}

fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

impl ExperimentReport {
    /// Averages over evaluation seeds, in order of first appearance.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let key = |r: &ReportRow| {
            (
                r.method.clone(),
                r.set_method,
                r.alpha.to_bits(),
                r.shift_kind,
                r.intensity,
            )
        };
        let mut order = Vec::new();
        let mut groups: BTreeMap<_, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            let k = key(r);
            if !groups.contains_key(&k) {
                order.push(k.clone());
            }
            groups.entry(k).or_default().push(r);
        }
        order
            .into_iter()
            .map(|k| {
                let rows = &groups[&k];
                let col = |f: fn(&ReportRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
                let (coverage_mean, coverage_sd_sample) = mean_sd(&col(|r| r.coverage));
                let (avg_set_size_mean, avg_set_size_sd_sample) = mean_sd(&col(|r| r.avg_set_size));
                let first = rows[0];
                SummaryRow {
                    method: first.method.clone(),
                    set_method: first.set_method,
                    alpha: first.alpha,
                    shift_kind: first.shift_kind,
                    intensity: first.intensity,
                    n_eval_seeds: rows.len(),
                    coverage_mean,
                    coverage_sd_sample,
                    avg_set_size_mean,
                    avg_set_size_sd_sample,
                    accuracy_mean: mean_sd(&col(|r| r.accuracy)).0,
                    empty_set_rate_mean: mean_sd(&col(|r| r.empty_set_rate)).0,
                    n_test: first.n_test,
                }
            })
            .collect()
    }

    pub fn summary_json(&self) -> SummaryJson {
        SummaryJson {
            config_hash: self.config_hash.clone(),
            n_rows: self.rows.len(),
            diagnoses: self.diagnoses.clone(),
        }
    }
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Per-seed rows as CSV.
pub fn write_report(report: &ExperimentReport, path: &Path) -> Result<()> {
    write_csv(&report.rows, path)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Writes `report.csv`, `summary.csv`, `summary.json` and `resolved_config.toml` into `dir`.
pub fn write_outputs(report: &ExperimentReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_report(report, &dir.join(REPORT_CSV))?;
    write_csv(&report.summary(), &dir.join(SUMMARY_CSV))?;
    let json = serde_json::to_string_pretty(&report.summary_json())?;
    let p = dir.join(SUMMARY_JSON);
    std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    let p = dir.join(RESOLVED_CONFIG);
    std::fs::write(&p, cfg.resolved_toml()?).map_err(|e| Error::io(&p, e))
}
