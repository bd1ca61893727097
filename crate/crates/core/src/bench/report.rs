use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BenchError, EvalReport};

pub const CSV_FILE: &str = "report.csv";
pub const JSON_FILE: &str = "report.json";
pub const CSV_HEADER: [&str; 4] = ["model", "k", "accuracy_pct", "ild_pct"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(BenchError::InvalidConfig(format!("unknown report format {other:?}"))),
        }
    }
}

/// Percent with two decimals: 0.8612 → "86.12".
pub fn percent(v: f64) -> String {
    let s = format!("{:.2}", v * 100.0);
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// One line per model and k, models in report order.
pub fn render_csv(report: &EvalReport) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for m in &report.models {
        for r in &m.rows {
            w.write_record([m.model.clone(), r.k.to_string(), percent(r.accuracy), percent(r.ild)])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| BenchError::Report(e.to_string()))
}

pub fn render_json(report: &EvalReport) -> Result<String, BenchError> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Writes `report.csv` or `report.json` into `dir` atomically; returns the path.
pub fn emit_report(report: &EvalReport, format: ReportFormat, dir: &Path) -> Result<PathBuf, BenchError> {
    let (name, text) = match format {
        ReportFormat::Csv => (CSV_FILE, render_csv(report)?),
        ReportFormat::Json => (JSON_FILE, render_json(report)?),
    };
    let path = dir.join(name);
    crate::util::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

pub fn read_report(path: &Path) -> Result<EvalReport, BenchError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| BenchError::Report(format!("{}: {e}", path.display())))
}

/// Re-renders the CSV from a persisted JSON report.
pub fn csv_from_json(path: &Path) -> Result<String, BenchError> {
    render_csv(&read_report(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub model: String,
    pub k: usize,
    pub accuracy_pct: f64,
    pub ild_pct: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, BenchError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(BenchError::Report("unexpected csv header".into()));
    }
    Ok(r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?)
}
