//! CSV and JSON report files.

use std::path::Path;
use std::str::FromStr;

use crate::io::write_atomic;

use super::sweep::RateDistortionPoint;
use super::HarnessError;

pub const COLUMNS: [&str; 7] = ["layer", "step", "entropy_bits", "huffman_bits", "header_bits", "mse", "output_mse"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(HarnessError::Spec(format!("unknown report format {s:?}"))),
        }
    }
}

impl ReportFormat {
    /// Guesses from the file extension; CSV unless it ends in `.json`.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Self::Json,
            _ => Self::Csv,
        }
    }
}

pub fn to_csv(points: &[RateDistortionPoint]) -> Result<String, HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for p in points {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<RateDistortionPoint>, HarnessError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(HarnessError::Spec(format!("unexpected report columns: {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

pub fn to_json(points: &[RateDistortionPoint]) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(points)? + "\n")
}

pub fn parse_json(text: &str) -> Result<Vec<RateDistortionPoint>, HarnessError> {
    Ok(serde_json::from_str(text)?)
}

pub fn render(points: &[RateDistortionPoint], format: ReportFormat) -> Result<String, HarnessError> {
    match format {
        ReportFormat::Csv => to_csv(points),
        ReportFormat::Json => to_json(points),
    }
}

/// Writes the report atomically.
pub fn emit_report(points: &[RateDistortionPoint], format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    write_atomic(path, render(points, format)?.as_bytes())?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<Vec<RateDistortionPoint>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    match ReportFormat::for_path(path) {
        ReportFormat::Json => parse_json(&text),
        ReportFormat::Csv => parse_csv(&text),
    }
}
