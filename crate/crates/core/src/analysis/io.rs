use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::ConfusionCounts;
use super::severity::CategoryStats;
use crate::fetcher::DatasetRecord;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisIoError {
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path} line {line}: {message}")]
    Format { path: String, line: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCounts {
    pub tool: String,
    pub counts: ConfusionCounts,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AnalysisIoError + '_ {
    move |source| AnalysisIoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn parse_count(raw: &str) -> Option<u64> {
    raw.trim().replace([',', '_'], "").parse().ok()
}

/// Reads `tool,tp,fp,fn` rows (header required). Thousands separators
/// inside quoted fields are accepted.
pub fn read_confusion_csv(path: &Path) -> Result<Vec<ToolCounts>, AnalysisIoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let line = record.position().map_or(0, |p| p.line());
        let format = |message: String| AnalysisIoError::Format {
            path: path.display().to_string(),
            line,
            message,
        };
        if record.len() < 4 {
            return Err(format(format!("expected 4 columns, got {}", record.len())));
        }
        let num = |i: usize| parse_count(&record[i]).ok_or_else(|| format(format!("`{}` is not a count", &record[i])));
        rows.push(ToolCounts {
            tool: record[0].to_owned(),
            counts: ConfusionCounts {
                tp: num(1)?,
                fp: num(2)?,
                fn_: num(3)?,
            },
        });
    }
    Ok(rows)
}

/// Precision, recall and F1 (percentages) as printed for one tool or entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolScores {
    pub tool: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsInput {
    Counts(Vec<ToolCounts>),
    Scores(Vec<ToolScores>),
}

/// Reads either `tool,tp,fp,fn` or `tool,precision,recall,f1` rows, chosen by
/// the header.
pub fn read_metrics_csv(path: &Path) -> Result<MetricsInput, AnalysisIoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h.as_str()));
    if col(&["tp"]).is_some() {
        return read_confusion_csv(path).map(MetricsInput::Counts);
    }
    let (Some(p), Some(r), Some(f)) = (
        col(&["precision", "p"]),
        col(&["recall", "r"]),
        col(&["f1", "f1-score", "f"]),
    ) else {
        return Err(AnalysisIoError::Format {
            path: path.display().to_string(),
            line: 1,
            message: "header must name tp,fp,fn or precision,recall,f1 columns".into(),
        });
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let line = record.position().map_or(0, |pos| pos.line());
        let num = |i: usize| -> Result<f64, AnalysisIoError> {
            let raw = record.get(i).unwrap_or("");
            raw.trim_end_matches('%').parse().map_err(|_| AnalysisIoError::Format {
                path: path.display().to_string(),
                line,
                message: format!("`{raw}` is not a number"),
            })
        };
        rows.push(ToolScores {
            tool: record.get(0).unwrap_or("").to_owned(),
            precision: num(p)?,
            recall: num(r)?,
            f1: num(f)?,
        });
    }
    Ok(MetricsInput::Scores(rows))
}

/// Reads the first two columns of a CSV with a header row as (rater A, rater B).
pub fn read_label_pairs_csv(path: &Path) -> Result<(Vec<String>, Vec<String>), AnalysisIoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        if record.len() < 2 {
            return Err(AnalysisIoError::Format {
                path: path.display().to_string(),
                line: record.position().map_or(0, |p| p.line()),
                message: "expected two label columns".into(),
            });
        }
        a.push(record[0].to_owned());
        b.push(record[1].to_owned());
    }
    Ok((a, b))
}

/// Loads every `record.json` below `dir`, in path order.
pub fn read_records(dir: &Path) -> Result<Vec<DatasetRecord>, AnalysisIoError> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| AnalysisIoError::Io {
            path: dir.display().to_string(),
            source: e.into(),
        })?;
        if entry.file_type().is_file() && entry.file_name() == "record.json" {
            paths.push(entry.into_path());
        }
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|source| AnalysisIoError::Io {
                path: p.display().to_string(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|source| AnalysisIoError::Json {
                path: p.display().to_string(),
                source,
            })
        })
        .collect()
}

/// Writes `cwe_id,frequency,mean_cvss` rows.
pub fn write_stats_csv(path: &Path, stats: &[CategoryStats]) -> Result<(), AnalysisIoError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for s in stats {
        writer.serialize(s).map_err(csv_err(path))?;
    }
    writer.flush().map_err(|source| AnalysisIoError::Io {
        path: path.display().to_string(),
        source,
    })
}
