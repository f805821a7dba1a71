use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{sanitize_relative_path, FetchError, SourceBundle};
use crate::classifier::{ClassificationPath, Terminal};
use crate::extractor::{ProjectInfo, Severity, StructuredReport};
use crate::taxonomy::CweId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFinding {
    pub id: u32,
    /// Selected CWE ids from pillar down; the last one is the assigned
    /// category. `None` when classification was unresolved.
    pub category: Option<Vec<CweId>>,
    pub terminal: Terminal,
    pub title: String,
    pub description: String,
    pub severity: Option<Severity>,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub path: String,
    pub project_info: ProjectInfo,
    pub findings: Vec<RecordFinding>,
}

impl DatasetRecord {
    /// Pretty JSON with a trailing newline, as written to disk.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("records serialize");
        text.push('\n');
        text
    }
}

static PRAGMA: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"pragma\s+solidity\s+([^;]+);").expect("valid regex"));

/// Most frequent `pragma solidity` constraint across files, counting each
/// distinct constraint once per file. Ties go to the lexicographically
/// greatest constraint.
pub fn compiler_version(bundle: &SourceBundle) -> Option<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for file in &bundle.files {
        let mut seen: Vec<String> = Vec::new();
        for caps in PRAGMA.captures_iter(&file.content) {
            let version = caps[1].split_whitespace().collect::<Vec<_>>().join(" ");
            if !seen.contains(&version) {
                seen.push(version);
            }
        }
        for v in seen {
            *counts.entry(v).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|(va, ca), (vb, cb)| ca.cmp(cb).then_with(|| va.cmp(vb)))
        .map(|(v, _)| v)
}

pub fn assemble_record(
    report_path: &str,
    report: &StructuredReport,
    paths: &BTreeMap<u32, ClassificationPath>,
    bundle: &SourceBundle,
) -> Result<DatasetRecord, FetchError> {
    let name = Path::new(report_path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .ok_or_else(|| FetchError::Assembly(format!("report path `{report_path}` has no file name")))?;

    let mut file_paths = bundle
        .files
        .iter()
        .map(|f| sanitize_relative_path(&f.path))
        .collect::<Result<Vec<_>, _>>()?;
    file_paths.sort();
    file_paths.dedup();

    let mut project_info = report.project_info.clone();
    project_info.file_paths = file_paths;
    project_info.compiler_version = compiler_version(bundle).or(project_info.compiler_version);

    let mut findings = Vec::with_capacity(report.findings.len());
    for f in &report.findings {
        let path = paths
            .get(&f.id)
            .ok_or_else(|| FetchError::Assembly(format!("finding {} has no classification", f.id)))?;
        let category = match path.terminal {
            Terminal::Unresolved => None,
            Terminal::Leaf | Terminal::Fallback => {
                let ids = path.flattened();
                if ids.is_empty() {
                    return Err(FetchError::Assembly(format!(
                        "finding {} is {} but has an empty path",
                        f.id,
                        path.terminal.as_str()
                    )));
                }
                Some(ids)
            }
        };
        findings.push(RecordFinding {
            id: f.id,
            category,
            terminal: path.terminal,
            title: f.title.clone(),
            description: f.description.clone(),
            severity: f.severity,
            location: f.location.clone(),
        });
    }
    Ok(DatasetRecord {
        path: name,
        project_info,
        findings,
    })
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), FetchError> {
    let dir = path.parent().expect("target has a parent");
    std::fs::create_dir_all(dir).map_err(|e| FetchError::io(dir.display(), e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FetchError::io(dir.display(), e))?;
    tmp.write_all(bytes).map_err(|e| FetchError::io(path.display(), e))?;
    tmp.persist(path).map_err(|e| FetchError::io(path.display(), e.error))?;
    Ok(())
}

/// Writes `<out_dir>/<report stem>/record.json` and the bundle files under
/// `sources/`. Returns the record path.
pub fn write_record(
    record: &DatasetRecord,
    bundle: &SourceBundle,
    out_dir: &Path,
    force: bool,
) -> Result<PathBuf, FetchError> {
    let stem = Path::new(&record.path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = sanitize_relative_path(&stem)?;
    if stem.contains('/') {
        return Err(FetchError::UnsafePath(stem));
    }
    let files = bundle
        .files
        .iter()
        .map(|f| Ok((sanitize_relative_path(&f.path)?, f.content.as_bytes())))
        .collect::<Result<Vec<_>, FetchError>>()?;

    let dir = out_dir.join(&stem);
    let record_path = dir.join("record.json");
    if record_path.exists() && !force {
        return Err(FetchError::Conflict(record_path.display().to_string()));
    }
    let sources = dir.join("sources");
    if sources.exists() {
        std::fs::remove_dir_all(&sources).map_err(|e| FetchError::io(sources.display(), e))?;
    }
    for (rel, content) in files {
        atomic_write(&sources.join(rel), content)?;
    }
    atomic_write(&record_path, record.to_json().as_bytes())?;
    Ok(record_path)
}
