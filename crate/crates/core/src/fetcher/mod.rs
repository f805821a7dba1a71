//! Source retrieval for audited projects and dataset record output.

mod explorer;
mod record;
mod repo;

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::extractor::ProjectInfo;

pub use explorer::{
    fetch_onchain, ExplorerClient, ExplorerConfig, ExplorerEndpoint, HttpResponse, HttpTransport, ReqwestTransport,
};
pub use record::{assemble_record, compiler_version, write_record, DatasetRecord, RecordFinding};
pub use repo::{fetch_repo, GitCliClient, RepoClient};

/// Extensions kept in a bundle unless configured otherwise.
pub const DEFAULT_EXTENSIONS: &[&str] = &["sol"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceOrigin {
    Repository,
    Onchain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    /// Relative, `/`-separated path.
    pub path: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceBundle {
    pub origin: SourceOrigin,
    /// `url@commit` or `chain:address`.
    pub identifier: String,
    pub files: Vec<SourceFile>,
    pub retrieved_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("no files with extensions {extensions:?} in {identifier}")]
    EmptyBundle {
        identifier: String,
        extensions: Vec<String>,
    },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("no verified source for {0}")]
    NoSource(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsafe source path `{0}`")]
    UnsafePath(String),
    #[error("record assembly failed: {0}")]
    Assembly(String),
    #[error("{0} already exists (use force to overwrite)")]
    Conflict(String),
    #[error("git: {0}")]
    Git(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report has neither a repository URL with commit nor an on-chain address")]
    NoIdentifier,
    #[error("all source candidates failed: {}", .0.join("; "))]
    AllFailed(Vec<String>),
}

impl FetchError {
    pub(crate) fn io(path: impl fmt::Display, source: std::io::Error) -> Self {
        FetchError::Io {
            path: path.to_string(),
            source,
        }
    }
}

/// True iff `s` is `0x` followed by exactly 40 hex digits of either case.
pub fn validate_address(s: &str) -> bool {
    s.len() == 42 && (s.starts_with("0x") || s.starts_with("0X")) && s[2..].bytes().all(|b| b.is_ascii_hexdigit())
}

/// Normalizes a bundle path to a relative `/`-separated form, rejecting
/// anything that could leave the directory it is joined onto.
pub fn sanitize_relative_path(raw: &str) -> Result<String, FetchError> {
    let unsafe_path = || FetchError::UnsafePath(raw.to_owned());
    let unified = raw.replace('\\', "/");
    if unified.starts_with('/') || unified.contains('\0') {
        return Err(unsafe_path());
    }
    let bytes = unified.as_bytes();
    if bytes.len() >= 2 && bytes[1] == b':' && bytes[0].is_ascii_alphabetic() {
        return Err(unsafe_path());
    }
    let mut parts = Vec::new();
    for part in unified.split('/') {
        match part {
            "" | "." => continue,
            ".." => return Err(unsafe_path()),
            p => parts.push(p),
        }
    }
    if parts.is_empty() {
        return Err(unsafe_path());
    }
    Ok(parts.join("/"))
}

pub(crate) fn has_extension(path: &str, extensions: &[String]) -> bool {
    let Some((_, ext)) = path.rsplit_once('.') else {
        return false;
    };
    extensions
        .iter()
        .any(|e| e.trim_start_matches('.').eq_ignore_ascii_case(ext))
}

/// Retrieves the audited code for a report: the repository when URL and
/// commit are known, the explorer otherwise or when the repository fails.
pub fn fetch_sources(
    info: &ProjectInfo,
    repo: &dyn RepoClient,
    explorer: Option<&ExplorerClient>,
    extensions: &[String],
) -> Result<SourceBundle, FetchError> {
    let has_repo = !info.url.is_empty() && !info.commit_id.is_empty();
    let has_address = !info.address.is_empty();
    if !has_repo && !has_address {
        return Err(FetchError::NoIdentifier);
    }
    let mut failures = Vec::new();
    if has_repo {
        match fetch_repo(&info.url, &info.commit_id, repo, extensions) {
            Ok(bundle) => return Ok(bundle),
            Err(e) if !has_address => return Err(e),
            Err(e) => {
                tracing::warn!(error = %e, "repository fetch failed; trying explorer");
                failures.push(format!("repository: {e}"));
            }
        }
    }
    let Some(explorer) = explorer else {
        failures.push("explorer: no explorer configured".into());
        return Err(FetchError::AllFailed(failures));
    };
    match fetch_onchain(&info.address, &info.chain, explorer) {
        Ok(mut bundle) => {
            bundle.files.retain(|f| has_extension(&f.path, extensions));
            if bundle.files.is_empty() {
                return Err(FetchError::EmptyBundle {
                    identifier: bundle.identifier,
                    extensions: extensions.to_vec(),
                });
            }
            Ok(bundle)
        }
        Err(e) if failures.is_empty() => Err(e),
        Err(e) => {
            failures.push(format!("explorer: {e}"));
            Err(FetchError::AllFailed(failures))
        }
    }
}
