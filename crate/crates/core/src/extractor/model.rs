use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::fetcher::validate_address;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Low,
    Medium,
    High,
    Critical,
}

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity::Info,
        Severity::Low,
        Severity::Medium,
        Severity::High,
        Severity::Critical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Low => "low",
            Severity::Medium => "medium",
            Severity::High => "high",
            Severity::Critical => "critical",
        }
    }

    /// Maps labels auditors and models commonly use onto the five levels.
    pub fn coerce(raw: &str) -> Option<Severity> {
        let key: String = raw
            .trim()
            .to_lowercase()
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect();
        let sev = match key.as_str() {
            "info" | "informational" | "information" | "informative" | "note" | "notice" | "none" | "gas"
            | "gasoptimization" | "optimization" | "nc" | "noncritical" | "qa" => Severity::Info,
            "low" | "minor" | "lowrisk" | "lowseverity" => Severity::Low,
            "medium" | "med" | "moderate" | "mediumrisk" | "mediumseverity" => Severity::Medium,
            "high" | "major" | "highrisk" | "highseverity" => Severity::High,
            "critical" | "crit" | "severe" | "criticalrisk" | "criticalseverity" => Severity::Critical,
            _ => return None,
        };
        Some(sev)
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectInfo {
    #[serde(default)]
    pub url: String,
    #[serde(default)]
    pub commit_id: String,
    #[serde(default)]
    pub address: String,
    #[serde(default)]
    pub chain: String,
    #[serde(default)]
    pub compiler_version: Option<String>,
    #[serde(default)]
    pub file_paths: Vec<String>,
}

impl ProjectInfo {
    pub fn is_empty(&self) -> bool {
        self.url.is_empty()
            && self.commit_id.is_empty()
            && self.address.is_empty()
            && self.chain.is_empty()
            && self.compiler_version.is_none()
            && self.file_paths.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub id: u32,
    pub title: String,
    #[serde(default)]
    pub description: String,
    /// `None` when the source gave no recognizable severity.
    #[serde(default)]
    pub severity: Option<Severity>,
    #[serde(default)]
    pub location: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredReport {
    #[serde(default)]
    pub project_info: ProjectInfo,
    #[serde(default)]
    pub findings: Vec<Finding>,
}

impl StructuredReport {
    pub fn is_empty(&self) -> bool {
        self.project_info.is_empty() && self.findings.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
#[error("model output does not match the report schema: {0}")]
pub struct SchemaError(pub String);

/// A schema-checked report plus notes on everything that was coerced or dropped.
#[derive(Debug, Clone, Default)]
pub struct Validated {
    pub report: StructuredReport,
    pub diagnostics: Vec<String>,
}

/// Commit ids made only of hex digits must look like a (possibly abbreviated)
/// git hash; anything else is taken as a branch or tag name.
pub fn valid_commit_id(s: &str) -> bool {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return true;
    }
    !(s.len() > 40 || (s.len() < 7 && s.bytes().any(|b| b.is_ascii_digit())))
}

fn scalar_text(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.trim().to_owned(),
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::Bool(b)) => b.to_string(),
        Some(other) => other.to_string(),
    }
}

/// Checks a model response against the report schema, coercing what can be
/// repaired and dropping what cannot. Finding ids are renumbered from 1.
pub fn validate_report(value: &Value) -> Result<Validated, SchemaError> {
    let empty = Map::new();
    let obj = match value {
        Value::Object(o) => o,
        // a bare list of findings is accepted
        Value::Array(_) => &empty,
        other => return Err(SchemaError(format!("expected an object, got {other}"))),
    };
    let mut diagnostics = Vec::new();

    let pi = match obj.get("project_info") {
        Some(Value::Object(p)) => p,
        None | Some(Value::Null) => &empty,
        Some(_) => {
            diagnostics.push("project_info is not an object; ignored".to_owned());
            &empty
        }
    };
    let mut project_info = ProjectInfo {
        url: scalar_text(pi.get("url")),
        commit_id: scalar_text(pi.get("commit_id")),
        address: scalar_text(pi.get("address")),
        chain: scalar_text(pi.get("chain")),
        compiler_version: Some(scalar_text(pi.get("compiler_version"))).filter(|s| !s.is_empty()),
        file_paths: Vec::new(),
    };
    if !project_info.address.is_empty() && !validate_address(&project_info.address) {
        diagnostics.push(format!("dropped malformed address `{}`", project_info.address));
        project_info.address.clear();
    }
    if !valid_commit_id(&project_info.commit_id) {
        diagnostics.push(format!("dropped malformed commit id `{}`", project_info.commit_id));
        project_info.commit_id.clear();
    }

    let raw_findings: &[Value] = match (value, obj.get("findings")) {
        (Value::Array(items), _) => items,
        (_, Some(Value::Array(items))) => items,
        (_, None | Some(Value::Null)) => &[],
        (_, Some(_)) => {
            diagnostics.push("findings is not an array; ignored".to_owned());
            &[]
        }
    };

    let mut findings = Vec::new();
    for (i, raw) in raw_findings.iter().enumerate() {
        let Value::Object(f) = raw else {
            diagnostics.push(format!("finding #{i} is not an object; dropped"));
            continue;
        };
        let title = scalar_text(f.get("title"));
        if title.is_empty() {
            diagnostics.push(format!("finding #{i} has no title; dropped"));
            continue;
        }
        let raw_sev = scalar_text(f.get("severity"));
        let severity = Severity::coerce(&raw_sev);
        if severity.is_none() && !raw_sev.is_empty() {
            diagnostics.push(format!("finding `{title}`: unknown severity `{raw_sev}` dropped"));
        }
        findings.push(Finding {
            id: findings.len() as u32 + 1,
            title,
            description: scalar_text(f.get("description")),
            severity,
            location: scalar_text(f.get("location")),
        });
    }

    for d in &diagnostics {
        tracing::debug!(diagnostic = %d, "schema coercion");
    }
    Ok(Validated {
        report: StructuredReport { project_info, findings },
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn severity_synonyms() {
        assert_eq!(Severity::coerce("Informational"), Some(Severity::Info));
        assert_eq!(Severity::coerce(" HIGH "), Some(Severity::High));
        assert_eq!(Severity::coerce("Major"), Some(Severity::High));
        assert_eq!(Severity::coerce("moderate"), Some(Severity::Medium));
        assert_eq!(Severity::coerce("Non-Critical"), Some(Severity::Info));
        assert_eq!(Severity::coerce("urgent-ish"), None);
    }

    #[test]
    fn severity_serializes_lowercase() {
        assert_eq!(serde_json::to_string(&Severity::Critical).unwrap(), "\"critical\"");
    }

    #[test]
    fn commit_id_shapes() {
        assert!(valid_commit_id(""));
        assert!(valid_commit_id("a1b2c3d"));
        assert!(valid_commit_id(&"f".repeat(40)));
        assert!(!valid_commit_id(&"f".repeat(41)));
        assert!(!valid_commit_id("a1b2"));
        assert!(valid_commit_id("audit-fixes"));
        assert!(valid_commit_id("v1.2.0"));
        assert!(valid_commit_id("beef"));
    }

    #[test]
    fn validation_coerces_and_drops() {
        let v = json!({
            "project_info": {"url": "https://github.com/a/b", "commit_id": null, "address": "0x123", "chain": "ethereum"},
            "findings": [
                {"id": 7, "title": "Reentrancy", "severity": "Major", "description": "d", "location": "Vault.sol"},
                {"id": 8, "title": "", "severity": "low"},
                {"id": 9, "title": "Odd", "severity": "purple"},
                "junk"
            ]
        });
        let out = validate_report(&v).unwrap();
        let r = out.report;
        assert_eq!(r.project_info.url, "https://github.com/a/b");
        assert_eq!(r.project_info.address, "");
        assert_eq!(r.findings.len(), 2);
        assert_eq!(r.findings[0].id, 1);
        assert_eq!(r.findings[0].severity, Some(Severity::High));
        assert_eq!(r.findings[1].id, 2);
        assert_eq!(r.findings[1].severity, None);
        assert_eq!(out.diagnostics.len(), 4);
    }

    #[test]
    fn non_object_is_schema_error() {
        assert!(validate_report(&json!("text")).is_err());
        let bare = validate_report(&json!([{"title": "T", "severity": "low"}])).unwrap();
        assert_eq!(bare.report.findings.len(), 1);
    }
}
