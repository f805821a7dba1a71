use std::collections::HashSet;

use super::model::{Finding, ProjectInfo, StructuredReport};

/// Case-folded, punctuation-free, whitespace-collapsed title used as the
/// duplicate key for findings.
pub fn normalize_title(title: &str) -> String {
    let folded: String = title
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c
            } else if c.is_whitespace() {
                ' '
            } else {
                '\u{0}'
            }
        })
        .filter(|&c| c != '\u{0}')
        .collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops findings whose normalized title already appeared; the first
/// occurrence is kept untouched.
pub fn dedup_findings(findings: Vec<Finding>) -> Vec<Finding> {
    let mut seen = HashSet::new();
    findings
        .into_iter()
        .filter(|f| seen.insert(normalize_title(&f.title)))
        .collect()
}

fn earlier(a: &str, b: &str) -> String {
    if a.trim().is_empty() { b } else { a }.to_owned()
}

pub fn merge_project_info(a: &ProjectInfo, b: &ProjectInfo) -> ProjectInfo {
    ProjectInfo {
        url: earlier(&a.url, &b.url),
        commit_id: earlier(&a.commit_id, &b.commit_id),
        address: earlier(&a.address, &b.address),
        chain: earlier(&a.chain, &b.chain),
        compiler_version: a.compiler_version.clone().or_else(|| b.compiler_version.clone()),
        file_paths: if a.file_paths.is_empty() {
            b.file_paths.clone()
        } else {
            a.file_paths.clone()
        },
    }
}

/// The ⊕ operator: `a` precedes `b` in the document. Scalar project fields
/// keep the earlier non-empty value, findings are concatenated, deduplicated
/// by title and renumbered from 1.
pub fn merge(a: &StructuredReport, b: &StructuredReport) -> StructuredReport {
    let findings = a.findings.iter().chain(&b.findings).cloned().collect();
    let mut findings = dedup_findings(findings);
    renumber(&mut findings);
    StructuredReport {
        project_info: merge_project_info(&a.project_info, &b.project_info),
        findings,
    }
}

pub fn merge_all<'a>(reports: impl IntoIterator<Item = &'a StructuredReport>) -> StructuredReport {
    reports
        .into_iter()
        .fold(StructuredReport::default(), |acc, r| merge(&acc, r))
}

pub fn renumber(findings: &mut [Finding]) {
    for (i, f) in findings.iter_mut().enumerate() {
        f.id = i as u32 + 1;
    }
}
