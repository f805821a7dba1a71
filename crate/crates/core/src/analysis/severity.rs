use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::extractor::Severity;
use crate::fetcher::DatasetRecord;

/// Category key for findings without a resolved CWE.
pub const UNCLASSIFIED: &str = "unclassified";

/// Severity label to CVSS base score. The defaults are the midpoints of the
/// CVSS v3 qualitative ranges, with informational findings scored 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeverityMapping {
    pub info: f64,
    pub low: f64,
    pub medium: f64,
    pub high: f64,
    pub critical: f64,
}

impl Default for SeverityMapping {
    fn default() -> Self {
        Self {
            info: 0.0,
            low: 2.0,
            medium: 5.45,
            high: 7.95,
            critical: 9.5,
        }
    }
}

impl SeverityMapping {
    /// Scores must lie in [0, 10] and not decrease with severity.
    pub fn validate(&self) -> Result<(), String> {
        let scores = [self.info, self.low, self.medium, self.high, self.critical];
        if scores.iter().any(|s| !(0.0..=10.0).contains(s)) {
            return Err(format!("scores must lie in [0, 10]: {scores:?}"));
        }
        if scores.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("scores must be monotone in severity: {scores:?}"));
        }
        Ok(())
    }

    fn score(&self, sev: Severity) -> f64 {
        match sev {
            Severity::Info => self.info,
            Severity::Low => self.low,
            Severity::Medium => self.medium,
            Severity::High => self.high,
            Severity::Critical => self.critical,
        }
    }
}

pub fn severity_to_cvss(sev: Severity, mapping: &SeverityMapping) -> f64 {
    mapping.score(sev)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub cwe_id: String,
    pub frequency: usize,
    pub mean_cvss: f64,
}

/// Mean CVSS per assigned CWE (the last id of each finding's category).
/// Findings without a severity carry no score and are left out.
///
/// Output is sorted by frequency (descending), then id. Sums are taken over
/// per-severity counts, so the result does not depend on record order.
pub fn avg_cvss_by_category(records: &[DatasetRecord], mapping: &SeverityMapping) -> Vec<CategoryStats> {
    let mut counts: BTreeMap<String, [usize; 5]> = BTreeMap::new();
    for finding in records.iter().flat_map(|r| &r.findings) {
        let Some(sev) = finding.severity else { continue };
        let key = finding
            .category
            .as_ref()
            .and_then(|c| c.last())
            .map_or_else(|| UNCLASSIFIED.to_owned(), |id| id.to_string());
        counts.entry(key).or_default()[sev as usize] += 1;
    }
    let mut stats: Vec<CategoryStats> = counts
        .into_iter()
        .map(|(cwe_id, per_sev)| {
            let frequency: usize = per_sev.iter().sum();
            let total: f64 = Severity::ALL
                .iter()
                .zip(per_sev)
                .map(|(s, n)| n as f64 * mapping.score(*s))
                .sum();
            CategoryStats {
                cwe_id,
                frequency,
                mean_cvss: total / frequency as f64,
            }
        })
        .collect();
    stats.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.cwe_id.cmp(&b.cwe_id)));
    stats
}
