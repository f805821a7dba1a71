use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Precision, recall and F1 as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when `tp + fp == 0` and precision was reported as 0.
    #[serde(default)]
    pub precision_undefined: bool,
    /// Set when `tp + fn == 0` and recall was reported as 0.
    #[serde(default)]
    pub recall_undefined: bool,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn prf1(c: ConfusionCounts) -> Prf1 {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Prf1 {
        precision: p,
        recall: r,
        f1,
        precision_undefined: precision.is_none(),
        recall_undefined: recall.is_none(),
    }
}

/// Unweighted column means of (precision, recall, f1) rows.
pub fn macro_average(rows: &[(f64, f64, f64)]) -> Option<(f64, f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let (p, r, f) = rows.iter().fold((0.0, 0.0, 0.0), |acc, row| {
        (acc.0 + row.0, acc.1 + row.1, acc.2 + row.2)
    });
    Some((p / n, r / n, f / n))
}
