use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// 0 for equal labels, 1 otherwise.
    #[default]
    Nominal,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AlphaError {
    #[error("raters labeled different numbers of items ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("at least two items are required, got {0}")]
    TooFewItems(usize),
    #[error("alpha is undefined when every label is the same")]
    NoVariation,
}

/// Krippendorff's alpha for two raters who both labeled every item.
///
/// Built from the coincidence matrix: each item contributes one count to
/// `o[a][b]` and one to `o[b][a]`. With `n_c` the row sums and `n` their
/// total, `alpha = 1 - (n - 1) * sum_{c != k} o_ck / sum_{c != k} n_c n_k`.
/// All sums are integer, so perfect agreement gives exactly 1.0.
pub fn krippendorff_alpha<T: Ord>(labels_a: &[T], labels_b: &[T], distance: Distance) -> Result<f64, AlphaError> {
    let Distance::Nominal = distance;
    if labels_a.len() != labels_b.len() {
        return Err(AlphaError::LengthMismatch {
            a: labels_a.len(),
            b: labels_b.len(),
        });
    }
    if labels_a.len() < 2 {
        return Err(AlphaError::TooFewItems(labels_a.len()));
    }
    let mut index: BTreeMap<&T, usize> = BTreeMap::new();
    for label in labels_a.iter().chain(labels_b) {
        let next = index.len();
        index.entry(label).or_insert(next);
    }
    let m = index.len();
    if m < 2 {
        return Err(AlphaError::NoVariation);
    }
    let mut o = vec![vec![0u64; m]; m];
    for (a, b) in labels_a.iter().zip(labels_b) {
        let (i, j) = (index[a], index[b]);
        o[i][j] += 1;
        o[j][i] += 1;
    }
    let n_c: Vec<u64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: u64 = n_c.iter().sum();
    let observed: u64 = (0..m)
        .flat_map(|c| (0..m).map(move |k| (c, k)))
        .filter(|(c, k)| c != k)
        .map(|(c, k)| o[c][k])
        .sum();
    let expected: u64 = n * n - n_c.iter().map(|x| x * x).sum::<u64>();
    Ok(1.0 - (n - 1) as f64 * observed as f64 / expected as f64)
}
