//! Dataset statistics and evaluation metrics.

mod alpha;
mod io;
mod metrics;
mod severity;
mod treemap;

pub use alpha::{krippendorff_alpha, AlphaError, Distance};
pub use io::{
    read_confusion_csv, read_label_pairs_csv, read_metrics_csv, read_records, write_stats_csv, AnalysisIoError,
    MetricsInput, ToolCounts, ToolScores,
};
pub use metrics::{macro_average, prf1, ConfusionCounts, Prf1};
pub use severity::{avg_cvss_by_category, severity_to_cvss, CategoryStats, SeverityMapping, UNCLASSIFIED};
pub use treemap::{treemap_export, TreemapNode, DIRECT_LABEL};
