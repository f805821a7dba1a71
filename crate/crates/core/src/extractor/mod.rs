//! Turns chunked audit reports into structured findings.

mod mapreduce;
mod merge;
mod model;

pub use mapreduce::{
    extract_report, group_partials, map_chunk, reduce_group, reduce_grouped, ExtractError, ExtractionOutcome,
    ExtractorConfig, ReduceOutcome,
};
pub use merge::{dedup_findings, merge, merge_all, merge_project_info, normalize_title, renumber};
pub use model::{
    valid_commit_id, validate_report, Finding, ProjectInfo, SchemaError, Severity, StructuredReport, Validated,
};
