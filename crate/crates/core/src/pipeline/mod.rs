//! Batch orchestration: report files in, dataset records out.
//!
//! Every per-report stage reads and writes files under `<work>/<report stem>/`,
//! so a build can be replayed one stage at a time.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use config::{ConfigError, ConfigOverrides, PipelineConfig, ProviderSection, ENV_PREFIX};

use crate::analysis::{
    avg_cvss_by_category, krippendorff_alpha, macro_average, prf1, read_label_pairs_csv, read_metrics_csv,
    read_records, treemap_export, write_stats_csv, AlphaError, AnalysisIoError, Distance, MetricsInput,
    SeverityMapping,
};
use crate::classifier::{classify_traced, ClassificationPath, ClassifierConfig, ClassifyError, Terminal, TraceEntry};
use crate::extractor::{extract_report, ExtractError, ExtractorConfig, StructuredReport};
use crate::fetcher::{
    assemble_record, fetch_sources, write_record, ExplorerClient, FetchError, GitCliClient, RepoClient,
    ReqwestTransport,
};
use crate::ingest::{chunk_document, load_document, Chunk, IngestError};
use crate::llm::{CompletionProvider, HttpProvider, LlmError, ScriptedProvider};
use crate::parallel::map_bounded;
use crate::taxonomy::{load_hardware_list, CweTree, TaxonomyError};

pub const CHUNKS_FILE: &str = "chunks.json";
pub const REPORT_FILE: &str = "report.json";
pub const EXTRACTION_LOG_FILE: &str = "extraction.json";
pub const CLASSIFIED_FILE: &str = "classified.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const STATS_FILE: &str = "stats.csv";
pub const TREEMAP_FILE: &str = "treemap.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Chunk,
    Extract,
    Classify,
    Fetch,
    Analyze,
    Alpha,
    Metrics,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Chunk => "chunk",
            Stage::Extract => "extract",
            Stage::Classify => "classify",
            Stage::Fetch => "fetch",
            Stage::Analyze => "analyze",
            Stage::Alpha => "alpha",
            Stage::Metrics => "metrics",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("taxonomy: {0}")]
    Taxonomy(#[from] TaxonomyError),
    #[error("provider setup: {0}")]
    ProviderSetup(#[from] LlmError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("stage `{stage}` is missing its inputs (run the earlier stage first): {}", display_paths(.missing))]
    StageDependency { stage: Stage, missing: Vec<PathBuf> },
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
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Analysis(#[from] AnalysisIoError),
    #[error(transparent)]
    Alpha(#[from] AlphaError),
}

impl PipelineError {
    /// Errors that mean the run as a whole cannot start.
    pub fn is_setup(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Taxonomy(_)
                | PipelineError::ProviderSetup(_)
                | PipelineError::Usage(_)
        )
    }
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("work artifacts serialize");
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    std::fs::write(path, text).map_err(io_error(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Map and reduce bookkeeping kept next to `report.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionLog {
    pub map_failures: Vec<(usize, String)>,
    /// Half-open ranges of partial indexes reduced together.
    pub groups: Vec<(usize, usize)>,
    pub reduce_fallbacks: usize,
    pub diagnostics: Vec<String>,
}

/// Classification paths keyed by finding id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedReport {
    pub paths: BTreeMap<u32, ClassificationPath>,
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub finding: u32,
    pub trace: Vec<TraceEntry>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportFailure {
    pub report: PathBuf,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub ok: usize,
    pub failed: usize,
    pub records: Vec<PathBuf>,
    pub failures: Vec<ReportFailure>,
    /// Failure count per stage name.
    pub stage_failures: BTreeMap<String, usize>,
}

impl BuildSummary {
    fn push_failure(&mut self, failure: ReportFailure) {
        self.failed += 1;
        *self.stage_failures.entry(failure.stage.clone()).or_default() += 1;
        self.failures.push(failure);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
    pub failures: Vec<ReportFailure>,
    /// Human-readable result for stages that print rather than write.
    pub text: Option<String>,
}

/// Loads the taxonomy named in `config` and prunes the hardware list, if any.
pub fn load_taxonomy(config: &PipelineConfig) -> Result<CweTree, PipelineError> {
    let path = config
        .taxonomy
        .as_deref()
        .ok_or_else(|| ConfigError::Invalid(vec!["a taxonomy path is required".into()]))?;
    let tree = CweTree::load_file(path, config.mapping_notes.as_deref())?;
    let Some(list) = &config.hardware_list else {
        return Ok(tree);
    };
    let hardware = load_hardware_list(list)?;
    let (pruned, report) = tree.prune_hardware(&hardware);
    tracing::info!(
        before = tree.len(),
        after = pruned.len(),
        missing = report.missing.len(),
        "pruned hardware weaknesses"
    );
    Ok(pruned)
}

fn report_stem(report: &Path) -> Result<String, PipelineError> {
    report
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty() && s != "." && s != "..")
        .ok_or_else(|| PipelineError::Usage(format!("`{}` has no usable file name", report.display())))
}

pub struct Pipeline {
    config: PipelineConfig,
    tree: CweTree,
    provider: Box<dyn CompletionProvider>,
    repo: Box<dyn RepoClient>,
    explorer: Option<ExplorerClient>,
    /// Scripted providers answer in call order, so work runs sequentially.
    sequential: bool,
}

impl Pipeline {
    /// Validates `config`, loads the taxonomy and builds the real clients.
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let tree = load_taxonomy(&config)?;
        let (provider, sequential): (Box<dyn CompletionProvider>, bool) = match &config.mock_script {
            Some(script) => (Box::new(ScriptedProvider::from_file(script)?), true),
            None => {
                let pc = config
                    .provider_config(|k| std::env::var(k).ok())
                    .expect("validated config has an endpoint");
                (Box::new(HttpProvider::new(pc)?), false)
            }
        };
        let repo = Box::new(GitCliClient {
            mirror_root: config.repo_mirror.clone(),
            ..GitCliClient::default()
        });
        let explorer = if config.explorer_enabled {
            let transport = ReqwestTransport::new(Duration::from_secs(config.provider.timeout_secs))?;
            Some(ExplorerClient::new(config.explorers.clone(), Box::new(transport)))
        } else {
            None
        };
        Ok(Self {
            config,
            tree,
            provider,
            repo,
            explorer,
            sequential,
        })
    }

    /// Assembles a pipeline from ready-made parts. Work runs sequentially
    /// when `sequential` is set, whatever the configured parallelism.
    pub fn with_parts(
        config: PipelineConfig,
        tree: CweTree,
        provider: Box<dyn CompletionProvider>,
        repo: Box<dyn RepoClient>,
        explorer: Option<ExplorerClient>,
        sequential: bool,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            config,
            tree,
            provider,
            repo,
            explorer,
            sequential,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn tree(&self) -> &CweTree {
        &self.tree
    }

    fn report_workers(&self) -> usize {
        if self.sequential {
            1
        } else {
            self.config.parallel
        }
    }

    fn map_workers(&self) -> usize {
        if self.sequential {
            1
        } else {
            self.config.map_parallelism
        }
    }

    pub fn work_dir_for(&self, report: &Path) -> Result<PathBuf, PipelineError> {
        Ok(self.config.work_dir.join(report_stem(report)?))
    }

    pub fn chunk_report(&self, report: &Path) -> Result<Vec<Chunk>, PipelineError> {
        let work = self.work_dir_for(report)?;
        let text = load_document(report, self.config.converter.as_ref())?;
        let chunks = chunk_document(&text, self.config.chunk_length, &self.config.tokenizer)?;
        write_json(&work.join(CHUNKS_FILE), &chunks)?;
        tracing::debug!(report = %report.display(), chunks = chunks.len(), "chunked");
        Ok(chunks)
    }

    pub fn extract_chunks(&self, report: &Path, chunks: &[Chunk]) -> Result<StructuredReport, PipelineError> {
        let work = self.work_dir_for(report)?;
        let config = ExtractorConfig {
            chunk_length: self.config.chunk_length,
            tokenizer: self.config.tokenizer,
            settings: self.config.request_settings(),
            parallelism: self.map_workers(),
            work_dir: Some(work.clone()),
            resume: self.config.resume,
        };
        let outcome = extract_report(chunks, self.provider.as_ref(), &config)?;
        let log = ExtractionLog {
            map_failures: outcome.map_failures,
            groups: outcome.groups.iter().map(|g| (g.start, g.end)).collect(),
            reduce_fallbacks: outcome.reduce_fallbacks,
            diagnostics: outcome.diagnostics,
        };
        write_json(&work.join(EXTRACTION_LOG_FILE), &log)?;
        write_json(&work.join(REPORT_FILE), &outcome.report)?;
        tracing::debug!(report = %report.display(), findings = outcome.report.findings.len(), "extracted");
        Ok(outcome.report)
    }

    /// Classifies every finding in order. A finding whose classification
    /// fails is recorded as unresolved with the error as a diagnostic.
    pub fn classify_report(
        &self,
        report: &Path,
        structured: &StructuredReport,
    ) -> Result<ClassifiedReport, PipelineError> {
        let work = self.work_dir_for(report)?;
        let config = ClassifierConfig {
            k: self.config.k,
            max_depth: self.config.max_depth,
            selection_retries: self.config.selection_retries,
            settings: self.config.request_settings(),
        };
        let mut classified = ClassifiedReport::default();
        let mut trace = String::new();
        for finding in &structured.findings {
            let (path, line) = match classify_traced(finding, &self.tree, self.provider.as_ref(), &config) {
                Ok(c) => (
                    c.path,
                    TraceLine {
                        finding: finding.id,
                        trace: c.trace,
                        diagnostics: c.diagnostics,
                    },
                ),
                Err(e @ ClassifyError::Config(_)) => return Err(e.into()),
                Err(e) => {
                    tracing::warn!(finding = finding.id, error = %e, "classification failed; marked unresolved");
                    (
                        ClassificationPath {
                            steps: vec![],
                            terminal: Terminal::Unresolved,
                        },
                        TraceLine {
                            finding: finding.id,
                            trace: vec![],
                            diagnostics: vec![e.to_string()],
                        },
                    )
                }
            };
            trace.push_str(&serde_json::to_string(&line).expect("trace serializes"));
            trace.push('\n');
            classified.paths.insert(finding.id, path);
        }
        write_json(&work.join(CLASSIFIED_FILE), &classified)?;
        write_text(&work.join(TRACE_FILE), &trace)?;
        Ok(classified)
    }

    /// Fetches sources and writes the dataset record. Returns its path.
    pub fn fetch_report(
        &self,
        report: &Path,
        structured: &StructuredReport,
        classified: &ClassifiedReport,
    ) -> Result<PathBuf, PipelineError> {
        let bundle = fetch_sources(
            &structured.project_info,
            self.repo.as_ref(),
            self.explorer.as_ref(),
            &self.config.extensions,
        )?;
        let record = assemble_record(&report.to_string_lossy(), structured, &classified.paths, &bundle)?;
        Ok(write_record(&record, &bundle, &self.config.out_dir, self.config.force)?)
    }

    fn process(&self, report: &Path) -> Result<PathBuf, (Stage, PipelineError)> {
        let chunks = self.chunk_report(report).map_err(|e| (Stage::Chunk, e))?;
        let structured = self.extract_chunks(report, &chunks).map_err(|e| (Stage::Extract, e))?;
        let classified = self
            .classify_report(report, &structured)
            .map_err(|e| (Stage::Classify, e))?;
        self.fetch_report(report, &structured, &classified)
            .map_err(|e| (Stage::Fetch, e))
    }

    /// Reports sharing a file stem would share a work and output directory;
    /// every occurrence after the first is rejected.
    fn duplicate_stems(reports: &[PathBuf]) -> Result<Vec<bool>, PipelineError> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        reports
            .iter()
            .map(|r| {
                let stem = report_stem(r)?;
                let n = seen.entry(stem).or_default();
                *n += 1;
                Ok(*n > 1)
            })
            .collect()
    }

    /// Runs every stage for every report. A failing report is summarized and
    /// never stops the others.
    pub fn run_build(&self, reports: &[PathBuf]) -> Result<BuildSummary, PipelineError> {
        if reports.is_empty() {
            return Err(PipelineError::Usage("no input reports given".into()));
        }
        let duplicate = Self::duplicate_stems(reports)?;
        let results = map_bounded(reports, self.report_workers(), |i, report| {
            if duplicate[i] {
                return Err(("input".to_owned(), "another input has the same file stem".to_owned()));
            }
            let _span = tracing::info_span!("report", path = %report.display()).entered();
            self.process(report)
                .map_err(|(stage, e)| (stage.to_string(), e.to_string()))
        });

        let mut summary = BuildSummary::default();
        for (report, result) in reports.iter().zip(results) {
            match result {
                Ok(record) => {
                    tracing::info!(report = %report.display(), record = %record.display(), "record written");
                    summary.ok += 1;
                    summary.records.push(record);
                }
                Err((stage, message)) => {
                    tracing::error!(report = %report.display(), stage = %stage, "{message}");
                    summary.push_failure(ReportFailure {
                        report: report.clone(),
                        stage,
                        message,
                    });
                }
            }
        }
        Ok(summary)
    }

    fn prerequisites(&self, stage: Stage, report: &Path) -> Result<Vec<PathBuf>, PipelineError> {
        let work = self.work_dir_for(report)?;
        let names: &[&str] = match stage {
            Stage::Chunk => return Ok(vec![report.to_path_buf()]),
            Stage::Extract => &[CHUNKS_FILE],
            Stage::Classify => &[REPORT_FILE],
            Stage::Fetch => &[REPORT_FILE, CLASSIFIED_FILE],
            _ => &[],
        };
        Ok(names.iter().map(|n| work.join(n)).collect())
    }

    fn run_one(&self, stage: Stage, report: &Path) -> Result<PathBuf, PipelineError> {
        let work = self.work_dir_for(report)?;
        match stage {
            Stage::Chunk => self.chunk_report(report).map(|_| work.join(CHUNKS_FILE)),
            Stage::Extract => {
                let chunks: Vec<Chunk> = read_json(&work.join(CHUNKS_FILE))?;
                self.extract_chunks(report, &chunks).map(|_| work.join(REPORT_FILE))
            }
            Stage::Classify => {
                let structured: StructuredReport = read_json(&work.join(REPORT_FILE))?;
                self.classify_report(report, &structured)
                    .map(|_| work.join(CLASSIFIED_FILE))
            }
            Stage::Fetch => {
                let structured: StructuredReport = read_json(&work.join(REPORT_FILE))?;
                let classified: ClassifiedReport = read_json(&work.join(CLASSIFIED_FILE))?;
                self.fetch_report(report, &structured, &classified)
            }
            _ => unreachable!("dataset-level stages are dispatched separately"),
        }
    }

    /// Runs a single stage. Per-report stages take report paths and work in
    /// `<work>/<stem>/`; `analyze` takes record directories (default: the
    /// output directory); `alpha` and `metrics` take one CSV each.
    pub fn run_stage(&self, stage: Stage, inputs: &[PathBuf]) -> Result<StageOutput, PipelineError> {
        match stage {
            Stage::Analyze => {
                let dirs = if inputs.is_empty() {
                    vec![self.config.out_dir.clone()]
                } else {
                    inputs.to_vec()
                };
                analyze_records(&dirs, &self.tree, &self.config.severity, &self.config.out_dir)
            }
            Stage::Alpha | Stage::Metrics => run_table_stage(stage, inputs),
            _ => {
                if inputs.is_empty() {
                    return Err(PipelineError::Usage(format!(
                        "`{stage}` needs at least one report path"
                    )));
                }
                let mut missing = Vec::new();
                for report in inputs {
                    missing.extend(self.prerequisites(stage, report)?.into_iter().filter(|p| !p.exists()));
                }
                if !missing.is_empty() {
                    return Err(PipelineError::StageDependency { stage, missing });
                }
                let duplicate = Self::duplicate_stems(inputs)?;
                if duplicate.iter().any(|d| *d) {
                    return Err(PipelineError::Usage(
                        "input reports must have distinct file stems".into(),
                    ));
                }
                let results = map_bounded(inputs, self.report_workers(), |_, report| self.run_one(stage, report));
                let mut out = StageOutput::default();
                for (report, result) in inputs.iter().zip(results) {
                    match result {
                        Ok(path) => out.files.push(path),
                        Err(e) => out.failures.push(ReportFailure {
                            report: report.clone(),
                            stage: stage.to_string(),
                            message: e.to_string(),
                        }),
                    }
                }
                Ok(out)
            }
        }
    }
}

/// `alpha` and `metrics`, which need neither a taxonomy nor a provider.
pub fn run_table_stage(stage: Stage, inputs: &[PathBuf]) -> Result<StageOutput, PipelineError> {
    let [input] = inputs else {
        return Err(PipelineError::Usage(format!("`{stage}` takes exactly one CSV file")));
    };
    if !input.exists() {
        return Err(PipelineError::StageDependency {
            stage,
            missing: vec![input.clone()],
        });
    }
    let text = match stage {
        Stage::Alpha => alpha_text(input)?,
        Stage::Metrics => metrics_table(input)?,
        _ => return Err(PipelineError::Usage(format!("`{stage}` is not a table stage"))),
    };
    Ok(StageOutput {
        text: Some(text),
        ..StageOutput::default()
    })
}

/// Writes `stats.csv` and `treemap.json` into `out` for all records below `dirs`.
pub fn analyze_records(
    dirs: &[PathBuf],
    tree: &CweTree,
    mapping: &SeverityMapping,
    out: &Path,
) -> Result<StageOutput, PipelineError> {
    let missing: Vec<PathBuf> = dirs.iter().filter(|d| !d.is_dir()).cloned().collect();
    if !missing.is_empty() {
        return Err(PipelineError::StageDependency {
            stage: Stage::Analyze,
            missing,
        });
    }
    let mut records = Vec::new();
    for dir in dirs {
        records.extend(read_records(dir)?);
    }
    if records.is_empty() {
        return Err(PipelineError::StageDependency {
            stage: Stage::Analyze,
            missing: dirs.iter().map(|d| d.join("*/record.json")).collect(),
        });
    }
    mapping.validate().map_err(|e| ConfigError::Invalid(vec![e]))?;
    let stats = avg_cvss_by_category(&records, mapping);
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    let stats_path = out.join(STATS_FILE);
    write_stats_csv(&stats_path, &stats)?;
    let treemap_path = out.join(TREEMAP_FILE);
    write_json(&treemap_path, &treemap_export(&stats, tree))?;
    let findings: usize = records.iter().map(|r| r.findings.len()).sum();
    Ok(StageOutput {
        files: vec![stats_path, treemap_path],
        failures: vec![],
        text: Some(format!(
            "{} records, {findings} findings, {} categories",
            records.len(),
            stats.len()
        )),
    })
}

pub fn alpha_text(path: &Path) -> Result<String, PipelineError> {
    let (a, b) = read_label_pairs_csv(path)?;
    let alpha = krippendorff_alpha(&a, &b, Distance::Nominal)?;
    Ok(format!("alpha = {alpha:.4} ({} items)\n", a.len()))
}

/// P/R/F1 table with a closing macro-average row. Input is either confusion
/// counts or already computed scores.
pub fn metrics_table(path: &Path) -> Result<String, PipelineError> {
    let (rows, undefined): (Vec<(String, f64, f64, f64)>, bool) = match read_metrics_csv(path)? {
        MetricsInput::Counts(counts) => {
            let mut undefined = false;
            let rows = counts
                .into_iter()
                .map(|c| {
                    let m = prf1(c.counts);
                    undefined |= m.precision_undefined || m.recall_undefined;
                    (c.tool, m.precision, m.recall, m.f1)
                })
                .collect();
            (rows, undefined)
        }
        MetricsInput::Scores(scores) => (
            scores
                .into_iter()
                .map(|s| (s.tool, s.precision, s.recall, s.f1))
                .collect(),
            false,
        ),
    };
    let width = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}  {:>9}  {:>9}  {:>9}\n", "tool", "precision", "recall", "f1");
    for (tool, p, r, f) in &rows {
        out.push_str(&format!("{tool:<width$}  {p:>9.2}  {r:>9.2}  {f:>9.2}\n"));
    }
    let triples: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r.1, r.2, r.3)).collect();
    if let Some((p, r, f)) = macro_average(&triples) {
        out.push_str(&format!("{:<width$}  {p:>9.2}  {r:>9.2}  {f:>9.2}\n", "Average"));
    }
    if undefined {
        out.push_str("note: a zero denominator was reported as 0.00\n");
    }
    Ok(out)
}
