use std::ops::Range;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::merge::{dedup_findings, merge, merge_all, merge_project_info, normalize_title, renumber};
use super::model::{validate_report, StructuredReport, Validated};
use crate::ingest::{count_tokens, Chunk, TokenizerConfig, DEFAULT_CHUNK_LENGTH};
use crate::llm::{extract_json, CompletionProvider, CompletionRequest, LlmError, RequestSettings};
use crate::parallel::map_bounded;
use crate::prompts;

#[derive(Debug, Clone)]
pub struct ExtractorConfig {
    pub chunk_length: usize,
    pub tokenizer: TokenizerConfig,
    pub settings: RequestSettings,
    /// Concurrent map calls.
    pub parallelism: usize,
    /// When set, partial results are written under this directory.
    pub work_dir: Option<PathBuf>,
    /// Reuse chunk partials already present in `work_dir`.
    pub resume: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            chunk_length: DEFAULT_CHUNK_LENGTH,
            tokenizer: TokenizerConfig::default(),
            settings: RequestSettings::default(),
            parallelism: 1,
            work_dir: None,
            resume: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("chunk {chunk}: {source}")]
    Provider {
        chunk: usize,
        #[source]
        source: LlmError,
    },
    #[error("chunk {chunk}: unusable model output after re-ask: {reason}")]
    Unparseable { chunk: usize, reason: String },
    #[error("no chunk could be mapped ({failed} failed)")]
    AllChunksFailed { failed: usize },
    #[error("report has no chunks")]
    NoChunks,
    #[error("failed to persist intermediate artifact {path}: {message}")]
    Persist { path: String, message: String },
}

#[derive(Debug, Clone, Default)]
pub struct ExtractionOutcome {
    pub report: StructuredReport,
    pub partials: Vec<Option<StructuredReport>>,
    /// (chunk index, error message) for chunks that contributed nothing.
    pub map_failures: Vec<(usize, String)>,
    pub groups: Vec<Range<usize>>,
    /// Groups whose reduction fell back to the mechanical merge.
    pub reduce_fallbacks: usize,
    pub diagnostics: Vec<String>,
}

enum AskFailure {
    Provider(LlmError),
    Unparseable(String),
}

/// One completion, plus a single re-ask when the output is not usable.
fn ask_validated(provider: &dyn CompletionProvider, request: CompletionRequest) -> Result<Validated, AskFailure> {
    let parse = |raw: &str| -> Result<Validated, String> {
        let value: Value = extract_json(raw).map_err(|e| e.to_string())?;
        validate_report(&value).map_err(|e| e.to_string())
    };
    let raw = provider.complete(&request).map_err(AskFailure::Provider)?;
    match parse(&raw) {
        Ok(v) => Ok(v),
        Err(first) => {
            tracing::debug!(error = %first, "re-asking after unusable output");
            let reask = prompts::render(prompts::REASK, &[("previous", &raw)]);
            let retry = CompletionRequest {
                user_prompt: format!("{}\n\n{reask}", request.user_prompt),
                ..request
            };
            let raw = provider.complete(&retry).map_err(AskFailure::Provider)?;
            parse(&raw).map_err(AskFailure::Unparseable)
        }
    }
}

/// Map step: extracts project metadata and findings from one chunk.
pub fn map_chunk(
    chunk: &Chunk,
    provider: &dyn CompletionProvider,
    config: &ExtractorConfig,
) -> Result<Validated, ExtractError> {
    if chunk.token_count > config.chunk_length {
        tracing::warn!(chunk = chunk.index, "chunk exceeds configured chunk length");
    }
    let heading = if chunk.heading_path.is_empty() {
        "(document start)".to_owned()
    } else {
        chunk.heading_path.join(" > ")
    };
    let user = prompts::render(prompts::MAP_USER, &[("heading_path", &heading), ("chunk", &chunk.text)]);
    let request = config.settings.request(prompts::MAP_SYSTEM.to_owned(), user);
    ask_validated(provider, request).map_err(|f| match f {
        AskFailure::Provider(source) => ExtractError::Provider {
            chunk: chunk.index,
            source,
        },
        AskFailure::Unparseable(reason) => ExtractError::Unparseable {
            chunk: chunk.index,
            reason,
        },
    })
}

/// Result of reducing one group of partials.
#[derive(Debug, Clone)]
pub struct ReduceOutcome {
    pub report: StructuredReport,
    pub fell_back: bool,
    pub diagnostics: Vec<String>,
}

fn partial_json(report: &StructuredReport) -> String {
    serde_json::to_string(&llm_view(report)).expect("reports serialize")
}

// The shape the model sees: no fields it is not asked to produce.
fn llm_view(report: &StructuredReport) -> Value {
    let pi = &report.project_info;
    serde_json::json!({
        "project_info": {"url": pi.url, "commit_id": pi.commit_id, "address": pi.address, "chain": pi.chain},
        "findings": report.findings,
    })
}

/// Reduce step: asks the model to consolidate a group, then back-fills
/// anything it dropped from the mechanical left fold of the same group.
pub fn reduce_group(
    partials: &[StructuredReport],
    provider: &dyn CompletionProvider,
    config: &ExtractorConfig,
) -> ReduceOutcome {
    let mechanical = merge_all(partials);
    let listing: String = partials
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}\n", i + 1, partial_json(p)))
        .collect();
    let user = prompts::render(prompts::REDUCE_USER, &[("partials", &listing)]);
    let request = config.settings.request(prompts::REDUCE_SYSTEM.to_owned(), user);
    match ask_validated(provider, request) {
        Ok(v) => ReduceOutcome {
            report: backfill(v.report, &mechanical),
            fell_back: false,
            diagnostics: v.diagnostics,
        },
        Err(failure) => {
            let reason = match failure {
                AskFailure::Provider(e) => e.to_string(),
                AskFailure::Unparseable(r) => r,
            };
            tracing::warn!(%reason, "reduce failed; using mechanical merge");
            ReduceOutcome {
                report: mechanical,
                fell_back: true,
                diagnostics: vec![format!("reduce fell back to mechanical merge: {reason}")],
            }
        }
    }
}

/// Fills fields the model left empty from the mechanical merge. Model values
/// win where both are present.
fn backfill(model: StructuredReport, mechanical: &StructuredReport) -> StructuredReport {
    let project_info = merge_project_info(&model.project_info, &mechanical.project_info);
    let mut findings = if model.findings.is_empty() {
        mechanical.findings.clone()
    } else {
        model
            .findings
            .into_iter()
            .map(|mut f| {
                let key = normalize_title(&f.title);
                if let Some(m) = mechanical.findings.iter().find(|m| normalize_title(&m.title) == key) {
                    if f.description.is_empty() {
                        f.description = m.description.clone();
                    }
                    if f.location.is_empty() {
                        f.location = m.location.clone();
                    }
                    if f.severity.is_none() {
                        f.severity = m.severity;
                    }
                }
                f
            })
            .collect()
    };
    findings = dedup_findings(findings);
    renumber(&mut findings);
    StructuredReport { project_info, findings }
}

/// Greedy, order-preserving partition of partials into groups whose
/// serialized size stays within `chunk_length`. A partial that alone exceeds
/// the budget gets a group of its own.
pub fn group_partials(
    partials: &[StructuredReport],
    chunk_length: usize,
    tokenizer: &TokenizerConfig,
) -> Vec<Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    let mut text = String::new();
    for (i, p) in partials.iter().enumerate() {
        let line = format!("[{}] {}\n", i - start + 1, partial_json(p));
        if i > start && count_tokens(&format!("{text}{line}"), tokenizer) > chunk_length {
            groups.push(start..i);
            start = i;
            text.clear();
            text.push_str(&format!("[1] {}\n", partial_json(p)));
        } else {
            text.push_str(&line);
        }
    }
    if start < partials.len() {
        groups.push(start..partials.len());
    }
    groups
}

/// Reduces each group and left-folds the group results in order.
pub fn reduce_grouped(
    partials: &[StructuredReport],
    groups: &[Range<usize>],
    provider: &dyn CompletionProvider,
    config: &ExtractorConfig,
) -> (StructuredReport, Vec<ReduceOutcome>) {
    let outcomes: Vec<ReduceOutcome> = groups
        .iter()
        .map(|g| reduce_group(&partials[g.clone()], provider, config))
        .collect();
    let report = merge_all(outcomes.iter().map(|o| &o.report));
    (report, outcomes)
}

fn persist(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<(), ExtractError> {
    let path = dir.join(name);
    let err = |message: String| ExtractError::Persist {
        path: path.display().to_string(),
        message,
    };
    std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| err(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| err(e.to_string()))
}

fn chunk_partial_name(index: usize) -> String {
    format!("chunk-{index:04}.json")
}

/// Full map-reduce over a report's chunks.
pub fn extract_report(
    chunks: &[Chunk],
    provider: &dyn CompletionProvider,
    config: &ExtractorConfig,
) -> Result<ExtractionOutcome, ExtractError> {
    if chunks.is_empty() {
        return Err(ExtractError::NoChunks);
    }
    let partial_dir = config.work_dir.as_ref().map(|d| d.join("partials"));

    let mapped = map_bounded(chunks, config.parallelism, |_, chunk| {
        if config.resume {
            if let Some(dir) = &partial_dir {
                let path = dir.join(chunk_partial_name(chunk.index));
                if let Some(report) = std::fs::read_to_string(&path)
                    .ok()
                    .and_then(|t| serde_json::from_str::<StructuredReport>(&t).ok())
                {
                    return Ok(Validated {
                        report,
                        diagnostics: vec![],
                    });
                }
            }
        }
        map_chunk(chunk, provider, config)
    });

    let mut outcome = ExtractionOutcome::default();
    for (chunk, result) in chunks.iter().zip(mapped) {
        match result {
            Ok(v) => {
                if let Some(dir) = &partial_dir {
                    persist(dir, &chunk_partial_name(chunk.index), &v.report)?;
                }
                outcome
                    .diagnostics
                    .extend(v.diagnostics.into_iter().map(|d| format!("chunk {}: {d}", chunk.index)));
                outcome.partials.push(Some(v.report));
            }
            Err(e) => {
                tracing::warn!(error = %e, "map failed; chunk skipped");
                outcome.map_failures.push((chunk.index, e.to_string()));
                outcome.partials.push(None);
            }
        }
    }
    if outcome.map_failures.len() == chunks.len() {
        return Err(ExtractError::AllChunksFailed { failed: chunks.len() });
    }

    let useful: Vec<StructuredReport> = outcome
        .partials
        .iter()
        .flatten()
        .filter(|p| !p.is_empty())
        .cloned()
        .collect();
    let groups = group_partials(&useful, config.chunk_length, &config.tokenizer);
    let (report, reduced) = reduce_grouped(&useful, &groups, provider, config);
    if let Some(dir) = config.work_dir.as_ref().map(|d| d.join("groups")) {
        for (i, r) in reduced.iter().enumerate() {
            persist(&dir, &format!("group-{i:03}.json"), &r.report)?;
        }
    }
    outcome.reduce_fallbacks = reduced.iter().filter(|r| r.fell_back).count();
    outcome
        .diagnostics
        .extend(reduced.into_iter().flat_map(|r| r.diagnostics));
    outcome.groups = groups;
    outcome.report = merge(&StructuredReport::default(), &report);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{Finding, ProjectInfo, Severity};
    use crate::llm::ScriptedProvider;
    use proptest::prelude::*;

    fn chunk(index: usize, text: &str) -> Chunk {
        Chunk {
            index,
            text: text.into(),
            token_count: count_tokens(text, &TokenizerConfig::default()),
            heading_path: vec![],
        }
    }

    const EMPTY: &str = r#"{"project_info":{"url":"","commit_id":"","address":"","chain":""},"findings":[]}"#;

    fn one_finding(title: &str, sev: &str) -> String {
        format!(
            r#"{{"project_info":{{}},"findings":[{{"id":1,"title":"{title}","description":"desc of {title}","severity":"{sev}","location":"Vault.sol"}}]}}"#
        )
    }

    fn report_with(title: &str) -> StructuredReport {
        StructuredReport {
            project_info: ProjectInfo::default(),
            findings: vec![Finding {
                id: 1,
                title: title.into(),
                description: "d".into(),
                severity: Some(Severity::Low),
                location: String::new(),
            }],
        }
    }

    #[test]
    fn boilerplate_chunk_maps_to_empty() {
        let p = ScriptedProvider::new([EMPTY]);
        let out = map_chunk(
            &chunk(0, "This report is not investment advice."),
            &p,
            &ExtractorConfig::default(),
        )
        .unwrap();
        assert!(out.report.is_empty());
    }

    #[test]
    fn finding_chunk_maps_to_one_finding() {
        let p = ScriptedProvider::new([one_finding("Reentrancy in withdraw", "High")]);
        let out = map_chunk(&chunk(0, "withdraw() is reentrant"), &p, &ExtractorConfig::default()).unwrap();
        assert_eq!(out.report.findings.len(), 1);
        assert_eq!(out.report.findings[0].severity, Some(Severity::High));
        assert!(out.report.project_info.is_empty());
    }

    #[test]
    fn metadata_chunk_maps_to_project_info() {
        let p = ScriptedProvider::new([
            r#"{"project_info":{"url":"https://github.com/acme/vault","commit_id":"4f2a9c1","address":"","chain":""},"findings":[]}"#,
        ]);
        let out = map_chunk(
            &chunk(0, "Repo: https://github.com/acme/vault @ 4f2a9c1"),
            &p,
            &ExtractorConfig::default(),
        )
        .unwrap();
        assert_eq!(out.report.project_info.url, "https://github.com/acme/vault");
        assert_eq!(out.report.project_info.commit_id, "4f2a9c1");
        assert!(out.report.findings.is_empty());
    }

    #[test]
    fn map_reasks_once_then_fails() {
        let p = ScriptedProvider::new(["not json", EMPTY]);
        assert!(map_chunk(&chunk(0, "x"), &p, &ExtractorConfig::default()).is_ok());
        assert_eq!(p.calls(), 2);
        assert!(p.requests()[1].user_prompt.contains("could not be parsed"));

        let p = ScriptedProvider::new(["nope", "still nope"]);
        assert!(matches!(
            map_chunk(&chunk(3, "x"), &p, &ExtractorConfig::default()),
            Err(ExtractError::Unparseable { chunk: 3, .. })
        ));
    }

    #[test]
    fn reduce_singleton() {
        let partial = report_with("Overflow");
        let p = ScriptedProvider::new([serde_json::to_string(&partial).unwrap()]);
        let out = reduce_group(std::slice::from_ref(&partial), &p, &ExtractorConfig::default());
        assert_eq!(out.report, partial);
        assert!(!out.fell_back);
    }

    #[test]
    fn reduce_backfills_dropped_fields() {
        let a = StructuredReport {
            project_info: ProjectInfo {
                url: "https://github.com/acme/vault".into(),
                ..Default::default()
            },
            findings: vec![],
        };
        let b = StructuredReport {
            project_info: ProjectInfo {
                chain: "ethereum".into(),
                ..Default::default()
            },
            findings: report_with("Overflow").findings,
        };
        // model forgets the chain and the description
        let p = ScriptedProvider::new([
            r#"{"project_info":{"url":"https://github.com/acme/vault"},"findings":[{"title":"Overflow","severity":"low"}]}"#,
        ]);
        let out = reduce_group(&[a, b], &p, &ExtractorConfig::default());
        assert_eq!(out.report.project_info.url, "https://github.com/acme/vault");
        assert_eq!(out.report.project_info.chain, "ethereum");
        assert_eq!(out.report.findings[0].description, "d");
    }

    #[test]
    fn reduce_garbage_falls_back() {
        let parts = [report_with("A"), report_with("B"), report_with("a.")];
        let p = ScriptedProvider::new(["garbage", "more garbage"]);
        let out = reduce_group(&parts, &p, &ExtractorConfig::default());
        assert!(out.fell_back);
        assert_eq!(out.report, merge_all(&parts));
        assert_eq!(out.report.findings.len(), 2);
    }

    #[test]
    fn single_group_single_reduce() {
        let chunks = [chunk(0, "a"), chunk(1, "b")];
        let p = ScriptedProvider::new([
            one_finding("A", "low"),
            one_finding("B", "high"),
            r#"{"findings":[{"title":"A","severity":"low"},{"title":"B","severity":"high"}]}"#.to_string(),
        ]);
        let out = extract_report(&chunks, &p, &ExtractorConfig::default()).unwrap();
        assert_eq!(out.groups, vec![0..2]);
        assert_eq!(p.calls(), 3);
        assert_eq!(out.report.findings.len(), 2);
    }

    #[test]
    fn oversize_partials_force_two_groups() {
        let config = ExtractorConfig {
            chunk_length: 60,
            ..Default::default()
        };
        let chunks = [chunk(0, "a"), chunk(1, "b")];
        let first = one_finding("First issue", "low");
        let second = one_finding("Second issue", "high");
        let p = ScriptedProvider::new([first.clone(), second.clone(), first, second]);
        let out = extract_report(&chunks, &p, &config).unwrap();
        assert_eq!(out.groups, vec![0..1, 1..2]);
        assert_eq!(p.calls(), 4);
        let titles: Vec<_> = out.report.findings.iter().map(|f| f.title.as_str()).collect();
        assert_eq!(titles, ["First issue", "Second issue"]);
    }

    #[test]
    fn failed_maps_are_skipped_but_not_all() {
        let chunks = [chunk(0, "a"), chunk(1, "b")];
        let p = ScriptedProvider::new([
            "x".to_string(),
            "y".into(),
            one_finding("B", "low"),
            one_finding("B", "low"),
        ]);
        let out = extract_report(&chunks, &p, &ExtractorConfig::default()).unwrap();
        assert_eq!(out.map_failures.len(), 1);
        assert_eq!(out.report.findings.len(), 1);

        let p = ScriptedProvider::new(["x", "y", "z", "w"]);
        assert!(matches!(
            extract_report(&chunks, &p, &ExtractorConfig::default()),
            Err(ExtractError::AllChunksFailed { failed: 2 })
        ));
        assert!(matches!(
            extract_report(&[], &p, &ExtractorConfig::default()),
            Err(ExtractError::NoChunks)
        ));
    }

    #[test]
    fn intermediate_artifacts_are_persisted_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExtractorConfig {
            work_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let chunks = [chunk(0, "a")];
        let p = ScriptedProvider::new([one_finding("A", "low"), one_finding("A", "low")]);
        extract_report(&chunks, &p, &config).unwrap();
        assert!(dir.path().join("partials/chunk-0000.json").exists());
        assert!(dir.path().join("groups/group-000.json").exists());

        let resumed = ExtractorConfig { resume: true, ..config };
        let p = ScriptedProvider::new([one_finding("A", "low")]);
        let out = extract_report(&chunks, &p, &resumed).unwrap();
        assert_eq!(p.calls(), 1, "only the reduce call is made");
        assert_eq!(out.report.findings[0].title, "A");
    }

    /// Reduce stand-in that answers with the mechanical merge of its inputs.
    struct EchoReducer;

    impl CompletionProvider for EchoReducer {
        fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
            let parts: Vec<StructuredReport> = request
                .user_prompt
                .lines()
                .filter_map(|l| l.split_once("] ").map(|(_, json)| json))
                .filter_map(|json| validate_report(&serde_json::from_str(json).ok()?).ok())
                .map(|v| v.report)
                .collect();
            Ok(serde_json::to_string(&merge_all(&parts)).unwrap())
        }
    }

    fn arb_partial() -> impl Strategy<Value = StructuredReport> {
        (
            prop_oneof![Just(String::new()), "u[0-3]"],
            prop_oneof![Just(String::new()), "c[0-3]"],
            prop::collection::vec("[a-e]", 0..3),
        )
            .prop_map(|(url, chain, titles)| {
                let mut findings: Vec<Finding> = titles
                    .iter()
                    .map(|t| Finding {
                        id: 0,
                        title: t.clone(),
                        description: format!("about {t}"),
                        severity: Some(Severity::Medium),
                        location: String::new(),
                    })
                    .collect();
                renumber(&mut findings);
                StructuredReport {
                    project_info: ProjectInfo {
                        url,
                        chain,
                        ..Default::default()
                    },
                    findings,
                }
            })
    }

    proptest! {
        #[test]
        fn partition_placement_does_not_matter(
            partials in prop::collection::vec(arb_partial(), 1..8),
            cuts in prop::collection::btree_set(1usize..8, 0..4),
        ) {
            let n = partials.len();
            let mut bounds: Vec<usize> = cuts.into_iter().filter(|&c| c < n).collect();
            bounds.insert(0, 0);
            bounds.push(n);
            let groups: Vec<Range<usize>> = bounds.windows(2).map(|w| w[0]..w[1]).collect();
            let (grouped, _) = reduce_grouped(&partials, &groups, &EchoReducer, &ExtractorConfig::default());
            let (single, _) = reduce_grouped(&partials, std::slice::from_ref(&(0..n)), &EchoReducer, &ExtractorConfig::default());
            prop_assert_eq!(&grouped, &single);
            prop_assert_eq!(grouped, merge_all(&partials));
        }
    }
}
