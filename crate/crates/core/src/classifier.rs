//! Level-by-level classification of findings into the CWE hierarchy.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::extractor::Finding;
use crate::llm::{extract_json, CompletionProvider, CompletionRequest, LlmError, RequestSettings};
use crate::prompts;
use crate::taxonomy::{CweId, CweNode, CweTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terminal {
    /// The last selected node has no children.
    Leaf,
    /// The model chose to stop at a mapping-allowed node.
    Fallback,
    Unresolved,
}

impl Terminal {
    pub fn as_str(self) -> &'static str {
        match self {
            Terminal::Leaf => "leaf",
            Terminal::Fallback => "fallback",
            Terminal::Unresolved => "unresolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub level: u32,
    pub selected: Vec<CweId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationPath {
    pub steps: Vec<PathStep>,
    pub terminal: Terminal,
}

impl ClassificationPath {
    /// Every selected id in step order, without repeats.
    pub fn flattened(&self) -> Vec<CweId> {
        let mut out: Vec<CweId> = Vec::new();
        for id in self.steps.iter().flat_map(|s| &s.selected) {
            if !out.contains(id) {
                out.push(id.clone());
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.steps.iter().map(|s| s.level as usize + 1).max().unwrap_or(0)
    }
}

/// Where one explored branch stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchEnd {
    /// `None` when the branch stopped before any selection.
    pub node: Option<CweId>,
    pub terminal: Terminal,
}

/// One model call made while classifying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: u32,
    pub node: Option<CweId>,
    pub attempt: u32,
    pub candidates: Vec<CweId>,
    pub raw_response: String,
    pub selection: Vec<CweId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub path: ClassificationPath,
    /// Branch ends in exploration order. With `k = 1` there is exactly one.
    pub branches: Vec<BranchEnd>,
    pub trace: Vec<TraceEntry>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Candidates selected per level.
    pub k: usize,
    pub max_depth: u32,
    /// Extra attempts when the answer names no valid candidate.
    pub selection_retries: u32,
    pub settings: RequestSettings,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            k: 1,
            max_depth: 6,
            selection_retries: 3,
            settings: RequestSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("invalid classifier configuration: {0}")]
    Config(String),
    #[error("finding has an empty title")]
    EmptyTitle,
    #[error("provider failed at level {level}: {source}")]
    Provider {
        level: u32,
        #[source]
        source: LlmError,
    },
}

pub fn build_level_prompt(
    finding: &Finding,
    fallback: Option<&CweNode>,
    candidates: &[&CweNode],
    k: usize,
    settings: &RequestSettings,
) -> CompletionRequest {
    let mut options = String::new();
    for node in candidates {
        options.push_str(&option_line(node));
    }
    let fallback_note = match fallback {
        Some(node) => format!(
            "{}Stop-here option: {} keeps the current entry. Choose it only if none of \
             the more specific entries above fits.\n",
            option_line(node).replacen("- ", "- [stop here] ", 1),
            node.id
        ),
        None => String::new(),
    };
    let description = if finding.description.trim().is_empty() {
        "(not provided)"
    } else {
        finding.description.trim()
    };
    let example = candidates
        .first()
        .copied()
        .or(fallback)
        .map(|n| n.id.to_string())
        .unwrap_or_else(|| "CWE-0".into());
    let user = prompts::render(
        prompts::CLASSIFY_USER,
        &[
            ("title", finding.title.trim()),
            ("description", description),
            ("options", &options),
            ("fallback_note", &fallback_note),
            ("k", &k.to_string()),
            ("example_id", &example),
        ],
    );
    settings.request(prompts::CLASSIFY_SYSTEM.to_owned(), user)
}

fn option_line(node: &CweNode) -> String {
    let summary = node.summary();
    if summary.is_empty() {
        format!("- {}: {}\n", node.id, node.name)
    } else {
        format!("- {}: {}. {}\n", node.id, node.name.trim_end_matches('.'), summary)
    }
}

static CWE_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bCWE[-_ ]?(\d{1,4})\b").expect("valid regex"));

fn normalize_id(raw: &str) -> Option<CweId> {
    let caps = CWE_TOKEN.captures(raw.trim())?;
    CweId::parse(&format!("CWE-{}", &caps[1]))
}

/// Ids the model chose, restricted to `candidates`, in the model's order.
pub fn parse_selection(text: &str, candidates: &[CweId]) -> Vec<CweId> {
    let mut out: Vec<CweId> = Vec::new();
    let mut keep = |id: CweId| {
        if candidates.contains(&id) && !out.contains(&id) {
            out.push(id);
        }
    };
    let array = match extract_json(text) {
        Ok(Value::Array(items)) => Some(items),
        Ok(Value::Object(map)) => map.into_iter().find_map(|(_, v)| match v {
            Value::Array(items) => Some(items),
            _ => None,
        }),
        _ => None,
    };
    let mut from_json = false;
    for item in array.into_iter().flatten() {
        let id = match &item {
            Value::String(s) => normalize_id(s),
            Value::Number(n) => CweId::parse(&format!("CWE-{n}")),
            _ => None,
        };
        if let Some(id) = id {
            from_json = true;
            keep(id);
        }
    }
    if !from_json {
        for caps in CWE_TOKEN.captures_iter(text) {
            if let Some(id) = CweId::parse(&format!("CWE-{}", &caps[1])) {
                keep(id);
            }
        }
    }
    out
}

struct Run<'a> {
    finding: &'a Finding,
    tree: &'a CweTree,
    provider: &'a dyn CompletionProvider,
    config: &'a ClassifierConfig,
    steps: Vec<PathStep>,
    branches: Vec<BranchEnd>,
    trace: Vec<TraceEntry>,
    diagnostics: Vec<String>,
}

impl Run<'_> {
    /// Explores below `node` (the virtual root when `None`); the next
    /// selection happens at `level`.
    fn explore(&mut self, node: Option<&CweNode>, level: u32) -> Result<(), ClassifyError> {
        let tree = self.tree;
        let children: Vec<&CweNode> = match node {
            None => tree.pillars(),
            Some(n) => n.child_ids.iter().filter_map(|c| tree.get(c)).collect(),
        };
        let here = node.map(|n| n.id.clone());
        if children.is_empty() {
            self.branches.push(BranchEnd {
                node: here,
                terminal: Terminal::Leaf,
            });
            return Ok(());
        }
        if level >= self.config.max_depth {
            self.diagnostics
                .push(format!("max depth {} reached below {:?}", self.config.max_depth, here));
            self.branches.push(BranchEnd {
                node: here,
                terminal: Terminal::Unresolved,
            });
            return Ok(());
        }
        let fallback = node.filter(|n| n.mapping_allowed);
        let mut candidate_ids: Vec<CweId> = children.iter().map(|c| c.id.clone()).collect();
        if let Some(f) = fallback {
            candidate_ids.push(f.id.clone());
        }

        let request = build_level_prompt(self.finding, fallback, &children, self.config.k, &self.config.settings);
        let mut selected = Vec::new();
        for attempt in 0..=self.config.selection_retries {
            let raw = self
                .provider
                .complete(&request)
                .map_err(|source| ClassifyError::Provider { level, source })?;
            selected = parse_selection(&raw, &candidate_ids);
            selected.truncate(self.config.k);
            self.trace.push(TraceEntry {
                level,
                node: here.clone(),
                attempt,
                candidates: candidate_ids.clone(),
                raw_response: raw,
                selection: selected.clone(),
            });
            if !selected.is_empty() {
                break;
            }
        }
        if selected.is_empty() {
            self.diagnostics.push(format!(
                "no valid selection at level {level} after {} attempts",
                self.config.selection_retries + 1
            ));
            self.branches.push(BranchEnd {
                node: here,
                terminal: Terminal::Unresolved,
            });
            return Ok(());
        }
        if let Some(f) = fallback.filter(|f| selected.contains(&f.id)) {
            self.branches.push(BranchEnd {
                node: Some(f.id.clone()),
                terminal: Terminal::Fallback,
            });
            return Ok(());
        }
        self.steps.push(PathStep {
            level,
            selected: selected.clone(),
        });
        for id in &selected {
            let next = tree.get(id).expect("candidates come from the tree");
            self.explore(Some(next), level + 1)?;
        }
        Ok(())
    }
}

/// Classifies a finding and keeps the per-call trace.
pub fn classify_traced(
    finding: &Finding,
    tree: &CweTree,
    provider: &dyn CompletionProvider,
    config: &ClassifierConfig,
) -> Result<Classification, ClassifyError> {
    if config.k < 1 {
        return Err(ClassifyError::Config("k must be at least 1".into()));
    }
    if config.max_depth < 1 {
        return Err(ClassifyError::Config("max_depth must be at least 1".into()));
    }
    if finding.title.trim().is_empty() {
        return Err(ClassifyError::EmptyTitle);
    }
    let mut run = Run {
        finding,
        tree,
        provider,
        config,
        steps: Vec::new(),
        branches: Vec::new(),
        trace: Vec::new(),
        diagnostics: Vec::new(),
    };
    run.explore(None, 0)?;
    let terminal = run.branches.first().map_or(Terminal::Unresolved, |b| b.terminal);
    for d in &run.diagnostics {
        tracing::warn!(finding = %finding.title, "{d}");
    }
    Ok(Classification {
        path: ClassificationPath {
            steps: run.steps,
            terminal,
        },
        branches: run.branches,
        trace: run.trace,
        diagnostics: run.diagnostics,
    })
}

pub fn classify(
    finding: &Finding,
    tree: &CweTree,
    provider: &dyn CompletionProvider,
    config: &ClassifierConfig,
) -> Result<ClassificationPath, ClassifyError> {
    classify_traced(finding, tree, provider, config).map(|c| c.path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedProvider;
    use std::collections::BTreeMap;

    fn id(s: &str) -> CweId {
        CweId::parse(s).unwrap()
    }

    fn tree() -> CweTree {
        let json = r#"{"view":"test","nodes":[
            {"id":"CWE-691","name":"Insufficient Control Flow Management","description":"The code does not sufficiently manage its control flow. More text.","abstraction":"Pillar","children":["CWE-362","CWE-670"]},
            {"id":"CWE-362","name":"Race Condition","abstraction":"Class","parents":["CWE-691"],"children":["CWE-367"],"mapping_allowed":true},
            {"id":"CWE-367","name":"TOCTOU","abstraction":"Base","parents":["CWE-362"]},
            {"id":"CWE-670","name":"Always-Incorrect Control Flow","abstraction":"Class","parents":["CWE-691"],"children":["CWE-483"]},
            {"id":"CWE-483","name":"Incorrect Block Delimitation","abstraction":"Variant","parents":["CWE-670"]},
            {"id":"CWE-284","name":"Improper Access Control","abstraction":"Pillar","children":["CWE-285"]},
            {"id":"CWE-285","name":"Improper Authorization","abstraction":"Class","parents":["CWE-284"],"children":["CWE-862"]},
            {"id":"CWE-862","name":"Missing Authorization","abstraction":"Class","parents":["CWE-285"],"children":["CWE-425"]},
            {"id":"CWE-425","name":"Direct Request","abstraction":"Base","parents":["CWE-862"]}
        ]}"#;
        CweTree::from_json(json, &BTreeMap::new()).unwrap()
    }

    fn finding(title: &str, description: &str) -> Finding {
        Finding {
            id: 1,
            title: title.into(),
            description: description.into(),
            severity: None,
            location: String::new(),
        }
    }

    fn ids(v: &[&str]) -> Vec<CweId> {
        v.iter().map(|s| id(s)).collect()
    }

    #[test]
    fn parse_selection_cases() {
        let c = ids(&["CWE-362", "CWE-670"]);
        assert_eq!(parse_selection(r#"["CWE-362"]"#, &c), ids(&["CWE-362"]));
        assert_eq!(
            parse_selection("I choose CWE-362 because of ordering", &c),
            ids(&["CWE-362"])
        );
        assert!(parse_selection(r#"["CWE-9999"]"#, &c).is_empty());
        assert_eq!(
            parse_selection(r#"["cwe-670", "CWE-362", "CWE-670"]"#, &c),
            ids(&["CWE-670", "CWE-362"])
        );
        assert_eq!(parse_selection(r#"{"selected": [362]}"#, &c), ids(&["CWE-362"]));
        assert!(parse_selection("no idea", &c).is_empty());
    }

    #[test]
    fn prompt_structure() {
        let t = tree();
        let pillars = t.pillars();
        let f = finding("Sandwich attack", "No minimum output on swap.");
        let req = build_level_prompt(&f, None, &pillars, 1, &RequestSettings::default());
        assert!(req.user_prompt.contains("Sandwich attack"));
        assert!(req.user_prompt.contains("No minimum output"));
        assert_eq!(req.user_prompt.matches("\n- CWE-").count(), pillars.len());
        assert!(req.user_prompt.contains("at most 1"));
        assert!(!req.user_prompt.contains("stop here"));

        let n362 = t.get(&id("CWE-362")).unwrap();
        let kids = t.children(&id("CWE-362")).unwrap();
        let req = build_level_prompt(&finding("T", ""), Some(n362), &kids, 2, &RequestSettings::default());
        assert!(req.user_prompt.contains("[stop here] CWE-362"));
        assert!(req.user_prompt.contains("(not provided)"));
        assert!(req.user_prompt.contains("at most 2"));
    }

    #[test]
    fn fallback_example() {
        let t = tree();
        let p = ScriptedProvider::new([r#"["CWE-691"]"#, r#"["CWE-362"]"#, r#"["CWE-362"]"#]);
        let f = finding("Missing slippage protection", "Swaps can be front-run.");
        let path = classify(&f, &t, &p, &ClassifierConfig::default()).unwrap();
        assert_eq!(path.flattened(), ids(&["CWE-691", "CWE-362"]));
        assert_eq!(path.terminal, Terminal::Fallback);
        assert_eq!(p.calls(), 3);
        assert!(t.validate_path(&path));
        // the third prompt offered the stop-here option
        assert!(p.requests()[2].user_prompt.contains("[stop here] CWE-362"));
    }

    #[test]
    fn childless_node_is_leaf() {
        let t = tree();
        let p = ScriptedProvider::new([r#"["CWE-691"]"#, r#"["CWE-670"]"#, r#"["CWE-483"]"#]);
        let path = classify(&finding("x", ""), &t, &p, &ClassifierConfig::default()).unwrap();
        assert_eq!(path.terminal, Terminal::Leaf);
        assert_eq!(path.steps.len(), 3);
        assert_eq!(p.calls(), 3, "no call is made below a leaf");
    }

    #[test]
    fn garbage_is_unresolved_at_level_zero() {
        let t = tree();
        let p = ScriptedProvider::new(["?"; 4]);
        let c = classify_traced(&finding("x", ""), &t, &p, &ClassifierConfig::default()).unwrap();
        assert_eq!(c.path.terminal, Terminal::Unresolved);
        assert!(c.path.steps.is_empty());
        assert_eq!(c.trace.len(), 4);
        assert_eq!(c.diagnostics.len(), 1);
    }

    #[test]
    fn retry_recovers() {
        let t = tree();
        let p = ScriptedProvider::new([
            "CWE-9999",
            r#"["CWE-284"]"#,
            r#"["CWE-285"]"#,
            "CWE-862",
            "[\"CWE-425\"]",
        ]);
        let c = classify_traced(&finding("x", ""), &t, &p, &ClassifierConfig::default()).unwrap();
        assert_eq!(c.path.terminal, Terminal::Leaf);
        assert_eq!(c.path.flattened(), ids(&["CWE-284", "CWE-285", "CWE-862", "CWE-425"]));
        assert_eq!(c.trace[0].selection, vec![]);
        assert_eq!(c.trace[0].attempt, 0);
        assert_eq!(c.trace[1].attempt, 1);
    }

    #[test]
    fn max_depth_is_unresolved() {
        let t = tree();
        let config = ClassifierConfig {
            max_depth: 2,
            ..Default::default()
        };
        let p = ScriptedProvider::new([r#"["CWE-284"]"#, r#"["CWE-285"]"#]);
        let path = classify(&finding("x", ""), &t, &p, &config).unwrap();
        assert_eq!(path.terminal, Terminal::Unresolved);
        assert_eq!(path.depth(), 2);
        assert!(t.validate_path(&path));
    }

    #[test]
    fn provider_error_surfaces() {
        let t = tree();
        let p = ScriptedProvider::new(Vec::<String>::new());
        assert!(matches!(
            classify(&finding("x", ""), &t, &p, &ClassifierConfig::default()),
            Err(ClassifyError::Provider { level: 0, .. })
        ));
        assert!(matches!(
            classify(&finding(" ", ""), &t, &p, &ClassifierConfig::default()),
            Err(ClassifyError::EmptyTitle)
        ));
    }

    #[test]
    fn k_two_explores_depth_first() {
        let t = tree();
        let config = ClassifierConfig {
            k: 2,
            ..Default::default()
        };
        let p = ScriptedProvider::new([
            r#"["CWE-691", "CWE-284", "CWE-682"]"#,
            r#"["CWE-670", "CWE-362"]"#,
            r#"["CWE-483"]"#,
            r#"["CWE-362"]"#,
            r#"["CWE-285"]"#,
            r#"["CWE-862"]"#,
            r#"["CWE-425"]"#,
        ]);
        let c = classify_traced(&finding("x", ""), &t, &p, &config).unwrap();
        assert!(t.validate_path(&c.path));
        assert!(c.path.steps.iter().all(|s| s.selected.len() <= 2));
        assert_eq!(c.path.steps[0].selected, ids(&["CWE-691", "CWE-284"]));
        let ends: Vec<_> = c
            .branches
            .iter()
            .map(|b| (b.node.clone().unwrap(), b.terminal))
            .collect();
        assert_eq!(
            ends,
            vec![
                (id("CWE-483"), Terminal::Leaf),
                (id("CWE-362"), Terminal::Fallback),
                (id("CWE-425"), Terminal::Leaf),
            ]
        );
        assert_eq!(c.path.terminal, Terminal::Leaf);
    }

    #[test]
    fn deterministic_under_script() {
        let t = tree();
        let script = [r#"["CWE-691"]"#, r#"["CWE-362"]"#, r#"["CWE-367"]"#];
        let a = classify(
            &finding("x", ""),
            &t,
            &ScriptedProvider::new(script),
            &ClassifierConfig::default(),
        )
        .unwrap();
        let b = classify(
            &finding("x", ""),
            &t,
            &ScriptedProvider::new(script),
            &ClassifierConfig::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
