//! CWE-1000 research-concepts hierarchy.
//!
//! The view is loaded from a prepared JSON document (see `scripts/import_cwe.py`
//! for converting official releases), optionally pruned of hardware entries,
//! and then navigated read-only by the classifier.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Identifier of the form `CWE-<digits>` (1 to 4 digits).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CweId(String);

impl CweId {
    pub fn parse(raw: &str) -> Option<Self> {
        let digits = raw.strip_prefix("CWE-")?;
        if (1..=4).contains(&digits.len()) && digits.bytes().all(|b| b.is_ascii_digit()) {
            Some(Self(raw.to_owned()))
        } else {
            None
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CweId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for CweId {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value).ok_or_else(|| format!("invalid CWE id `{value}`"))
    }
}

impl From<CweId> for String {
    fn from(id: CweId) -> Self {
        id.0
    }
}

impl std::str::FromStr for CweId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s).ok_or_else(|| format!("invalid CWE id `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Abstraction {
    Pillar,
    Class,
    Base,
    Variant,
}

impl Abstraction {
    /// Mapping-allowed default when neither the document nor the notes file says otherwise.
    pub fn default_mapping_allowed(self) -> bool {
        matches!(self, Abstraction::Base | Abstraction::Variant)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CweNode {
    pub id: CweId,
    pub name: String,
    pub description: String,
    pub abstraction: Abstraction,
    pub parent_ids: Vec<CweId>,
    pub child_ids: Vec<CweId>,
    pub mapping_allowed: bool,
    pub hardware: bool,
}

impl CweNode {
    pub fn is_leaf(&self) -> bool {
        self.child_ids.is_empty()
    }

    /// First sentence of the description, for prompt listings.
    pub fn summary(&self) -> &str {
        let text = self.description.trim();
        match text.find(". ") {
            Some(end) => &text[..=end],
            None => text,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy input {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("taxonomy schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("taxonomy integrity error: {message}: {}", ids.join(", "))]
    Integrity { message: String, ids: Vec<String> },
    #[error("unknown CWE id {0}")]
    UnknownId(String),
}

/// One node as it appears in the taxonomy JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawNode {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub abstraction: Abstraction,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default)]
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping_allowed: Option<bool>,
    #[serde(default)]
    pub hardware: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyDocument {
    pub view: String,
    pub nodes: Vec<RawNode>,
}

/// Outcome of [`CweTree::prune_hardware`] beyond the pruned tree itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PruneReport {
    pub removed: Vec<CweId>,
    /// Listed ids that were not in the tree.
    pub missing: Vec<String>,
    /// Nodes flagged `hardware` that the list did not cover.
    pub unlisted_hardware: Vec<CweId>,
}

/// Immutable CWE hierarchy. Nodes keep document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CweTree {
    view: String,
    order: Vec<CweId>,
    nodes: HashMap<CweId, CweNode>,
    pillar_ids: Vec<CweId>,
}

impl CweTree {
    pub fn load_file(path: &Path, mapping_notes: Option<&Path>) -> Result<Self, TaxonomyError> {
        let text = read(path)?;
        let overrides = match mapping_notes {
            Some(notes) => parse_mapping_notes(&read(notes)?)?,
            None => BTreeMap::new(),
        };
        Self::from_json(&text, &overrides)
    }

    pub fn from_json(text: &str, mapping_overrides: &BTreeMap<String, bool>) -> Result<Self, TaxonomyError> {
        let doc: TaxonomyDocument = serde_json::from_str(text).map_err(|e| TaxonomyError::Schema {
            field: serde_field_hint(&e),
            message: e.to_string(),
        })?;
        Self::from_document(doc, mapping_overrides)
    }

    pub fn from_document(
        doc: TaxonomyDocument,
        mapping_overrides: &BTreeMap<String, bool>,
    ) -> Result<Self, TaxonomyError> {
        let mut order = Vec::with_capacity(doc.nodes.len());
        let mut nodes: HashMap<CweId, CweNode> = HashMap::with_capacity(doc.nodes.len());

        for (idx, raw) in doc.nodes.iter().enumerate() {
            let id = parse_id(&raw.id, || format!("nodes[{idx}].id"))?;
            let parent_ids = parse_ids(&raw.parents, |j| format!("nodes[{idx}].parents[{j}]"))?;
            let child_ids = parse_ids(&raw.children, |j| format!("nodes[{idx}].children[{j}]"))?;
            if raw.name.trim().is_empty() {
                return Err(TaxonomyError::Schema {
                    field: format!("nodes[{idx}].name"),
                    message: "name must not be empty".into(),
                });
            }
            let mapping_allowed = mapping_overrides
                .get(id.as_str())
                .copied()
                .or(raw.mapping_allowed)
                .unwrap_or_else(|| raw.abstraction.default_mapping_allowed());
            let node = CweNode {
                id: id.clone(),
                name: raw.name.clone(),
                description: raw.description.clone(),
                abstraction: raw.abstraction,
                parent_ids,
                child_ids,
                mapping_allowed,
                hardware: raw.hardware,
            };
            if nodes.insert(id.clone(), node).is_some() {
                return Err(TaxonomyError::Integrity {
                    message: "duplicate node ids".into(),
                    ids: vec![id.to_string()],
                });
            }
            order.push(id);
        }

        let mut dangling: BTreeSet<String> = BTreeSet::new();
        for node in nodes.values() {
            for r in node.parent_ids.iter().chain(&node.child_ids) {
                if !nodes.contains_key(r) {
                    dangling.insert(r.to_string());
                }
            }
        }
        for id in mapping_overrides.keys() {
            if CweId::parse(id).is_none_or(|id| !nodes.contains_key(&id)) {
                tracing::warn!(id = %id, "mapping note refers to a node outside the view");
            }
        }
        if !dangling.is_empty() {
            return Err(TaxonomyError::Integrity {
                message: "unresolved references".into(),
                ids: dangling.into_iter().collect(),
            });
        }

        // A link may be declared from either end; complete the other side.
        let mut add_parent: Vec<(CweId, CweId)> = Vec::new();
        let mut add_child: Vec<(CweId, CweId)> = Vec::new();
        for id in &order {
            let node = &nodes[id];
            for child in &node.child_ids {
                if !nodes[child].parent_ids.contains(id) {
                    add_parent.push((child.clone(), id.clone()));
                }
            }
            for parent in &node.parent_ids {
                if !nodes[parent].child_ids.contains(id) {
                    add_child.push((parent.clone(), id.clone()));
                }
            }
        }
        for (node, parent) in add_parent {
            nodes.get_mut(&node).unwrap().parent_ids.push(parent);
        }
        for (node, child) in add_child {
            nodes.get_mut(&node).unwrap().child_ids.push(child);
        }

        let mut bad_pillars = Vec::new();
        let mut pillar_ids = Vec::new();
        for id in &order {
            let node = &nodes[id];
            let is_root = node.parent_ids.is_empty();
            if is_root != (node.abstraction == Abstraction::Pillar) {
                bad_pillars.push(id.to_string());
            }
            if is_root {
                pillar_ids.push(id.clone());
            }
        }
        if !bad_pillars.is_empty() {
            return Err(TaxonomyError::Integrity {
                message: "Pillar abstraction must coincide with having no parents".into(),
                ids: bad_pillars,
            });
        }

        let tree = CweTree {
            view: doc.view,
            order,
            nodes,
            pillar_ids,
        };
        tree.check_acyclic()?;
        Ok(tree)
    }

    fn check_acyclic(&self) -> Result<(), TaxonomyError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: HashMap<&CweId, Mark> = HashMap::new();
        for start in &self.order {
            if marks.contains_key(start) {
                continue;
            }
            // iterative DFS: (node, next child index)
            let mut stack: Vec<(&CweId, usize)> = vec![(start, 0)];
            marks.insert(start, Mark::Open);
            while let Some((id, next)) = stack.pop() {
                let children = &self.nodes[id].child_ids;
                if next < children.len() {
                    stack.push((id, next + 1));
                    let child = &children[next];
                    match marks.get(child) {
                        Some(Mark::Open) => {
                            return Err(TaxonomyError::Integrity {
                                message: "cycle detected".into(),
                                ids: vec![id.to_string(), child.to_string()],
                            })
                        }
                        Some(Mark::Done) => {}
                        None => {
                            marks.insert(child, Mark::Open);
                            stack.push((child, 0));
                        }
                    }
                } else {
                    marks.insert(id, Mark::Done);
                }
            }
        }
        Ok(())
    }

    pub fn view(&self) -> &str {
        &self.view
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn pillar_ids(&self) -> &[CweId] {
        &self.pillar_ids
    }

    pub fn pillars(&self) -> Vec<&CweNode> {
        self.pillar_ids.iter().map(|id| &self.nodes[id]).collect()
    }

    pub fn get(&self, id: &CweId) -> Option<&CweNode> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &CweId) -> bool {
        self.nodes.contains_key(id)
    }

    /// Nodes in document order.
    pub fn iter(&self) -> impl Iterator<Item = &CweNode> {
        self.order.iter().map(|id| &self.nodes[id])
    }

    pub fn children(&self, id: &CweId) -> Result<Vec<&CweNode>, TaxonomyError> {
        let node = self
            .nodes
            .get(id)
            .ok_or_else(|| TaxonomyError::UnknownId(id.to_string()))?;
        Ok(node.child_ids.iter().map(|c| &self.nodes[c]).collect())
    }

    /// Ancestors following the first listed parent at each step, pillar first.
    pub fn canonical_lineage(&self, id: &CweId) -> Option<Vec<CweId>> {
        let mut lineage = vec![self.nodes.get(id)?.id.clone()];
        let mut seen = HashSet::new();
        let mut current = &self.nodes[id];
        while let Some(parent) = current.parent_ids.first() {
            if !seen.insert(parent.clone()) {
                break;
            }
            lineage.push(parent.clone());
            current = &self.nodes[parent];
        }
        lineage.reverse();
        Some(lineage)
    }

    /// Removes the listed nodes and every reference to them.
    ///
    /// Software children left without any parent are re-attached to the
    /// removed node's surviving parents so the Pillar/no-parent rule keeps
    /// holding. Ids absent from the tree are reported, not rejected.
    pub fn prune_hardware(&self, hardware_ids: &[String]) -> (CweTree, PruneReport) {
        let mut report = PruneReport::default();
        let mut remove: HashSet<CweId> = HashSet::new();
        for raw in hardware_ids {
            match CweId::parse(raw.trim()).filter(|id| self.nodes.contains_key(id)) {
                Some(id) => {
                    remove.insert(id);
                }
                None => {
                    tracing::warn!(id = %raw, "hardware id not present in taxonomy; skipped");
                    report.missing.push(raw.clone());
                }
            }
        }

        let mut nodes = self.nodes.clone();
        let mut order = Vec::with_capacity(self.order.len());
        for id in &self.order {
            if remove.contains(id) {
                report.removed.push(id.clone());
                nodes.remove(id);
            } else {
                order.push(id.clone());
            }
        }

        for id in &order {
            let original = &self.nodes[id];
            let mut parents: Vec<CweId> = Vec::new();
            let mut lost_parent = false;
            for p in &original.parent_ids {
                if remove.contains(p) {
                    lost_parent = true;
                } else if !parents.contains(p) {
                    parents.push(p.clone());
                }
            }
            if lost_parent && parents.is_empty() {
                parents = self.surviving_ancestors(id, &remove);
            }
            let node = nodes.get_mut(id).unwrap();
            node.parent_ids = parents;
            node.child_ids.retain(|c| !remove.contains(c));
        }
        // re-attached orphans need matching child links
        let links: Vec<(CweId, CweId)> = order
            .iter()
            .flat_map(|id| nodes[id].parent_ids.iter().map(move |p| (p.clone(), id.clone())))
            .collect();
        for (parent, child) in links {
            let p = nodes.get_mut(&parent).unwrap();
            if !p.child_ids.contains(&child) {
                p.child_ids.push(child);
            }
        }

        report.unlisted_hardware = order.iter().filter(|id| nodes[*id].hardware).cloned().collect();
        if !report.unlisted_hardware.is_empty() {
            tracing::warn!(
                count = report.unlisted_hardware.len(),
                "hardware-flagged nodes remain after pruning"
            );
        }

        let pillar_ids = self
            .pillar_ids
            .iter()
            .filter(|id| !remove.contains(*id))
            .cloned()
            .collect();
        let tree = CweTree {
            view: self.view.clone(),
            order,
            nodes,
            pillar_ids,
        };
        (tree, report)
    }

    fn surviving_ancestors(&self, id: &CweId, removed: &HashSet<CweId>) -> Vec<CweId> {
        let mut out = Vec::new();
        let mut frontier: Vec<&CweId> = self.nodes[id].parent_ids.iter().collect();
        let mut seen = HashSet::new();
        while let Some(p) = frontier.pop() {
            if !seen.insert(p.clone()) {
                continue;
            }
            if removed.contains(p) {
                frontier.extend(self.nodes[p].parent_ids.iter());
            } else if !out.contains(p) {
                out.push(p.clone());
            }
        }
        out
    }

    /// True iff the path starts at pillars and every later step selects
    /// children of a node chosen at the preceding level.
    pub fn validate_path(&self, path: &crate::classifier::ClassificationPath) -> bool {
        let steps = &path.steps;
        for (i, step) in steps.iter().enumerate() {
            if step.selected.iter().any(|id| !self.nodes.contains_key(id)) {
                return false;
            }
            if step.level == 0 {
                if !step.selected.iter().all(|id| self.pillar_ids.contains(id)) {
                    return false;
                }
                continue;
            }
            let Some(previous) = steps[..i].iter().rev().find(|s| s.level + 1 == step.level) else {
                return false;
            };
            if i > 0 && step.level > steps[i - 1].level + 1 {
                return false;
            }
            let ok = step.selected.iter().all(|child| {
                previous
                    .selected
                    .iter()
                    .any(|parent| self.nodes[parent].child_ids.contains(child))
            });
            if !ok {
                return false;
            }
        }
        true
    }

    pub fn to_document(&self) -> TaxonomyDocument {
        TaxonomyDocument {
            view: self.view.clone(),
            nodes: self
                .iter()
                .map(|n| RawNode {
                    id: n.id.to_string(),
                    name: n.name.clone(),
                    description: n.description.clone(),
                    abstraction: n.abstraction,
                    parents: n.parent_ids.iter().map(ToString::to_string).collect(),
                    children: n.child_ids.iter().map(ToString::to_string).collect(),
                    mapping_allowed: Some(n.mapping_allowed),
                    hardware: n.hardware,
                })
                .collect(),
        }
    }
}

pub fn load_hardware_list(path: &Path) -> Result<Vec<String>, TaxonomyError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| TaxonomyError::Schema {
        field: "hardware list".into(),
        message: e.to_string(),
    })
}

pub fn parse_mapping_notes(text: &str) -> Result<BTreeMap<String, bool>, TaxonomyError> {
    serde_json::from_str(text).map_err(|e| TaxonomyError::Schema {
        field: "mapping notes".into(),
        message: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String, TaxonomyError> {
    std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_id(raw: &str, field: impl FnOnce() -> String) -> Result<CweId, TaxonomyError> {
    CweId::parse(raw).ok_or_else(|| TaxonomyError::Schema {
        field: field(),
        message: format!("`{raw}` is not of the form CWE-<1-4 digits>"),
    })
}

fn parse_ids(raw: &[String], field: impl Fn(usize) -> String) -> Result<Vec<CweId>, TaxonomyError> {
    let mut out: Vec<CweId> = Vec::with_capacity(raw.len());
    for (j, r) in raw.iter().enumerate() {
        let id = parse_id(r, || field(j))?;
        if !out.contains(&id) {
            out.push(id);
        }
    }
    Ok(out)
}

// serde_json reports missing fields as "missing field `x`"; pull the name out.
fn serde_field_hint(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    for marker in ["missing field `", "unknown field `", "unknown variant `"] {
        if let Some(start) = msg.find(marker) {
            let rest = &msg[start + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_owned();
            }
        }
    }
    format!("line {} column {}", err.line(), err.column())
}
