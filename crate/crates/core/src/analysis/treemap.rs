use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::severity::{CategoryStats, UNCLASSIFIED};
use crate::taxonomy::{CweId, CweTree};

/// Label of the synthetic child holding a node's own findings when that node
/// also has descendants with findings.
pub const DIRECT_LABEL: &str = "(direct)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreemapNode {
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    /// Findings in this subtree.
    pub frequency: usize,
    /// Frequency-weighted mean CVSS of the subtree; `None` when empty.
    pub severity: Option<f64>,
    pub children: Vec<TreemapNode>,
}

#[derive(Default)]
struct Trie {
    own: Option<(usize, f64)>,
    children: BTreeMap<String, Trie>,
}

impl Trie {
    fn insert(&mut self, path: &[String], stat: &CategoryStats) {
        match path.split_first() {
            None => {
                let (f, total) = self.own.unwrap_or((0, 0.0));
                self.own = Some((f + stat.frequency, total + stat.mean_cvss * stat.frequency as f64));
            }
            Some((head, rest)) => self.children.entry(head.clone()).or_default().insert(rest, stat),
        }
    }

    fn build(self, id: String, tree: &CweTree) -> TreemapNode {
        let name = CweId::parse(&id)
            .and_then(|c| tree.get(&c).map(|n| n.name.clone()))
            .unwrap_or_default();
        let mut children: Vec<TreemapNode> = self.children.into_iter().map(|(k, t)| t.build(k, tree)).collect();
        let own = self.own.map(|(f, total)| TreemapNode {
            id: id.clone(),
            name: DIRECT_LABEL.to_owned(),
            frequency: f,
            severity: Some(total / f as f64),
            children: vec![],
        });
        match own {
            Some(leaf) if children.is_empty() => TreemapNode { name, ..leaf },
            own => {
                children.extend(own);
                let frequency = children.iter().map(|c| c.frequency).sum();
                let weighted: f64 = children
                    .iter()
                    .filter_map(|c| c.severity.map(|s| s * c.frequency as f64))
                    .sum();
                TreemapNode {
                    id,
                    name,
                    frequency,
                    severity: (frequency > 0).then(|| weighted / frequency as f64),
                    children,
                }
            }
        }
    }
}

/// Nests category statistics along each CWE's first-parent lineage, from
/// pillar down. Ids missing from the tree are filed under [`UNCLASSIFIED`].
pub fn treemap_export(stats: &[CategoryStats], tree: &CweTree) -> TreemapNode {
    let mut root = Trie::default();
    for stat in stats.iter().filter(|s| s.frequency > 0) {
        let lineage = CweId::parse(&stat.cwe_id).and_then(|id| tree.canonical_lineage(&id));
        let path: Vec<String> = match lineage {
            Some(ids) => ids.into_iter().map(|i| i.to_string()).collect(),
            None if stat.cwe_id == UNCLASSIFIED => vec![UNCLASSIFIED.to_owned()],
            None => vec![UNCLASSIFIED.to_owned(), stat.cwe_id.clone()],
        };
        root.insert(&path, stat);
    }
    root.build(tree.view().to_owned(), tree)
}
