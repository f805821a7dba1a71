use std::path::PathBuf;

use vulnset::taxonomy::{load_hardware_list, CweId, CweTree};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn id(s: &str) -> CweId {
    CweId::parse(s).unwrap()
}

#[test]
fn fixture_prunes_cleanly() {
    let tree = CweTree::load_file(&fixture("cwe1000.json"), Some(&fixture("mapping_notes.json"))).unwrap();
    let hardware = load_hardware_list(&fixture("hardware108.json")).unwrap();
    assert_eq!(hardware.len(), 108);
    let (pruned, report) = tree.prune_hardware(&hardware);
    assert_eq!(pruned.pillar_ids().len(), 10);
    assert_eq!(tree.len() - pruned.len(), 108);
    assert!(report.missing.is_empty());
    assert!(report.unlisted_hardware.is_empty());
    assert!(pruned.iter().all(|n| !n.hardware));
    for node in pruned.iter() {
        for c in &node.child_ids {
            assert!(pruned.get(c).unwrap().parent_ids.contains(&node.id));
        }
    }
}

#[test]
fn mapping_notes_override_abstraction_default() {
    let tree = CweTree::load_file(&fixture("cwe1000.json"), Some(&fixture("mapping_notes.json"))).unwrap();
    assert!(tree.get(&id("CWE-362")).unwrap().mapping_allowed);
    assert!(!tree.get(&id("CWE-1390")).unwrap().mapping_allowed);
}

#[test]
fn race_condition_lineage() {
    let tree = CweTree::load_file(&fixture("cwe1000.json"), None).unwrap();
    assert_eq!(
        tree.canonical_lineage(&id("CWE-367")).unwrap(),
        vec![id("CWE-691"), id("CWE-362"), id("CWE-367")]
    );
    let kids: Vec<String> = tree
        .children(&id("CWE-362"))
        .unwrap()
        .iter()
        .map(|n| n.id.to_string())
        .collect();
    assert!(kids.contains(&"CWE-367".to_string()));
}
