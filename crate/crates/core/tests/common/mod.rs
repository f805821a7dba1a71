#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use vulnset::ingest::TokenizerConfig;
use vulnset::pipeline::PipelineConfig;

pub const FIXTURE_COMMIT: &str = "e6ac6c735516a76b08b257376cd3018732be022a";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn copy_tree(from: &Path, to: &Path) {
    for entry in walkdir::WalkDir::new(from).sort_by_file_name() {
        let entry = entry.unwrap();
        let rel = entry.path().strip_prefix(from).unwrap();
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&dest).unwrap();
        } else {
            std::fs::copy(entry.path(), &dest).unwrap();
        }
    }
}

fn git(dir: &Path, args: &[&str]) -> String {
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(["-c", "commit.gpgsign=false", "-c", "init.defaultBranch=main"])
        .args(args)
        .env("GIT_AUTHOR_NAME", "Fixture")
        .env("GIT_AUTHOR_EMAIL", "fixture@example.com")
        .env("GIT_COMMITTER_NAME", "Fixture")
        .env("GIT_COMMITTER_EMAIL", "fixture@example.com")
        .env("GIT_AUTHOR_DATE", "2024-01-01T00:00:00Z")
        .env("GIT_COMMITTER_DATE", "2024-01-01T00:00:00Z")
        .output()
        .expect("git runs");
    assert!(
        out.status.success(),
        "git {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap().trim().to_owned()
}

/// Builds `<mirror>/acme/vault` from the fixture sources with a fixed
/// author and date, so its commit hash is always [`FIXTURE_COMMIT`].
pub fn build_mirror(mirror: &Path) {
    let repo = mirror.join("acme/vault");
    std::fs::create_dir_all(&repo).unwrap();
    copy_tree(&fixtures().join("e2e/repo"), &repo);
    git(&repo, &["init", "-q"]);
    git(&repo, &["add", "-A"]);
    git(&repo, &["commit", "-q", "-m", "Initial import"]);
    assert_eq!(git(&repo, &["rev-parse", "HEAD"]), FIXTURE_COMMIT);
}

/// Configuration of the golden run, rooted in `root`.
pub fn e2e_config(root: &Path) -> PipelineConfig {
    let fx = fixtures();
    PipelineConfig {
        chunk_length: 110,
        tokenizer: TokenizerConfig::Whitespace,
        mock_script: Some(fx.join("e2e/script.json")),
        taxonomy: Some(fx.join("cwe1000.json")),
        hardware_list: Some(fx.join("hardware108.json")),
        mapping_notes: Some(fx.join("mapping_notes.json")),
        work_dir: root.join("work"),
        out_dir: root.join("out"),
        repo_mirror: Some(root.join("mirror")),
        explorer_enabled: false,
        ..PipelineConfig::default()
    }
}

pub fn golden_record() -> PathBuf {
    fixtures().join("e2e/golden/acme-vault/record.json")
}

pub fn fixture_report() -> PathBuf {
    fixtures().join("e2e/reports/acme-vault.md")
}
