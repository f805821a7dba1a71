use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FIXTURE_COMMIT: &str = "e6ac6c735516a76b08b257376cd3018732be022a";

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
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
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().trim().to_owned()
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            std::fs::copy(entry.path(), dest).unwrap();
        }
    }
}

/// Writes the mirror and a config file; returns the config path.
fn setup(root: &Path, script: &Path) -> PathBuf {
    let repo = root.join("mirror/acme/vault");
    copy_dir(&fixtures().join("e2e/repo"), &repo);
    git(&repo, &["init", "-q"]);
    git(&repo, &["add", "-A"]);
    git(&repo, &["commit", "-q", "-m", "Initial import"]);
    assert_eq!(git(&repo, &["rev-parse", "HEAD"]), FIXTURE_COMMIT);

    let fx = fixtures();
    let toml = format!(
        "chunk_length = 110\nmock_script = {:?}\ntaxonomy = {:?}\nhardware_list = {:?}\nmapping_notes = {:?}\n\
         work_dir = {:?}\nout_dir = {:?}\nrepo_mirror = {:?}\nexplorer_enabled = false\n\n[tokenizer]\nkind = \"whitespace\"\n",
        script,
        fx.join("cwe1000.json"),
        fx.join("hardware108.json"),
        fx.join("mapping_notes.json"),
        root.join("work"),
        root.join("out"),
        root.join("mirror"),
    );
    let path = root.join("vulnset.toml");
    std::fs::write(&path, toml).unwrap();
    path
}

fn vulnset(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vulnset"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn report() -> String {
    fixtures().join("e2e/reports/acme-vault.md").display().to_string()
}

#[test]
fn build_writes_the_golden_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), &fixtures().join("e2e/script.json"));
    let out = vulnset(&["--config", config.to_str().unwrap(), "build", &report()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("ok 1, failed 0"), "{}", stdout(&out));
    let written = std::fs::read_to_string(dir.path().join("out/acme-vault/record.json")).unwrap();
    let golden = std::fs::read_to_string(fixtures().join("e2e/golden/acme-vault/record.json")).unwrap();
    assert_eq!(written, golden);

    let again = vulnset(&["--config", config.to_str().unwrap(), "build", &report()]);
    assert_eq!(
        again.status.code(),
        Some(1),
        "existing record without --force must not be overwritten"
    );
    assert!(stdout(&again).contains("already exists"));
}

#[test]
fn dead_repository_fails_alone() {
    let dir = tempfile::tempdir().unwrap();
    let mut responses: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("e2e/script.json")).unwrap()).unwrap();
    let dead_info = r#"{"project_info":{"url":"file:///nonexistent/dead.git","commit_id":"abcdef1"},"findings":[]}"#;
    responses.extend([dead_info.to_owned(), dead_info.to_owned()]);
    let script = dir.path().join("script.json");
    std::fs::write(&script, serde_json::to_string(&responses).unwrap()).unwrap();
    let config = setup(dir.path(), &script);
    let dead = dir.path().join("dead.md");
    std::fs::write(
        &dead,
        "# Review\n\nRepository file:///nonexistent/dead.git at commit abcdef1.\n",
    )
    .unwrap();

    let out = vulnset(&[
        "--config",
        config.to_str().unwrap(),
        "--json",
        "build",
        &report(),
        dead.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["ok"], 1);
    assert_eq!(summary["failed"], 1);
    assert_eq!(summary["stage_failures"]["fetch"], 1);
}

#[test]
fn empty_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), &fixtures().join("e2e/script.json"));
    let out = vulnset(&["--config", config.to_str().unwrap(), "build"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no input reports"));
}

#[test]
fn invalid_config_exits_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), &fixtures().join("e2e/script.json"));
    let out = vulnset(&[
        "--config",
        config.to_str().unwrap(),
        "--k",
        "0",
        "--parallel",
        "0",
        "build",
        &report(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("k must be at least 1") && err.contains("parallel must be at least 1"),
        "{err}"
    );
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), &fixtures().join("e2e/script.json"));
    let cfg = config.to_str().unwrap();

    let early = vulnset(&["--config", cfg, "fetch", &report()]);
    assert_eq!(early.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&early.stderr).contains("classified.json"));

    // Each process replays its script from the start, so the LLM stages get their own slices.
    let responses: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("e2e/script.json")).unwrap()).unwrap();
    let extract_script = dir.path().join("extract.json");
    let classify_script = dir.path().join("classify.json");
    std::fs::write(&extract_script, serde_json::to_string(&responses[..4]).unwrap()).unwrap();
    std::fs::write(&classify_script, serde_json::to_string(&responses[4..]).unwrap()).unwrap();

    for (stage, script) in [
        ("chunk", &extract_script),
        ("extract", &extract_script),
        ("classify", &classify_script),
        ("fetch", &classify_script),
    ] {
        let out = vulnset(&[
            "--config",
            cfg,
            "--mock-script",
            script.to_str().unwrap(),
            stage,
            &report(),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let chunks: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("work/acme-vault/chunks.json")).unwrap())
            .unwrap();
    assert_eq!(chunks.as_array().unwrap().len(), 3);
    let written = std::fs::read_to_string(dir.path().join("out/acme-vault/record.json")).unwrap();
    let golden = std::fs::read_to_string(fixtures().join("e2e/golden/acme-vault/record.json")).unwrap();
    assert_eq!(written, golden);

    let analyzed = vulnset(&["--config", cfg, "analyze"]);
    assert_eq!(analyzed.status.code(), Some(0));
    assert!(
        stdout(&analyzed).contains("1 records, 4 findings"),
        "{}",
        stdout(&analyzed)
    );
    assert!(dir.path().join("out/treemap.json").is_file());
}

#[test]
fn metrics_prints_tool_table() {
    let out = vulnset(&["metrics", fixtures().join("tool_counts.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let semgrep = text.lines().find(|l| l.starts_with("Semgrep")).unwrap();
    let cols: Vec<&str> = semgrep.split_whitespace().collect();
    assert_eq!(cols[1..], ["13.73", "28.81", "18.59"]);
    assert!(text.lines().any(|l| l.starts_with("Average")));

    let entities = stdout(&vulnset(&[
        "metrics",
        fixtures().join("entity_scores.csv").to_str().unwrap(),
    ]));
    let avg: Vec<&str> = entities
        .lines()
        .find(|l| l.starts_with("Average"))
        .unwrap()
        .split_whitespace()
        .collect();
    assert_eq!(avg[1..], ["95.60", "78.43", "86.10"]);
}

#[test]
fn alpha_of_labels() {
    let perfect = vulnset(&["alpha", fixtures().join("labels_perfect.csv").to_str().unwrap()]);
    assert_eq!(perfect.status.code(), Some(0));
    assert!(
        stdout(&perfect).starts_with("alpha = 1.0000 (5 items)"),
        "{}",
        stdout(&perfect)
    );
    let mixed = stdout(&vulnset(&[
        "alpha",
        fixtures().join("labels_mixed.csv").to_str().unwrap(),
    ]));
    assert!(mixed.starts_with("alpha = 0.5333"), "{mixed}");
    let missing = vulnset(&["alpha", "/nonexistent/labels.csv"]);
    assert_eq!(missing.status.code(), Some(2));
}
