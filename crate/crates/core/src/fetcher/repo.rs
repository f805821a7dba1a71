use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use chrono::Utc;
use walkdir::WalkDir;

use super::{has_extension, sanitize_relative_path, FetchError, SourceBundle, SourceFile, SourceOrigin};

/// Something that can materialize a repository tree at a given revision.
pub trait RepoClient: Send + Sync {
    /// Populates `dest` (an empty directory) with the tree of `url` at `commit`.
    fn checkout(&self, url: &str, commit: &str, dest: &Path) -> Result<(), FetchError>;
}

/// Uses the `git` executable: clone without checkout, then check out the
/// requested revision.
#[derive(Debug, Clone)]
pub struct GitCliClient {
    pub git: PathBuf,
    /// When set, `https://<host>/<owner>/<repo>` is looked up as
    /// `<mirror_root>/<owner>/<repo>` first.
    pub mirror_root: Option<PathBuf>,
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for GitCliClient {
    fn default() -> Self {
        Self {
            git: PathBuf::from("git"),
            mirror_root: None,
            retries: 2,
            backoff: Duration::from_millis(500),
        }
    }
}

impl GitCliClient {
    fn run(&self, dir: Option<&Path>, args: &[&str]) -> Result<std::process::Output, FetchError> {
        let mut cmd = Command::new(&self.git);
        if let Some(d) = dir {
            cmd.arg("-C").arg(d);
        }
        cmd.args(args)
            .env("GIT_TERMINAL_PROMPT", "0")
            .env("GIT_ASKPASS", "true")
            .output()
            .map_err(|e| FetchError::Git(format!("cannot run {}: {e}", self.git.display())))
    }

    /// Local mirror path for a hosted URL, if one exists.
    pub fn resolve_source(&self, url: &str) -> String {
        let Some(root) = &self.mirror_root else {
            return url.to_owned();
        };
        let rest = url
            .split_once("://")
            .map_or(url, |(_, r)| r)
            .trim_end_matches('/')
            .trim_end_matches(".git");
        let mut segments = rest.split('/').skip(1).filter(|s| !s.is_empty());
        if let (Some(owner), Some(repo)) = (segments.next(), segments.next()) {
            let candidate = root.join(owner).join(repo);
            if candidate.exists() {
                return candidate.display().to_string();
            }
        }
        url.to_owned()
    }
}

fn stderr_text(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim().to_owned()
}

impl RepoClient for GitCliClient {
    fn checkout(&self, url: &str, commit: &str, dest: &Path) -> Result<(), FetchError> {
        let source = self.resolve_source(url);
        let dest_str = dest.display().to_string();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let out = self.run(None, &["clone", "--quiet", "--no-checkout", &source, &dest_str])?;
            if out.status.success() {
                break;
            }
            let err = stderr_text(&out);
            let lower = err.to_lowercase();
            if lower.contains("not found")
                || lower.contains("does not exist")
                || lower.contains("does not appear to be a git repository")
            {
                return Err(FetchError::NotFound(format!("repository {url}: {err}")));
            }
            if attempt > self.retries {
                return Err(FetchError::Transport {
                    attempts: attempt,
                    message: err,
                });
            }
            std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            // a failed clone may leave a partial directory behind
            let _ = std::fs::remove_dir_all(dest);
        }

        let candidates = [format!("{commit}^{{commit}}"), format!("origin/{commit}^{{commit}}")];
        let resolved = candidates.iter().find_map(|rev| {
            let out = self.run(Some(dest), &["rev-parse", "--verify", "--quiet", rev]).ok()?;
            out.status
                .success()
                .then(|| String::from_utf8_lossy(&out.stdout).trim().to_owned())
        });
        let Some(sha) = resolved else {
            return Err(FetchError::NotFound(format!("commit {commit} in {url}")));
        };
        let out = self.run(
            Some(dest),
            &["-c", "advice.detachedHead=false", "checkout", "--quiet", &sha],
        )?;
        if !out.status.success() {
            return Err(FetchError::Git(stderr_text(&out)));
        }
        Ok(())
    }
}

/// Retrieves the repository tree at exactly `commit`, keeping files with
/// the given extensions.
pub fn fetch_repo(
    url: &str,
    commit_id: &str,
    client: &dyn RepoClient,
    extensions: &[String],
) -> Result<SourceBundle, FetchError> {
    if url.trim().is_empty() || url.chars().any(char::is_whitespace) {
        return Err(FetchError::Precondition(format!("malformed repository URL `{url}`")));
    }
    if commit_id.trim().is_empty() {
        return Err(FetchError::Precondition("empty commit id".into()));
    }
    let tmp = tempfile::tempdir().map_err(|e| FetchError::io("temporary directory", e))?;
    let dest = tmp.path().join("repo");
    client.checkout(url, commit_id, &dest)?;

    let mut files = Vec::new();
    let walker = WalkDir::new(&dest)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.file_name() != ".git");
    for entry in walker {
        let entry = entry.map_err(|e| FetchError::Git(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(&dest)
            .expect("walk stays under root")
            .to_string_lossy()
            .into_owned();
        if !has_extension(&rel, extensions) {
            continue;
        }
        let bytes = std::fs::read(entry.path()).map_err(|e| FetchError::io(entry.path().display(), e))?;
        files.push(SourceFile {
            path: sanitize_relative_path(&rel)?,
            content: String::from_utf8_lossy(&bytes).into_owned(),
        });
    }
    let identifier = format!("{url}@{commit_id}");
    if files.is_empty() {
        return Err(FetchError::EmptyBundle {
            identifier,
            extensions: extensions.to_vec(),
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(SourceBundle {
        origin: SourceOrigin::Repository,
        identifier,
        files,
        retrieved_at: Utc::now(),
    })
}
