use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::analysis::SeverityMapping;
use crate::fetcher::{ExplorerConfig, DEFAULT_EXTENSIONS};
use crate::ingest::{ConverterConfig, TokenizerConfig, DEFAULT_CHUNK_LENGTH};
use crate::llm::{ProviderConfig, RateLimit, RequestSettings, DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_TEMPERATURE};

/// Prefix of every environment override.
pub const ENV_PREFIX: &str = "VULNSET_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("environment variable {var}=`{value}`: {message}")]
    Env {
        var: String,
        value: String,
        message: String,
    },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    /// Chat-completions URL. Ignored when a mock script is set.
    pub endpoint: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub retry_limit: u32,
    pub timeout_secs: u64,
    pub requests_per_minute: Option<u32>,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key_env: "VULNSET_API_KEY".into(),
            retry_limit: 3,
            timeout_secs: 120,
            requests_per_minute: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub chunk_length: usize,
    pub tokenizer: TokenizerConfig,
    pub k: usize,
    pub max_depth: u32,
    pub selection_retries: u32,
    pub temperature: f64,
    pub model_name: String,
    pub max_output_tokens: u32,
    pub provider: ProviderSection,
    /// JSON array of canned responses; replaces the HTTP provider.
    pub mock_script: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub hardware_list: Option<PathBuf>,
    pub mapping_notes: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Reports processed concurrently.
    pub parallel: usize,
    /// Concurrent map calls within one report.
    pub map_parallelism: usize,
    pub extensions: Vec<String>,
    pub repo_mirror: Option<PathBuf>,
    /// Disables the block explorer fallback when false.
    pub explorer_enabled: bool,
    pub explorers: ExplorerConfig,
    /// External converter for non-text reports.
    pub converter: Option<ConverterConfig>,
    pub force: bool,
    pub resume: bool,
    pub severity: SeverityMapping,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let settings = RequestSettings::default();
        Self {
            chunk_length: DEFAULT_CHUNK_LENGTH,
            tokenizer: TokenizerConfig::default(),
            k: 1,
            max_depth: 6,
            selection_retries: 3,
            temperature: DEFAULT_TEMPERATURE,
            model_name: settings.model_name,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            provider: ProviderSection::default(),
            mock_script: None,
            taxonomy: None,
            hardware_list: None,
            mapping_notes: None,
            work_dir: PathBuf::from("work"),
            out_dir: PathBuf::from("dataset"),
            parallel: 1,
            map_parallelism: 4,
            extensions: DEFAULT_EXTENSIONS.iter().map(|e| e.to_string()).collect(),
            repo_mirror: None,
            explorer_enabled: true,
            explorers: ExplorerConfig::default(),
            converter: None,
            force: false,
            resume: false,
            severity: SeverityMapping::default(),
        }
    }
}

/// Values given on the command line. `None` leaves the lower layers alone.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub chunk_length: Option<usize>,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub model_name: Option<String>,
    pub provider_endpoint: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub hardware_list: Option<PathBuf>,
    pub mapping_notes: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub parallel: Option<usize>,
    pub repo_mirror: Option<PathBuf>,
    pub force: bool,
    pub resume: bool,
}

fn parse_env<T: std::str::FromStr>(var: &str, value: String) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Env {
        var: var.to_owned(),
        message: e.to_string(),
        value,
    })
}

fn parse_flag(var: &str, value: String) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        _ => Err(ConfigError::Env {
            var: var.to_owned(),
            value,
            message: "expected a boolean".into(),
        }),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Defaults, then the file, then `VULNSET_*` variables, then `overrides`.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        overrides: &ConfigOverrides,
    ) -> Result<Self, ConfigError> {
        let mut config = match file {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        config.apply_env(env)?;
        config.apply_overrides(overrides);
        Ok(config)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |name: &str| {
            let var = format!("{ENV_PREFIX}{name}");
            env(&var).map(|v| (var, v))
        };
        if let Some((var, v)) = get("CHUNK_LENGTH") {
            self.chunk_length = parse_env(&var, v)?;
        }
        if let Some((var, v)) = get("K") {
            self.k = parse_env(&var, v)?;
        }
        if let Some((var, v)) = get("TEMPERATURE") {
            self.temperature = parse_env(&var, v)?;
        }
        if let Some((_, v)) = get("MODEL") {
            self.model_name = v;
        }
        if let Some((_, v)) = get("PROVIDER") {
            self.provider.endpoint = Some(v);
        }
        if let Some((_, v)) = get("MOCK_SCRIPT") {
            self.mock_script = Some(v.into());
        }
        if let Some((_, v)) = get("TAXONOMY") {
            self.taxonomy = Some(v.into());
        }
        if let Some((_, v)) = get("HARDWARE_LIST") {
            self.hardware_list = Some(v.into());
        }
        if let Some((_, v)) = get("MAPPING_NOTES") {
            self.mapping_notes = Some(v.into());
        }
        if let Some((_, v)) = get("WORK") {
            self.work_dir = v.into();
        }
        if let Some((_, v)) = get("OUT") {
            self.out_dir = v.into();
        }
        if let Some((var, v)) = get("PARALLEL") {
            self.parallel = parse_env(&var, v)?;
        }
        if let Some((_, v)) = get("REPO_MIRROR") {
            self.repo_mirror = Some(v.into());
        }
        if let Some((var, v)) = get("FORCE") {
            self.force = parse_flag(&var, v)?;
        }
        if let Some((var, v)) = get("RESUME") {
            self.resume = parse_flag(&var, v)?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &ConfigOverrides) {
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        set(&mut self.chunk_length, &o.chunk_length);
        set(&mut self.k, &o.k);
        set(&mut self.temperature, &o.temperature);
        set(&mut self.model_name, &o.model_name);
        set(&mut self.work_dir, &o.work_dir);
        set(&mut self.out_dir, &o.out_dir);
        set(&mut self.parallel, &o.parallel);
        if o.provider_endpoint.is_some() {
            self.provider.endpoint = o.provider_endpoint.clone();
        }
        for (slot, value) in [
            (&mut self.mock_script, &o.mock_script),
            (&mut self.taxonomy, &o.taxonomy),
            (&mut self.hardware_list, &o.hardware_list),
            (&mut self.mapping_notes, &o.mapping_notes),
            (&mut self.repo_mirror, &o.repo_mirror),
        ] {
            if value.is_some() {
                *slot = value.clone();
            }
        }
        self.force |= o.force;
        self.resume |= o.resume;
    }

    /// Collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.chunk_length < 1 {
            problems.push("chunk_length must be at least 1".to_owned());
        }
        if let TokenizerConfig::Heuristic { chars_per_token: 0 } = self.tokenizer {
            problems.push("tokenizer.chars_per_token must be at least 1".to_owned());
        }
        if self.k < 1 {
            problems.push("k must be at least 1".to_owned());
        }
        if self.max_depth < 1 {
            problems.push("max_depth must be at least 1".to_owned());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            problems.push(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_output_tokens < 1 {
            problems.push("max_output_tokens must be at least 1".to_owned());
        }
        if self.parallel < 1 {
            problems.push("parallel must be at least 1".to_owned());
        }
        if self.map_parallelism < 1 {
            problems.push("map_parallelism must be at least 1".to_owned());
        }
        if self.extensions.iter().all(|e| e.trim_start_matches('.').is_empty()) {
            problems.push("extensions must name at least one file extension".to_owned());
        }
        if self.mock_script.is_none() && self.provider.endpoint.is_none() {
            problems.push("either a provider endpoint or a mock script is required".to_owned());
        }
        if self.provider.timeout_secs == 0 {
            problems.push("provider.timeout_secs must be positive".to_owned());
        }
        if self.provider.requests_per_minute == Some(0) {
            problems.push("provider.requests_per_minute must be positive".to_owned());
        }
        if let Err(e) = self.severity.validate() {
            problems.push(format!("severity: {e}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn request_settings(&self) -> RequestSettings {
        RequestSettings {
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }

    /// HTTP provider settings, with the key read through `env`.
    pub fn provider_config(&self, env: impl Fn(&str) -> Option<String>) -> Option<ProviderConfig> {
        let endpoint = self.provider.endpoint.clone()?;
        let mut config = ProviderConfig::new(endpoint);
        config.api_key = env(&self.provider.api_key_env).filter(|k| !k.is_empty());
        config.retry_limit = self.provider.retry_limit;
        config.request_timeout = Duration::from_secs(self.provider.timeout_secs);
        config.rate_limit = self.provider.requests_per_minute.map(|requests| RateLimit {
            requests,
            per: Duration::from_secs(60),
        });
        Some(config)
    }
}
