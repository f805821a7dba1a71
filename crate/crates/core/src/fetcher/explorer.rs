use std::collections::BTreeMap;
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{sanitize_relative_path, validate_address, FetchError, SourceBundle, SourceFile, SourceOrigin};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal GET abstraction so explorer logic can be tested without a network.
pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str, query: &[(String, String)]) -> Result<HttpResponse, String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| FetchError::Config(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn get(&self, url: &str, query: &[(String, String)]) -> Result<HttpResponse, String> {
        let url = reqwest::Url::parse_with_params(url, query).map_err(|e| e.to_string())?;
        let resp = self.client.get(url).send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorerEndpoint {
    pub base_url: String,
    /// Environment variable holding the API key, if the explorer needs one.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorerConfig {
    /// Keyed by lowercase chain name.
    pub chains: BTreeMap<String, ExplorerEndpoint>,
    pub retries: u32,
    #[serde(with = "millis")]
    pub backoff: Duration,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        let chains = [
            ("ethereum", "https://api.etherscan.io/api", "ETHERSCAN_API_KEY"),
            ("bsc", "https://api.bscscan.com/api", "BSCSCAN_API_KEY"),
            ("polygon", "https://api.polygonscan.com/api", "POLYGONSCAN_API_KEY"),
            ("arbitrum", "https://api.arbiscan.io/api", "ARBISCAN_API_KEY"),
            (
                "optimism",
                "https://api-optimistic.etherscan.io/api",
                "OPTIMISM_API_KEY",
            ),
            ("base", "https://api.basescan.org/api", "BASESCAN_API_KEY"),
            ("avalanche", "https://api.snowtrace.io/api", "SNOWTRACE_API_KEY"),
            ("fantom", "https://api.ftmscan.com/api", "FTMSCAN_API_KEY"),
        ]
        .into_iter()
        .map(|(chain, url, env)| {
            (
                chain.to_owned(),
                ExplorerEndpoint {
                    base_url: url.to_owned(),
                    api_key_env: Some(env.to_owned()),
                },
            )
        })
        .collect();
        Self {
            chains,
            retries: 3,
            backoff: Duration::from_millis(1000),
        }
    }
}

/// Folds common spellings of chain names onto the config keys.
pub(crate) fn canonical_chain(chain: &str) -> String {
    let key = chain.trim().to_lowercase();
    let alias = match key.as_str() {
        "" | "eth" | "mainnet" | "ethereum mainnet" | "etherscan" => "ethereum",
        "bnb" | "bnb chain" | "bnb smart chain" | "binance smart chain" | "binance" => "bsc",
        "matic" | "polygon pos" => "polygon",
        "arbitrum one" => "arbitrum",
        "op mainnet" => "optimism",
        "avax" | "avalanche c-chain" => "avalanche",
        "ftm" => "fantom",
        other => other,
    };
    alias.to_owned()
}

pub struct ExplorerClient {
    pub config: ExplorerConfig,
    transport: Box<dyn HttpTransport>,
}

impl ExplorerClient {
    pub fn new(config: ExplorerConfig, transport: Box<dyn HttpTransport>) -> Self {
        Self { config, transport }
    }

    fn endpoint(&self, chain: &str) -> Result<(&ExplorerEndpoint, String), FetchError> {
        let key = canonical_chain(chain);
        self.config
            .chains
            .get(&key)
            .map(|e| (e, key))
            .ok_or_else(|| FetchError::Config(format!("no explorer configured for chain `{chain}`")))
    }

    fn get_with_retry(&self, url: &str, query: &[(String, String)]) -> Result<Value, FetchError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome: Result<(), String> = match self.transport.get(url, query) {
                Err(e) => Err(e),
                Ok(r) if r.status == 429 || r.status >= 500 => Err(format!("HTTP {}", r.status)),
                Ok(r) if !(200..300).contains(&r.status) => {
                    return Err(FetchError::Transport {
                        attempts: attempt,
                        message: format!("HTTP {}: {}", r.status, r.body),
                    })
                }
                Ok(r) => match serde_json::from_str::<Value>(&r.body) {
                    Err(e) => Err(format!("malformed explorer response: {e}")),
                    Ok(v) if is_rate_limited(&v) => Err(format!("rate limited: {}", v["result"])),
                    Ok(v) => return Ok(v),
                },
            };
            let message = outcome.unwrap_err();
            if attempt > self.config.retries {
                return Err(FetchError::Transport {
                    attempts: attempt,
                    message,
                });
            }
            tracing::debug!(attempt, %message, "explorer request failed; retrying");
            std::thread::sleep(self.config.backoff * 2u32.saturating_pow(attempt - 1));
        }
    }
}

fn is_rate_limited(v: &Value) -> bool {
    v["status"] == "0"
        && v["result"]
            .as_str()
            .is_some_and(|r| r.to_lowercase().contains("rate limit"))
}

/// Downloads verified source for `address` from the chain's explorer.
pub fn fetch_onchain(address: &str, chain: &str, client: &ExplorerClient) -> Result<SourceBundle, FetchError> {
    if !validate_address(address) {
        return Err(FetchError::Precondition(format!("invalid address `{address}`")));
    }
    let (endpoint, chain_key) = client.endpoint(chain)?;
    let mut query = vec![
        ("module".to_owned(), "contract".to_owned()),
        ("action".to_owned(), "getsourcecode".to_owned()),
        ("address".to_owned(), address.to_owned()),
    ];
    if let Some(key) = endpoint.api_key_env.as_ref().and_then(|v| std::env::var(v).ok()) {
        query.push(("apikey".to_owned(), key));
    }
    let identifier = format!("{chain_key}:{address}");
    let body = client.get_with_retry(&endpoint.base_url, &query)?;

    let entry = match &body["result"] {
        Value::Array(items) => items.first().cloned().unwrap_or(Value::Null),
        Value::String(msg) if body["status"] == "0" => {
            if msg.to_lowercase().contains("not verified") {
                return Err(FetchError::NoSource(identifier));
            }
            return Err(FetchError::Transport {
                attempts: 1,
                message: msg.clone(),
            });
        }
        _ => Value::Null,
    };
    let source = entry["SourceCode"].as_str().unwrap_or("").trim();
    if source.is_empty() {
        return Err(FetchError::NoSource(identifier));
    }
    let name = entry["ContractName"].as_str().unwrap_or("").trim();
    let files = unpack_source(source, name)?;
    Ok(SourceBundle {
        origin: SourceOrigin::Onchain,
        identifier,
        files,
        retrieved_at: Utc::now(),
    })
}

/// Splits an explorer `SourceCode` field into files. The field holds either
/// plain Solidity, a JSON map of path to `{content}`, or standard compiler
/// input JSON wrapped in an extra pair of braces.
fn unpack_source(source: &str, contract_name: &str) -> Result<Vec<SourceFile>, FetchError> {
    let json_text = if source.starts_with("{{") && source.ends_with("}}") {
        Some(&source[1..source.len() - 1])
    } else if source.starts_with('{') {
        Some(source)
    } else {
        None
    };
    let parsed = json_text.and_then(|t| serde_json::from_str::<Value>(t).ok());
    let Some(Value::Object(obj)) = parsed else {
        let name = if contract_name.is_empty() {
            "Contract"
        } else {
            contract_name
        };
        return Ok(vec![SourceFile {
            path: sanitize_relative_path(&format!("{name}.sol"))?,
            content: source.to_owned(),
        }]);
    };
    let sources = match obj.get("sources") {
        Some(Value::Object(s)) => s.clone(),
        _ => obj,
    };
    let mut files = Vec::with_capacity(sources.len());
    for (path, entry) in sources {
        let content = match &entry {
            Value::Object(o) => o.get("content").and_then(Value::as_str).unwrap_or(""),
            Value::String(s) => s,
            _ => "",
        };
        files.push(SourceFile {
            path: sanitize_relative_path(&path)?,
            content: content.to_owned(),
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(files)
}
