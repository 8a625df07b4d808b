//! Search and page-reading backends: HTTP, fixture directories, and
//! synthetic generators for fully offline runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ToolError, ToolKind};
use crate::text::{hash_parts, sha256_hex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    /// Snippet for web results, publication metadata for scholar results.
    pub snippet: String,
    pub url: String,
}

pub trait SearchBackend: Send + Sync {
    /// `kind` is [`ToolKind::Search`] or [`ToolKind::Scholar`].
    fn search(&self, kind: ToolKind, query: &str, limit: usize) -> Result<Vec<SearchHit>, ToolError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub content: String,
    /// Token count reported by the reader, when it reports one.
    #[serde(default)]
    pub tokens: Option<u64>,
}

pub trait PageReader: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Page, ToolError>;
}

/// Fixture file stem for a query or URL.
pub fn fixture_key(text: &str) -> String {
    sha256_hex(text)[..16].to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SearchFixture {
    query: String,
    results: Vec<SearchHit>,
}

/// Search results read from `<dir>/<kind>/<key>.json`, keyed by
/// [`fixture_key`] of the query.
pub struct FixtureSearch {
    dir: PathBuf,
    fallback: Option<Arc<dyn SearchBackend>>,
}

impl FixtureSearch {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn SearchBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn path_for(dir: &Path, kind: ToolKind, query: &str) -> PathBuf {
        dir.join(kind.as_str()).join(format!("{}.json", fixture_key(query)))
    }
}

impl SearchBackend for FixtureSearch {
    fn search(&self, kind: ToolKind, query: &str, limit: usize) -> Result<Vec<SearchHit>, ToolError> {
        let path = Self::path_for(&self.dir, kind, query);
        match fs::read_to_string(&path) {
            Ok(text) => {
                let fx: SearchFixture = serde_json::from_str(&text)
                    .map_err(|e| ToolError::Search(format!("{}: {e}", path.display())))?;
                Ok(fx.results.into_iter().take(limit).collect())
            }
            Err(_) => match &self.fallback {
                Some(f) => f.search(kind, query, limit),
                None => Err(ToolError::Search(format!("no fixture for query '{query}'"))),
            },
        }
    }
}

/// Deterministic made-up results derived from the query hash.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticSearch;

impl SearchBackend for SyntheticSearch {
    fn search(&self, kind: ToolKind, query: &str, limit: usize) -> Result<Vec<SearchHit>, ToolError> {
        Ok((0..limit)
            .map(|i| {
                let h = hash_parts([kind.as_str(), query, &i.to_string()]);
                let snippet = match kind {
                    ToolKind::Scholar => format!(
                        "J. Doe et al. Proc. Synthetic Venue {} - cited by {}",
                        1990 + h % 35,
                        h % 500
                    ),
                    _ => format!("Reference material about {query} (entry {h:08x})."),
                };
                SearchHit {
                    title: format!("{query} - result {}", i + 1),
                    snippet,
                    url: format!("https://example.org/{}/{h:016x}", kind.as_str()),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PageFixture {
    url: String,
    content: String,
    #[serde(default)]
    tokens: Option<u64>,
}

/// Pages read from `<dir>/<key>.json`, keyed by [`fixture_key`] of the URL.
pub struct FixtureReader {
    dir: PathBuf,
    fallback: Option<Arc<dyn PageReader>>,
}

impl FixtureReader {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn PageReader>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn path_for(dir: &Path, url: &str) -> PathBuf {
        dir.join(format!("{}.json", fixture_key(url)))
    }
}

impl PageReader for FixtureReader {
    fn fetch(&self, url: &str) -> Result<Page, ToolError> {
        let path = Self::path_for(&self.dir, url);
        match fs::read_to_string(&path) {
            Ok(text) => {
                let fx: PageFixture = serde_json::from_str(&text)
                    .map_err(|e| ToolError::Fetch(format!("{}: {e}", path.display())))?;
                Ok(Page {
                    content: fx.content,
                    tokens: fx.tokens,
                })
            }
            Err(_) => match &self.fallback {
                Some(f) => f.fetch(url),
                None => Err(ToolError::Fetch(format!("unreachable url {url}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticReader;

impl PageReader for SyntheticReader {
    fn fetch(&self, url: &str) -> Result<Page, ToolError> {
        let h = hash_parts(["page", url]);
        let content = format!(
            "Archived page {url}.\n\nThe record was first published in the year {}. \
             It reports a measured value of {}.{} units across {} samples.\n\n\
             Later work revisited the topic and confirmed the main figures.",
            1950 + h % 70,
            h % 1000,
            (h >> 10) % 100,
            (h >> 20) % 5000
        );
        Ok(Page { content, tokens: None })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpToolEndpoint {
    pub url: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_tool_timeout")]
    pub timeout_secs: u64,
}

fn default_tool_timeout() -> u64 {
    60
}

fn client(timeout_secs: u64) -> Result<Client, ToolError> {
    Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .map_err(|e| ToolError::Search(e.to_string()))
}

fn api_key(env: &Option<String>) -> Option<String> {
    env.as_deref().and_then(|v| std::env::var(v).ok()).filter(|k| !k.is_empty())
}

/// Google-style JSON search API: POST `{"q", "num"}`, results under
/// `organic`.
pub struct HttpSearch {
    search: HttpToolEndpoint,
    scholar: HttpToolEndpoint,
    client: Client,
}

impl HttpSearch {
    pub fn new(search: HttpToolEndpoint, scholar: HttpToolEndpoint) -> Result<Self, ToolError> {
        let client = client(search.timeout_secs.max(scholar.timeout_secs))?;
        Ok(Self {
            search,
            scholar,
            client,
        })
    }
}

pub fn parse_search_response(kind: ToolKind, body: &Value) -> Vec<SearchHit> {
    let items = body.get("organic").and_then(Value::as_array).cloned().unwrap_or_default();
    let s = |v: &Value, k: &str| v.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
    items
        .iter()
        .map(|item| {
            let snippet = match kind {
                ToolKind::Scholar => {
                    let mut meta = s(item, "publicationInfo");
                    if let Some(year) = item.get("year").and_then(Value::as_u64) {
                        meta.push_str(&format!(" ({year})"));
                    }
                    if let Some(cited) = item.get("citedBy").and_then(Value::as_u64) {
                        meta.push_str(&format!(" - cited by {cited}"));
                    }
                    meta.trim().to_string()
                }
                _ => s(item, "snippet"),
            };
            SearchHit {
                title: s(item, "title"),
                snippet,
                url: s(item, "link"),
            }
        })
        .collect()
}

impl SearchBackend for HttpSearch {
    fn search(&self, kind: ToolKind, query: &str, limit: usize) -> Result<Vec<SearchHit>, ToolError> {
        let ep = if kind == ToolKind::Scholar { &self.scholar } else { &self.search };
        let mut req = self.client.post(&ep.url).json(&json!({"q": query, "num": limit}));
        if let Some(k) = api_key(&ep.api_key_env) {
            req = req.header("X-API-KEY", k);
        }
        let resp = req.send().map_err(|e| ToolError::Search(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ToolError::Search(format!("HTTP {}", resp.status())));
        }
        let body: Value = resp.json().map_err(|e| ToolError::Search(e.to_string()))?;
        let mut hits = parse_search_response(kind, &body);
        hits.truncate(limit);
        Ok(hits)
    }
}

/// Reader service taking the target URL appended to its base URL and
/// returning `{"data": {"content", "usage": {"tokens"}}}` or plain text.
pub struct HttpReader {
    endpoint: HttpToolEndpoint,
    client: Client,
}

impl HttpReader {
    pub fn new(endpoint: HttpToolEndpoint) -> Result<Self, ToolError> {
        Ok(Self {
            client: client(endpoint.timeout_secs)?,
            endpoint,
        })
    }
}

impl PageReader for HttpReader {
    fn fetch(&self, url: &str) -> Result<Page, ToolError> {
        let target = format!("{}/{}", self.endpoint.url.trim_end_matches('/'), url);
        let mut req = self.client.get(target).header("Accept", "application/json");
        if let Some(k) = api_key(&self.endpoint.api_key_env) {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| ToolError::Fetch(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ToolError::Fetch(format!("HTTP {} for {url}", resp.status())));
        }
        let text = resp.text().map_err(|e| ToolError::Fetch(e.to_string()))?;
        Ok(match serde_json::from_str::<Value>(&text) {
            Ok(v) if v.pointer("/data/content").is_some() => Page {
                content: v
                    .pointer("/data/content")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string(),
                tokens: v.pointer("/data/usage/tokens").and_then(Value::as_u64),
            },
            _ => Page {
                content: text,
                tokens: None,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_search_is_stable() {
        let a = SyntheticSearch.search(ToolKind::Search, "q", 5).unwrap();
        let b = SyntheticSearch.search(ToolKind::Search, "q", 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_ne!(a, SyntheticSearch.search(ToolKind::Scholar, "q", 5).unwrap());
    }

    #[test]
    fn parse_serper_like_results() {
        let body = json!({"organic": [
            {"title": "T", "snippet": "S", "link": "https://x.org"},
            {"title": "P", "publicationInfo": "A Author - Venue", "citedBy": 12, "link": "https://y.org"}
        ]});
        let hits = parse_search_response(ToolKind::Search, &body);
        assert_eq!(hits[0].snippet, "S");
        let hits = parse_search_response(ToolKind::Scholar, &body);
        assert_eq!(hits[1].snippet, "A Author - Venue - cited by 12");
    }
}
