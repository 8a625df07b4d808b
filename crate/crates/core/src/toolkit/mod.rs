//! The agent's tools: web search, scholarly search, a goal-directed page
//! reader and a Python sandbox.
//!
//! Tools take batches. [`Toolkit::dispatch`] returns one [`Observation`]
//! per call, in call order; a failing call yields an error payload and
//! never takes the rest of the batch down with it.

pub mod backends;
pub mod sandbox;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Deserializer, Serialize};

use crate::prompts::{fill, BROWSER_SYSTEM, BROWSER_USER};
use crate::providers::{ChatMessage, Generator, SamplingParams};
use crate::text::{estimate_tokens, truncate_with_marker};

pub use backends::{
    FixtureReader, FixtureSearch, HttpReader, HttpSearch, Page, PageReader, SearchBackend,
    SearchHit, SyntheticReader, SyntheticSearch,
};
pub use sandbox::{CodeLimits, CodeOutput, CodeRunner, PythonSandbox};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("invalid tool call: {0}")]
    Invalid(String),
    #[error("fetch failed: {0}")]
    Fetch(String),
    #[error("search backend failed: {0}")]
    Search(String),
    #[error("sandbox could not be launched: {0}")]
    SandboxLaunch(String),
}

impl ToolError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ToolError::SandboxLaunch(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolKind {
    Search,
    Scholar,
    Browser,
    Code,
}

impl ToolKind {
    pub const ALL: [ToolKind; 4] = [ToolKind::Search, ToolKind::Scholar, ToolKind::Browser, ToolKind::Code];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolKind::Search => "search",
            ToolKind::Scholar => "scholar",
            ToolKind::Browser => "browser",
            ToolKind::Code => "code",
        }
    }
}

impl fmt::Display for ToolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

/// A tool invocation, serialized as `{"name": ..., "arguments": {...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", content = "arguments", rename_all = "lowercase")]
pub enum ToolCall {
    Search {
        #[serde(deserialize_with = "one_or_many")]
        query: Vec<String>,
    },
    Scholar {
        #[serde(deserialize_with = "one_or_many")]
        query: Vec<String>,
    },
    Browser { url: String, goal: String },
    Code { script: String },
}

impl ToolCall {
    pub fn search(queries: &[&str]) -> Self {
        ToolCall::Search {
            query: queries.iter().map(|q| q.to_string()).collect(),
        }
    }

    pub fn scholar(queries: &[&str]) -> Self {
        ToolCall::Scholar {
            query: queries.iter().map(|q| q.to_string()).collect(),
        }
    }

    pub fn kind(&self) -> ToolKind {
        match self {
            ToolCall::Search { .. } => ToolKind::Search,
            ToolCall::Scholar { .. } => ToolKind::Scholar,
            ToolCall::Browser { .. } => ToolKind::Browser,
            ToolCall::Code { .. } => ToolKind::Code,
        }
    }

    /// Parse and validate a call from its JSON form.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, ToolError> {
        let call: ToolCall =
            serde_json::from_value(value.clone()).map_err(|e| ToolError::Invalid(e.to_string()))?;
        call.validate()?;
        Ok(call)
    }

    pub fn validate(&self) -> Result<(), ToolError> {
        match self {
            ToolCall::Search { query } | ToolCall::Scholar { query } => {
                if query.is_empty() || query.iter().any(|q| q.trim().is_empty()) {
                    return Err(ToolError::Invalid("queries must be non-empty".into()));
                }
            }
            ToolCall::Browser { url, goal } => {
                validate_url(url)?;
                if goal.trim().is_empty() {
                    return Err(ToolError::Invalid("browser goal must be non-empty".into()));
                }
            }
            ToolCall::Code { script } => {
                if script.trim().is_empty() {
                    return Err(ToolError::Invalid("script must be non-empty".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn validate_url(raw: &str) -> Result<url::Url, ToolError> {
    let parsed =
        url::Url::parse(raw).map_err(|e| ToolError::Invalid(format!("malformed url '{raw}': {e}")))?;
    if !matches!(parsed.scheme(), "http" | "https") || parsed.host_str().is_none() {
        return Err(ToolError::Invalid(format!("url must be http(s) with a host: '{raw}'")));
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResults {
    pub query: String,
    pub hits: Vec<SearchHit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Results {
        results: Vec<QueryResults>,
    },
    Answer {
        url: String,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
    Code(CodeOutput),
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub tool: ToolKind,
    pub payload: Payload,
    pub tokens_consumed: u64,
}

impl Observation {
    pub fn error(tool: ToolKind, message: impl Into<String>) -> Self {
        let message = message.into();
        Self {
            tool,
            tokens_consumed: 0,
            payload: Payload::Error { message },
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self.payload, Payload::Error { .. })
    }

    /// Text form shown to the model in the next round.
    pub fn render(&self) -> String {
        let mut out = format!("[{}]", self.tool);
        match &self.payload {
            Payload::Results { results } => {
                for r in results {
                    out.push_str(&format!("\nquery: {}", r.query));
                    if let Some(e) = &r.error {
                        out.push_str(&format!("\nerror: {e}"));
                    }
                    for (i, h) in r.hits.iter().enumerate() {
                        out.push_str(&format!("\n{}. {}\n   {}\n   {}", i + 1, h.title, h.snippet, h.url));
                    }
                }
            }
            Payload::Answer { url, text, warning } => {
                out.push_str(&format!(" {url}"));
                if let Some(w) = warning {
                    out.push_str(&format!("\nwarning: {w}"));
                }
                out.push('\n');
                out.push_str(text);
            }
            Payload::Code(c) => {
                match c.exit_code {
                    Some(code) => out.push_str(&format!(" exit={code}")),
                    None => out.push_str(" exit=killed"),
                }
                if c.timed_out {
                    out.push_str(" timed_out");
                }
                out.push_str(&format!("\nstdout:\n{}\nstderr:\n{}", c.stdout, c.stderr));
            }
            Payload::Error { message } => out.push_str(&format!(" error: {message}")),
        }
        out
    }
}

/// Anything the agent loop can send tool calls to.
pub trait ToolHandle: Send + Sync {
    fn dispatch(&self, calls: &[ToolCall]) -> Vec<Observation>;
}

/// Handle for tool-less agents: every call is refused.
#[derive(Debug, Clone, Copy, Default)]
pub struct RefusalStub;

pub const NO_TOOLS_MESSAGE: &str = "no tools available";

impl ToolHandle for RefusalStub {
    fn dispatch(&self, calls: &[ToolCall]) -> Vec<Observation> {
        calls
            .iter()
            .map(|c| Observation::error(c.kind(), NO_TOOLS_MESSAGE))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolkitConfig {
    pub results_per_query: usize,
    pub payload_cap_bytes: usize,
    pub workers: usize,
    pub code_limits: CodeLimits,
    /// Launch attempts for the code sandbox before giving up on a call.
    pub sandbox_launch_attempts: u32,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        Self {
            results_per_query: 5,
            payload_cap_bytes: 16 * 1024,
            workers: 8,
            code_limits: CodeLimits::default(),
            sandbox_launch_attempts: 2,
        }
    }
}

pub struct Toolkit {
    search: Arc<dyn SearchBackend>,
    reader: Arc<dyn PageReader>,
    summarizer: Option<Arc<dyn Generator>>,
    code: Arc<dyn CodeRunner>,
    pub config: ToolkitConfig,
    code_lock: Mutex<()>,
}

impl Toolkit {
    pub fn new(
        search: Arc<dyn SearchBackend>,
        reader: Arc<dyn PageReader>,
        summarizer: Option<Arc<dyn Generator>>,
        code: Arc<dyn CodeRunner>,
        config: ToolkitConfig,
    ) -> Self {
        Self {
            search,
            reader,
            summarizer,
            code,
            config,
            code_lock: Mutex::new(()),
        }
    }

    /// Offline toolkit over synthetic search results and pages.
    pub fn synthetic(summarizer: Option<Arc<dyn Generator>>) -> Self {
        Self::new(
            Arc::new(SyntheticSearch),
            Arc::new(SyntheticReader),
            summarizer,
            Arc::new(PythonSandbox::default()),
            ToolkitConfig::default(),
        )
    }

    fn cap(&self, s: &str) -> String {
        truncate_with_marker(s, self.config.payload_cap_bytes).0
    }

    fn run_queries(&self, kind: ToolKind, queries: &[String]) -> Observation {
        let results: Vec<QueryResults> = queries
            .iter()
            .map(|q| match self.search.search(kind, q, self.config.results_per_query) {
                Ok(mut hits) => {
                    hits.truncate(self.config.results_per_query);
                    QueryResults {
                        query: q.clone(),
                        hits,
                        error: None,
                    }
                }
                Err(e) => QueryResults {
                    query: q.clone(),
                    hits: Vec::new(),
                    error: Some(e.to_string()),
                },
            })
            .collect();
        let mut obs = Observation {
            tool: kind,
            payload: Payload::Results { results },
            tokens_consumed: 0,
        };
        obs.tokens_consumed = estimate_tokens(&obs.render());
        obs
    }

    /// Fetch `url` and extract what `goal` asks for.
    pub fn browse(&self, url: &str, goal: &str) -> Result<Observation, ToolError> {
        validate_url(url)?;
        if goal.trim().is_empty() {
            return Err(ToolError::Invalid("browser goal must be non-empty".into()));
        }
        let page = match self.reader.fetch(url) {
            Ok(p) => p,
            Err(e) => return Ok(Observation::error(ToolKind::Browser, e.to_string())),
        };
        let tokens_consumed = page.tokens.unwrap_or_else(|| estimate_tokens(&page.content));
        let excerpt = |warning: String| Payload::Answer {
            url: url.to_string(),
            text: self.cap(&page.content.chars().take(4000).collect::<String>()),
            warning: Some(warning),
        };
        let payload = match &self.summarizer {
            None => excerpt("no summarizer configured; raw page excerpt".into()),
            Some(g) => {
                let messages = [
                    ChatMessage::system(BROWSER_SYSTEM),
                    ChatMessage::user(fill(
                        BROWSER_USER,
                        &[("goal", goal), ("url", url), ("content", &page.content)],
                    )),
                ];
                let params = SamplingParams {
                    max_tokens: 4096,
                    ..SamplingParams::default()
                };
                match g.generate(&messages, &params) {
                    Ok(r) => Payload::Answer {
                        url: url.to_string(),
                        text: self.cap(&r.text),
                        warning: None,
                    },
                    Err(e) => excerpt(format!("synthesis failed ({e}); raw page excerpt")),
                }
            }
        };
        Ok(Observation {
            tool: ToolKind::Browser,
            payload,
            tokens_consumed,
        })
    }

    pub fn run_code(&self, script: &str, limits: &CodeLimits) -> Result<Observation, ToolError> {
        if script.trim().is_empty() {
            return Err(ToolError::Invalid("script must be non-empty".into()));
        }
        limits.validate()?;
        let _guard = self.code_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut attempt = 0;
        let out = loop {
            attempt += 1;
            match self.code.run(script, limits, self.config.payload_cap_bytes) {
                Err(e) if e.is_retryable() && attempt < self.config.sandbox_launch_attempts => {
                    tracing::warn!(error = %e, "sandbox launch failed, retrying");
                }
                other => break other?,
            }
        };
        Ok(Observation {
            tool: ToolKind::Code,
            tokens_consumed: estimate_tokens(&out.stdout) + estimate_tokens(&out.stderr),
            payload: Payload::Code(out),
        })
    }

    fn execute(&self, call: &ToolCall) -> Observation {
        if let Err(e) = call.validate() {
            return Observation::error(call.kind(), e.to_string());
        }
        let result = match call {
            ToolCall::Search { query } => Ok(self.run_queries(ToolKind::Search, query)),
            ToolCall::Scholar { query } => Ok(self.run_queries(ToolKind::Scholar, query)),
            ToolCall::Browser { url, goal } => self.browse(url, goal),
            ToolCall::Code { script } => self.run_code(script, &self.config.code_limits),
        };
        result.unwrap_or_else(|e| Observation::error(call.kind(), e.to_string()))
    }
}

impl ToolHandle for Toolkit {
    fn dispatch(&self, calls: &[ToolCall]) -> Vec<Observation> {
        let mut slots: Vec<Option<Observation>> = vec![None; calls.len()];
        let (code_idx, other_idx): (Vec<usize>, Vec<usize>) =
            (0..calls.len()).partition(|&i| calls[i].kind() == ToolKind::Code);
        let next = AtomicUsize::new(0);
        let done: Mutex<Vec<(usize, Observation)>> = Mutex::new(Vec::new());
        let workers = self.config.workers.max(1).min(other_idx.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let n = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&i) = other_idx.get(n) else { break };
                    let obs = self.execute(&calls[i]);
                    done.lock().unwrap_or_else(|e| e.into_inner()).push((i, obs));
                });
            }
            // Code runs one script at a time, in call order.
            for &i in &code_idx {
                let obs = self.execute(&calls[i]);
                done.lock().unwrap_or_else(|e| e.into_inner()).push((i, obs));
            }
        });
        for (i, obs) in done.into_inner().unwrap_or_else(|e| e.into_inner()) {
            slots[i] = Some(obs);
        }
        slots
            .into_iter()
            .zip(calls)
            .map(|(o, c)| o.unwrap_or_else(|| Observation::error(c.kind(), "tool worker lost")))
            .collect()
    }
}

/// Count calls per tool.
pub fn count_calls<'a>(calls: impl IntoIterator<Item = &'a ToolCall>) -> BTreeMap<ToolKind, u64> {
    let mut counts = BTreeMap::new();
    for c in calls {
        *counts.entry(c.kind()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parse_tool_call_shapes() {
        let c = ToolCall::from_json(&json!({"name": "search", "arguments": {"query": "rust"}})).unwrap();
        assert_eq!(c, ToolCall::search(&["rust"]));
        let c = ToolCall::from_json(&json!({"name": "browser", "arguments": {"url": "https://a.org/x", "goal": "year"}}))
            .unwrap();
        assert_eq!(c.kind(), ToolKind::Browser);
        assert!(ToolCall::from_json(&json!({"name": "teleport", "arguments": {}})).is_err());
        assert!(ToolCall::from_json(&json!({"name": "browser", "arguments": {"url": "not a url", "goal": "g"}})).is_err());
        assert!(ToolCall::from_json(&json!({"name": "code", "arguments": {"script": " "}})).is_err());
    }

    #[test]
    fn serialized_form_uses_name_and_arguments() {
        let v = serde_json::to_value(ToolCall::Code { script: "print(1)".into() }).unwrap();
        assert_eq!(v, json!({"name": "code", "arguments": {"script": "print(1)"}}));
    }

    #[test]
    fn refusal_stub_refuses_everything() {
        let obs = RefusalStub.dispatch(&[ToolCall::search(&["x"])]);
        assert_eq!(obs.len(), 1);
        assert!(obs[0].is_error());
        assert!(obs[0].render().contains(NO_TOOLS_MESSAGE));
    }
}
