//! HTTP backends speaking the common chat-completions / embeddings / rerank
//! JSON shapes.

use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    ChatMessage, Embedder, GenerationResult, Generator, ProviderError, Reranker, RetryPolicy,
    SamplingParams,
};
use crate::prompts::SIMILARITY_INSTRUCTION;
use crate::text::estimate_tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    600
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn api_key(&self) -> Option<String> {
        self.api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|k| !k.is_empty())
    }
}

struct HttpBackend {
    cfg: EndpointConfig,
    client: Client,
    retry: RetryPolicy,
}

impl HttpBackend {
    fn new(cfg: EndpointConfig, retry: RetryPolicy) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { cfg, client, retry })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        self.retry.run(|| {
            let mut req = self.client.post(self.cfg.url(path)).json(body);
            if let Some(key) = self.cfg.api_key() {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .map_err(|e| ProviderError::Transport(e.to_string()))?;
            read_json(resp)
        })
    }
}

fn read_json(resp: Response) -> Result<Value, ProviderError> {
    let status = resp.status();
    if status == StatusCode::TOO_MANY_REQUESTS {
        return Err(ProviderError::RateLimited);
    }
    let body = resp
        .text()
        .map_err(|e| ProviderError::Transport(e.to_string()))?;
    if status.is_server_error() {
        return Err(ProviderError::Transport(format!("HTTP {status}: {body}")));
    }
    if !status.is_success() {
        return Err(ProviderError::Malformed(format!("HTTP {status}: {body}")));
    }
    serde_json::from_str(&body).map_err(|e| ProviderError::Malformed(format!("{e}: {body}")))
}

/// Chat-completions client.
pub struct ChatCompletionsClient {
    http: HttpBackend,
}

impl ChatCompletionsClient {
    pub fn new(cfg: EndpointConfig, retry: RetryPolicy) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpBackend::new(cfg, retry)?,
        })
    }
}

/// Pull text and usage out of a chat-completions response body.
pub fn parse_chat_response(
    body: &Value,
    messages: &[ChatMessage],
) -> Result<GenerationResult, ProviderError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))?
        .to_string();
    let usage = body.get("usage");
    let field = |name: &str| usage.and_then(|u| u.get(name)).and_then(Value::as_u64);
    Ok(match (field("prompt_tokens"), field("completion_tokens")) {
        (Some(input_tokens), Some(output_tokens)) => GenerationResult {
            text,
            input_tokens,
            output_tokens,
            usage_reported: true,
        },
        _ => GenerationResult {
            input_tokens: messages.iter().map(|m| estimate_tokens(&m.content)).sum(),
            output_tokens: estimate_tokens(&text),
            text,
            usage_reported: false,
        },
    })
}

impl Generator for ChatCompletionsClient {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<GenerationResult, ProviderError> {
        let mut body = json!({
            "model": self.http.cfg.model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.http.post("chat/completions", &body)?;
        parse_chat_response(&resp, messages)
    }

    fn identity(&self) -> String {
        format!("chat:{}@{}", self.http.cfg.model, self.http.cfg.base_url)
    }
}

pub struct HttpEmbedder {
    http: HttpBackend,
}

impl HttpEmbedder {
    pub fn new(cfg: EndpointConfig, retry: RetryPolicy) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpBackend::new(cfg, retry)?,
        })
    }
}

pub fn parse_embedding_response(body: &Value) -> Result<Vec<Vec<f64>>, ProviderError> {
    let data = body
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::Malformed("missing data array".into()))?;
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
    for (i, item) in data.iter().enumerate() {
        let idx = item.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
        let emb = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed(format!("data[{i}] has no embedding")))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| ProviderError::Malformed("non-numeric embedding value".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((idx, emb));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

impl Embedder for HttpEmbedder {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({ "model": self.http.cfg.model, "input": texts });
        parse_embedding_response(&self.http.post("embeddings", &body)?)
    }

    fn identity(&self) -> String {
        format!("embed:{}@{}", self.http.cfg.model, self.http.cfg.base_url)
    }
}

pub struct HttpReranker {
    http: HttpBackend,
}

impl HttpReranker {
    pub fn new(cfg: EndpointConfig, retry: RetryPolicy) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpBackend::new(cfg, retry)?,
        })
    }
}

pub fn parse_rerank_response(body: &Value) -> Result<f64, ProviderError> {
    let first = body
        .pointer("/results/0")
        .ok_or_else(|| ProviderError::Malformed(format!("missing results[0]: {body}")))?;
    first
        .get("relevance_score")
        .or_else(|| first.get("score"))
        .and_then(Value::as_f64)
        .ok_or_else(|| ProviderError::Malformed(format!("unparseable rerank score: {first}")))
}

impl Reranker for HttpReranker {
    fn score(&self, query: &str, candidate: &str) -> Result<f64, ProviderError> {
        let body = json!({
            "model": self.http.cfg.model,
            "query": query,
            "documents": [candidate],
            "instruction": SIMILARITY_INSTRUCTION,
        });
        parse_rerank_response(&self.http.post("rerank", &body)?)
    }

    fn identity(&self) -> String {
        format!("rerank:{}@{}", self.http.cfg.model, self.http.cfg.base_url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_is_mirrored_not_recomputed() {
        let body = json!({
            "choices": [{"message": {"role": "assistant", "content": "hello"}}],
            "usage": {"prompt_tokens": 18614, "completion_tokens": 11643}
        });
        let r = parse_chat_response(&body, &[ChatMessage::user("x")]).unwrap();
        assert_eq!((r.input_tokens, r.output_tokens), (18614, 11643));
        assert!(r.usage_reported);
    }

    #[test]
    fn missing_usage_is_estimated_and_flagged() {
        let body = json!({"choices": [{"message": {"content": "abcdefgh"}}]});
        let r = parse_chat_response(&body, &[ChatMessage::user("abcd")]).unwrap();
        assert_eq!((r.input_tokens, r.output_tokens), (1, 2));
        assert!(!r.usage_reported);
        assert!(parse_chat_response(&json!({}), &[]).is_err());
    }

    #[test]
    fn embeddings_sorted_by_index() {
        let body = json!({"data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]}
        ]});
        assert_eq!(
            parse_embedding_response(&body).unwrap(),
            vec![vec![1.0, 0.0], vec![0.0, 1.0]]
        );
    }

    #[test]
    fn rerank_score_fields() {
        assert_eq!(
            parse_rerank_response(&json!({"results": [{"index": 0, "relevance_score": 0.4}]})).unwrap(),
            0.4
        );
        assert!(parse_rerank_response(&json!({"results": [{"score": "high"}]})).is_err());
    }
}
