//! Model-facing capabilities: generation, embedding, rerank similarity and
//! answer judging.
//!
//! Every capability is a trait with a remote HTTP implementation in
//! [`remote`] and deterministic offline implementations in [`mock`] and
//! [`sim`]. Implementations supply the raw call; the provided trait method
//! enforces the shared contract (preconditions, normalization, clamping) so
//! every backend behaves the same at the boundary.

pub mod judge;
pub mod mock;
pub mod remote;
pub mod sim;

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use judge::{judge_prompt, parse_judge_reply, render_judge_reply, GeneratorJudge};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited by provider")]
    RateLimited,
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("judge reply could not be parsed ({message}); raw reply: {raw}")]
    JudgeParse { message: String, raw: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::RateLimited)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Check a conversation against the message invariants: non-empty, user and
/// system content present, and no two assistant turns back to back.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), ProviderError> {
    if messages.is_empty() {
        return Err(ProviderError::Precondition("messages must be non-empty".into()));
    }
    for (i, m) in messages.iter().enumerate() {
        if matches!(m.role, Role::System | Role::User) && m.content.trim().is_empty() {
            return Err(ProviderError::Precondition(format!(
                "message {i} ({}) has empty content",
                m.role.as_str()
            )));
        }
        if i > 0 && m.role == Role::Assistant && messages[i - 1].role == Role::Assistant {
            return Err(ProviderError::Precondition(format!(
                "messages {} and {i} are consecutive assistant turns",
                i - 1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Per-call sampling seed. Independent attempts at the same prompt
    /// differ only in this field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.95,
            max_tokens: 40_960,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ProviderError::Precondition(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ProviderError::Precondition(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// False when the provider returned no usage block and the counts are a
    /// characters/4 estimate.
    pub usage_reported: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub extracted_final_answer: Option<String>,
    pub reasoning: String,
    pub correct: bool,
    pub confidence: u8,
}

pub trait Generator: Send + Sync {
    /// Backend call. Callers go through [`Generator::generate`].
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<GenerationResult, ProviderError>;

    fn identity(&self) -> String;

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<GenerationResult, ProviderError> {
        validate_messages(messages)?;
        params.validate()?;
        self.complete(messages, params)
    }
}

pub trait Embedder: Send + Sync {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;

    fn identity(&self) -> String;

    /// Embed a batch. Every returned vector has unit L2 norm and the batch
    /// shares one dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(ProviderError::Precondition(format!("text {i} is empty")));
        }
        let raw = self.embed_raw(texts)?;
        if raw.len() != texts.len() {
            return Err(ProviderError::Malformed(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                raw.len()
            )));
        }
        let dim = raw.first().map_or(0, Vec::len);
        raw.into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(ProviderError::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                normalize(v)
            })
            .collect()
    }
}

pub fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, ProviderError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(ProviderError::Malformed("zero or non-finite embedding".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Plain cosine similarity, `a·b / (|a||b|)`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub trait Reranker: Send + Sync {
    fn score(&self, query: &str, candidate: &str) -> Result<f64, ProviderError>;

    fn identity(&self) -> String;

    /// Similarity of `candidate` to `query` in [0, 1]. Argument order is
    /// significant; backends are not assumed symmetric.
    fn similarity(&self, query: &str, candidate: &str) -> Result<f64, ProviderError> {
        if query.trim().is_empty() || candidate.trim().is_empty() {
            return Err(ProviderError::Precondition("rerank inputs must be non-empty".into()));
        }
        let s = self.score(query, candidate)?;
        if !s.is_finite() {
            return Err(ProviderError::Malformed(format!("non-finite rerank score {s}")));
        }
        Ok(s.clamp(0.0, 1.0))
    }
}

pub trait Judge: Send + Sync {
    fn judge_raw(
        &self,
        question: &str,
        response: &str,
        correct_answer: &str,
    ) -> Result<JudgeVerdict, ProviderError>;

    fn identity(&self) -> String;

    fn judge_correct(
        &self,
        question: &str,
        response: &str,
        correct_answer: &str,
    ) -> Result<JudgeVerdict, ProviderError> {
        for (name, v) in [
            ("question", question),
            ("response", response),
            ("correct_answer", correct_answer),
        ] {
            if v.trim().is_empty() {
                return Err(ProviderError::Precondition(format!("{name} is empty")));
            }
        }
        self.judge_raw(question, response, correct_answer)
    }
}

/// Exponential backoff on retryable errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 1000,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.factor.powi(retry as i32);
        Duration::from_millis(ms as u64)
    }

    pub fn run<T>(
        &self,
        op: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        self.run_with_sleep(op, thread::sleep)
    }

    pub fn run_with_sleep<T>(
        &self,
        mut op: impl FnMut() -> Result<T, ProviderError>,
        mut sleep: impl FnMut(Duration),
    ) -> Result<T, ProviderError> {
        let mut retry = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && retry < self.max_retries => {
                    tracing::warn!(error = %e, retry, "retrying provider call");
                    sleep(self.delay(retry));
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    #[test]
    fn sampling_defaults() {
        let p = SamplingParams::default();
        assert_eq!(p.temperature, 0.6);
        assert_eq!(p.top_p, 0.95);
        assert_eq!(p.max_tokens, 40_960);
        p.validate().unwrap();
        assert!(SamplingParams { top_p: 0.0, ..p.clone() }.validate().is_err());
        assert!(SamplingParams { temperature: -0.1, ..p }.validate().is_err());
    }

    #[test]
    fn message_invariants() {
        assert!(validate_messages(&[]).is_err());
        assert!(validate_messages(&[ChatMessage::user("  ")]).is_err());
        assert!(validate_messages(&[
            ChatMessage::user("q"),
            ChatMessage::assistant("a"),
            ChatMessage::assistant("b"),
        ])
        .is_err());
        validate_messages(&[
            ChatMessage::system("s"),
            ChatMessage::user("q"),
            ChatMessage::assistant("a"),
            ChatMessage::user("more"),
        ])
        .unwrap();
    }

    #[test]
    fn retry_backoff_schedule() {
        let policy = RetryPolicy::default();
        let slept = RefCell::new(Vec::new());
        let mut calls = 0;
        let out: Result<(), _> = policy.run_with_sleep(
            || {
                calls += 1;
                Err(ProviderError::Transport("down".into()))
            },
            |d| slept.borrow_mut().push(d.as_millis()),
        );
        assert!(matches!(out, Err(ProviderError::Transport(_))));
        assert_eq!(calls, 4);
        assert_eq!(*slept.borrow(), vec![1000, 2000, 4000]);
    }

    #[test]
    fn retry_stops_on_non_retryable_and_success() {
        let policy = RetryPolicy::default();
        let mut calls = 0;
        let out: Result<(), _> = policy.run_with_sleep(
            || {
                calls += 1;
                Err(ProviderError::Malformed("bad".into()))
            },
            |_| {},
        );
        assert!(out.is_err());
        assert_eq!(calls, 1);

        let mut calls = 0;
        let out = policy.run_with_sleep(
            || {
                calls += 1;
                if calls < 3 {
                    Err(ProviderError::RateLimited)
                } else {
                    Ok(calls)
                }
            },
            |_| {},
        );
        assert_eq!(out, Ok(3));
    }
}
