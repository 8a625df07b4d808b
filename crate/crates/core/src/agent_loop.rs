//! Multi-round research loop.
//!
//! Each round the model writes a report and ends it with tool calls or a
//! final answer. By default a round sees only the question plus the
//! previous round's report and observations; nothing older.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost_ledger::UsageEvent;
use crate::prompts::{self, FINAL_ANSWER_MARKER, TOOL_CALL_CLOSE, TOOL_CALL_OPEN, TOOL_REPROMPT};
use crate::providers::{ChatMessage, Generator, SamplingParams};
use crate::toolkit::{Observation, ToolCall, ToolHandle, ToolKind, NO_TOOLS_MESSAGE};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Question plus the previous report and observations only.
    #[default]
    Markovian,
    /// Every earlier round, for ablations.
    FullHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub name: String,
    pub tools_enabled: bool,
    pub max_rounds: u32,
    pub sampling: SamplingParams,
    pub system_prompt: String,
    #[serde(default)]
    pub context_mode: ContextMode,
}

impl AgentConfig {
    /// Base model without tools.
    pub fn lkp() -> Self {
        Self {
            name: "lkp".into(),
            tools_enabled: false,
            max_rounds: 20,
            sampling: SamplingParams::default(),
            system_prompt: prompts::solver_system(false),
            context_mode: ContextMode::Markovian,
        }
    }

    /// Tool-augmented solver.
    pub fn mko() -> Self {
        Self {
            name: "mko".into(),
            tools_enabled: true,
            system_prompt: prompts::solver_system(true),
            ..Self::lkp()
        }
    }

    pub fn refine() -> Self {
        Self {
            name: "refine".into(),
            tools_enabled: true,
            system_prompt: prompts::refine_system(),
            ..Self::lkp()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    /// 1-based.
    pub index: u32,
    /// The model's full output for the round.
    pub report: String,
    pub tool_calls: Vec<ToolCall>,
    pub observations: Vec<Observation>,
    /// Loop-level messages fed back to the model: refused or rejected calls.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
    pub is_final: bool,
    pub final_answer: Option<String>,
}

impl Round {
    /// Observation block as it appears in the next round's context. Empty
    /// when the round produced no observations or notices.
    pub fn serialized_observations(&self) -> String {
        if self.observations.is_empty() && self.notices.is_empty() {
            return String::new();
        }
        let mut parts: Vec<String> = self.observations.iter().map(Observation::render).collect();
        parts.extend(self.notices.iter().map(|n| format!("[notice] {n}")));
        format!("<observations>\n{}\n</observations>\n", parts.join("\n\n"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTokens {
    pub llm_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(default)]
    pub estimated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema_version: u32,
    pub agent: String,
    pub question: String,
    pub rounds: Vec<Round>,
    pub final_answer: Option<String>,
    pub token_stats: Vec<RoundTokens>,
    pub tool_call_counts: BTreeMap<ToolKind, u64>,
    pub aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

impl Trajectory {
    pub fn total_tokens(&self) -> RoundTokens {
        let mut t = RoundTokens::default();
        for r in &self.token_stats {
            t.llm_calls += r.llm_calls;
            t.input_tokens += r.input_tokens;
            t.output_tokens += r.output_tokens;
            t.estimated |= r.estimated;
        }
        t
    }

    /// Billing view of the trajectory. Search and scholar are counted per
    /// query issued; browser per page token.
    pub fn usage(&self) -> UsageEvent {
        let t = self.total_tokens();
        let mut e = UsageEvent {
            llm_calls: t.llm_calls as i64,
            input_tokens: t.input_tokens as i64,
            output_tokens: t.output_tokens as i64,
            estimated: t.estimated,
            ..UsageEvent::default()
        };
        for round in &self.rounds {
            for (call, obs) in round.tool_calls.iter().zip(&round.observations) {
                match call {
                    ToolCall::Search { query } => e.search_calls += query.len() as i64,
                    ToolCall::Scholar { query } => e.scholar_calls += query.len() as i64,
                    ToolCall::Browser { .. } => e.browser_tokens += obs.tokens_consumed as i64,
                    ToolCall::Code { .. } => e.code_calls += 1,
                }
            }
        }
        e
    }

    pub fn uses_tool(&self, tool: ToolKind) -> bool {
        self.tool_call_counts.get(&tool).copied().unwrap_or(0) > 0
    }
}

/// Which part of a round's prompt a piece of text is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Question,
    PrevReport,
    PrevObservation,
    Report,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
}

pub fn render_question(question: &str) -> String {
    format!("<question>\n{question}\n</question>\n")
}

pub fn render_prev_report(report: &str) -> String {
    format!("<previous_report>\n{report}\n</previous_report>\n")
}

/// Context segments for a round under Markovian conditioning. With no
/// previous round both previous-round segments are empty.
pub fn round_context(question: &str, prev: Option<&Round>) -> Vec<Segment> {
    vec![
        Segment {
            kind: SegmentKind::Question,
            text: render_question(question),
        },
        Segment {
            kind: SegmentKind::PrevReport,
            text: prev.map(|r| render_prev_report(&r.report)).unwrap_or_default(),
        },
        Segment {
            kind: SegmentKind::PrevObservation,
            text: prev.map(Round::serialized_observations).unwrap_or_default(),
        },
    ]
}

/// User message for the next round given the rounds so far.
pub fn round_prompt(question: &str, rounds: &[Round], mode: ContextMode) -> String {
    match mode {
        ContextMode::Markovian => round_context(question, rounds.last())
            .into_iter()
            .map(|s| s.text)
            .collect(),
        ContextMode::FullHistory => {
            let mut s = render_question(question);
            for r in rounds {
                s.push_str(&render_prev_report(&r.report));
                s.push_str(&r.serialized_observations());
            }
            s
        }
    }
}

/// Text after the last final-answer marker, if any.
pub fn parse_final_answer(text: &str) -> Option<String> {
    let lower = text.to_lowercase();
    let marker = FINAL_ANSWER_MARKER.to_lowercase();
    // Lowercasing can shift byte offsets for some scripts; only trust the
    // offset when it still lands on the marker in the original text.
    let pos = lower.rfind(&marker)?;
    let rest = text.get(pos + marker.len()..).filter(|_| {
        text.get(pos..pos + marker.len())
            .is_some_and(|m| m.eq_ignore_ascii_case(FINAL_ANSWER_MARKER))
    })?;
    let answer = rest.trim().trim_matches('*').trim();
    (!answer.is_empty()).then(|| answer.to_string())
}

/// Final answer of a finished trajectory; absent for aborted or capped runs.
pub fn extract_final_answer(traj: &Trajectory) -> Option<String> {
    if traj.aborted {
        return None;
    }
    traj.rounds
        .last()
        .filter(|r| r.is_final)
        .and_then(|r| r.final_answer.clone())
}

#[derive(Debug, Default)]
struct ParsedOutput {
    calls: Vec<ToolCall>,
    rejected: Vec<String>,
    malformed: bool,
    final_answer: Option<String>,
}

fn strip_fence(s: &str) -> &str {
    let s = s.trim();
    let s = s.strip_prefix("```json").or_else(|| s.strip_prefix("```")).unwrap_or(s);
    s.strip_suffix("```").unwrap_or(s).trim()
}

fn parse_output(text: &str) -> ParsedOutput {
    let mut out = ParsedOutput::default();
    let mut rest = text;
    while let Some(start) = rest.find(TOOL_CALL_OPEN) {
        let body_start = start + TOOL_CALL_OPEN.len();
        let Some(len) = rest[body_start..].find(TOOL_CALL_CLOSE) else {
            out.malformed = true;
            break;
        };
        let body = &rest[body_start..body_start + len];
        match serde_json::from_str::<serde_json::Value>(strip_fence(body)) {
            Err(_) => out.malformed = true,
            Ok(v) => match ToolCall::from_json(&v) {
                Ok(call) => out.calls.push(call),
                Err(e) => out.rejected.push(format!("call rejected: {e}")),
            },
        }
        rest = &rest[body_start + len + TOOL_CALL_CLOSE.len()..];
    }
    let tail = text.rfind(TOOL_CALL_CLOSE).map_or(text, |i| &text[i..]);
    out.final_answer = parse_final_answer(tail);
    out
}

fn round_params(base: &SamplingParams, round: u32) -> SamplingParams {
    SamplingParams {
        seed: base.seed.map(|s| s.wrapping_add(u64::from(round))),
        ..base.clone()
    }
}

/// Run one trajectory. Tool calls go to `tools` only when the config has
/// tools enabled; otherwise they are refused in-loop and never counted.
pub fn run_trajectory(
    question: &str,
    cfg: &AgentConfig,
    generator: &dyn Generator,
    tools: &dyn ToolHandle,
) -> Result<Trajectory, AgentError> {
    if question.trim().is_empty() {
        return Err(AgentError::Precondition("question must be non-empty".into()));
    }
    if cfg.max_rounds == 0 {
        return Err(AgentError::Precondition("max_rounds must be positive".into()));
    }
    let mut traj = Trajectory {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        agent: cfg.name.clone(),
        question: question.to_string(),
        rounds: Vec::new(),
        final_answer: None,
        token_stats: Vec::new(),
        tool_call_counts: ToolKind::ALL.iter().map(|k| (*k, 0)).collect(),
        aborted: false,
        abort_reason: None,
    };

    for index in 1..=cfg.max_rounds {
        let user = round_prompt(question, &traj.rounds, cfg.context_mode);
        let mut messages = vec![ChatMessage::system(&cfg.system_prompt), ChatMessage::user(user)];
        let params = round_params(&cfg.sampling, index);
        let mut tokens = RoundTokens::default();

        let mut call = |messages: &[ChatMessage]| {
            let r = generator.generate(messages, &params)?;
            tokens.llm_calls += 1;
            tokens.input_tokens += r.input_tokens;
            tokens.output_tokens += r.output_tokens;
            tokens.estimated |= !r.usage_reported;
            Ok::<_, crate::providers::ProviderError>(r.text)
        };

        let first = match call(&messages) {
            Ok(t) => t,
            Err(e) => {
                traj.aborted = true;
                traj.abort_reason = Some(format!("round {index}: {e}"));
                break;
            }
        };
        let mut report = first;
        let mut parsed = parse_output(&report);
        let mut notices = Vec::new();
        if parsed.malformed {
            messages.push(ChatMessage::assistant(report.clone()));
            messages.push(ChatMessage::user(TOOL_REPROMPT));
            match call(&messages) {
                Ok(t) => {
                    report = t;
                    parsed = parse_output(&report);
                }
                Err(e) => {
                    traj.token_stats.push(tokens);
                    traj.aborted = true;
                    traj.abort_reason = Some(format!("round {index} reprompt: {e}"));
                    break;
                }
            }
            if parsed.malformed {
                notices.push("tool call could not be parsed; no tools were run".to_string());
                parsed.calls.clear();
                parsed.final_answer = None;
            }
        }
        notices.append(&mut parsed.rejected);

        let mut round = Round {
            index,
            report,
            tool_calls: Vec::new(),
            observations: Vec::new(),
            notices,
            is_final: false,
            final_answer: None,
        };
        if !parsed.calls.is_empty() && !cfg.tools_enabled {
            tracing::info!(agent = %cfg.name, requested = parsed.calls.len(), "refusing tool calls");
            round.notices.push(format!(
                "{NO_TOOLS_MESSAGE}; {} requested call(s) were not run",
                parsed.calls.len()
            ));
            parsed.calls.clear();
        }
        if !parsed.calls.is_empty() {
            round.observations = tools.dispatch(&parsed.calls);
            for c in &parsed.calls {
                *traj.tool_call_counts.entry(c.kind()).or_insert(0) += 1;
            }
            round.tool_calls = parsed.calls;
        } else if let Some(answer) = parsed.final_answer {
            round.is_final = true;
            round.final_answer = Some(answer);
        }

        let is_final = round.is_final;
        traj.token_stats.push(tokens);
        traj.rounds.push(round);
        if is_final {
            traj.final_answer = traj.rounds.last().and_then(|r| r.final_answer.clone());
            break;
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::ScriptedGenerator;
    use crate::providers::ProviderError;
    use crate::toolkit::{Payload, RefusalStub};
    use std::sync::Mutex;

    struct EchoTools;
    impl ToolHandle for EchoTools {
        fn dispatch(&self, calls: &[ToolCall]) -> Vec<Observation> {
            calls
                .iter()
                .map(|c| Observation {
                    tool: c.kind(),
                    payload: Payload::Answer {
                        url: "https://fixture.test/".into(),
                        text: format!("echo {}", serde_json::to_string(c).unwrap()),
                        warning: None,
                    },
                    tokens_consumed: 7,
                })
                .collect()
        }
    }

    fn user_text(m: &[ChatMessage]) -> String {
        m.iter().find(|m| m.role == crate::providers::Role::User).unwrap().content.clone()
    }

    #[test]
    fn answers_immediately() {
        let g = ScriptedGenerator::new("a", |_, _| Ok("Easy.\nFinal Answer: Paris".into()));
        let t = run_trajectory("Capital of France?", &AgentConfig::mko(), &g, &EchoTools).unwrap();
        assert_eq!(t.rounds.len(), 1);
        assert!(t.rounds[0].is_final);
        assert_eq!(extract_final_answer(&t).as_deref(), Some("Paris"));
    }

    #[test]
    fn search_then_answer() {
        let g = ScriptedGenerator::new("s", |m, _| {
            Ok(if user_text(m).contains("<observations>") {
                "Found it. Final Answer: 42".into()
            } else {
                "Need data.\n<tool_call>{\"name\": \"search\", \"arguments\": {\"query\": [\"x\"]}}</tool_call>".into()
            })
        });
        let t = run_trajectory("q", &AgentConfig::mko(), &g, &EchoTools).unwrap();
        assert_eq!(t.rounds.len(), 2);
        assert_eq!(t.tool_call_counts[&ToolKind::Search], 1);
        assert_eq!(t.tool_call_counts[&ToolKind::Code], 0);
        assert_eq!(t.final_answer.as_deref(), Some("42"));
        assert_eq!(t.rounds[0].observations.len(), t.rounds[0].tool_calls.len());
    }

    #[test]
    fn round_cap_without_answer() {
        let g = ScriptedGenerator::new("n", |_, _| Ok("thinking".into()));
        let cfg = AgentConfig {
            max_rounds: 3,
            ..AgentConfig::mko()
        };
        let t = run_trajectory("q", &cfg, &g, &EchoTools).unwrap();
        assert_eq!(t.rounds.len(), 3);
        assert!(t.final_answer.is_none());
        assert!(!t.aborted);
    }

    #[test]
    fn provider_failure_aborts_with_rounds_so_far() {
        let g = ScriptedGenerator::new("f", |m, _| {
            if user_text(m).contains("<previous_report>") {
                Err(ProviderError::Malformed("boom".into()))
            } else {
                Ok("first".into())
            }
        });
        let t = run_trajectory("q", &AgentConfig::mko(), &g, &EchoTools).unwrap();
        assert!(t.aborted);
        assert_eq!(t.rounds.len(), 1);
        assert_eq!(extract_final_answer(&t), None);
    }

    #[test]
    fn context_contains_only_previous_round() {
        let seen = std::sync::Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let g = ScriptedGenerator::new("ctx", move |m, p| {
            let mut s = seen2.lock().unwrap();
            s.push(user_text(m));
            let n = s.len();
            let _ = p;
            Ok(format!(
                "report-{n}\n<tool_call>{{\"name\": \"code\", \"arguments\": {{\"script\": \"print({n})\"}}}}</tool_call>"
            ))
        });
        let cfg = AgentConfig {
            max_rounds: 4,
            ..AgentConfig::mko()
        };
        let t = run_trajectory("q", &cfg, &g, &EchoTools).unwrap();
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 4);
        assert!(!seen[0].contains("report-"));
        for j in 1..4 {
            assert!(seen[j].contains(&format!("report-{j}")));
            assert!(seen[j].contains(&format!("print({j})")));
            for older in 1..j {
                assert!(!seen[j].contains(&format!("report-{older}\n")), "round {} saw report-{older}", j + 1);
            }
            assert_eq!(seen[j], round_prompt("q", &t.rounds[..j], ContextMode::Markovian));
        }
    }

    #[test]
    fn full_history_mode_sees_everything() {
        let seen = std::sync::Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let g = ScriptedGenerator::new("hist", move |m, _| {
            let mut s = seen2.lock().unwrap();
            s.push(user_text(m));
            Ok(format!("report-{}", s.len()))
        });
        let cfg = AgentConfig {
            max_rounds: 3,
            context_mode: ContextMode::FullHistory,
            ..AgentConfig::mko()
        };
        run_trajectory("q", &cfg, &g, &EchoTools).unwrap();
        let seen = seen.lock().unwrap();
        assert!(seen[2].contains("report-1") && seen[2].contains("report-2"));
    }

    #[test]
    fn tools_disabled_refuses_and_counts_nothing() {
        let g = ScriptedGenerator::new("greedy", |m, _| {
            Ok(if user_text(m).contains(NO_TOOLS_MESSAGE) {
                "ok then. Final Answer: 7".into()
            } else {
                "<tool_call>{\"name\": \"search\", \"arguments\": {\"query\": \"x\"}}</tool_call>".into()
            })
        });
        let t = run_trajectory("q", &AgentConfig::lkp(), &g, &RefusalStub).unwrap();
        assert!(t.tool_call_counts.values().all(|c| *c == 0));
        assert!(t.rounds[0].tool_calls.is_empty());
        assert!(t.rounds[0].serialized_observations().contains(NO_TOOLS_MESSAGE));
        assert_eq!(t.final_answer.as_deref(), Some("7"));
    }

    #[test]
    fn malformed_json_reprompts_once_then_noop() {
        let calls = std::sync::Arc::new(Mutex::new(0));
        let c2 = calls.clone();
        let g = ScriptedGenerator::new("bad", move |m, _| {
            *c2.lock().unwrap() += 1;
            if m.len() > 2 {
                Ok("<tool_call>{still bad</tool_call>".into())
            } else {
                Ok("<tool_call>{bad json</tool_call>".into())
            }
        });
        let cfg = AgentConfig {
            max_rounds: 1,
            ..AgentConfig::mko()
        };
        let t = run_trajectory("q", &cfg, &g, &EchoTools).unwrap();
        assert_eq!(*calls.lock().unwrap(), 2);
        assert_eq!(t.token_stats[0].llm_calls, 2);
        assert!(t.rounds[0].tool_calls.is_empty());
        assert!(!t.rounds[0].is_final);
        assert_eq!(t.rounds[0].notices.len(), 1);
    }

    #[test]
    fn reprompt_can_recover() {
        let g = ScriptedGenerator::new("fix", |m, _| {
            Ok(if m.len() > 2 {
                "<tool_call>{\"name\": \"search\", \"arguments\": {\"query\": [\"x\"]}}</tool_call>".into()
            } else {
                "<tool_call>{oops</tool_call>".into()
            })
        });
        let cfg = AgentConfig {
            max_rounds: 1,
            ..AgentConfig::mko()
        };
        let t = run_trajectory("q", &cfg, &g, &EchoTools).unwrap();
        assert_eq!(t.rounds[0].tool_calls.len(), 1);
    }

    #[test]
    fn schema_invalid_call_rejected_alone() {
        let g = ScriptedGenerator::new("mixed", |_, _| {
            Ok("<tool_call>{\"name\": \"teleport\", \"arguments\": {}}</tool_call>\n\
                <tool_call>{\"name\": \"search\", \"arguments\": {\"query\": [\"x\"]}}</tool_call>"
                .into())
        });
        let cfg = AgentConfig {
            max_rounds: 1,
            ..AgentConfig::mko()
        };
        let t = run_trajectory("q", &cfg, &g, &EchoTools).unwrap();
        assert_eq!(t.rounds[0].tool_calls.len(), 1);
        assert_eq!(t.rounds[0].notices.len(), 1);
    }

    #[test]
    fn final_answer_parsing() {
        assert_eq!(parse_final_answer("blah final answer: 42").as_deref(), Some("42"));
        assert_eq!(
            parse_final_answer("Final Answer: 1\nwait\nFinal Answer: 2").as_deref(),
            Some("2")
        );
        assert_eq!(parse_final_answer("no marker"), None);
        assert_eq!(parse_final_answer("Final Answer:   "), None);
        assert_eq!(parse_final_answer("**Final Answer:** 9").as_deref(), Some("9"));
    }

    #[test]
    fn token_stats_are_additive() {
        let g = ScriptedGenerator::new("t", |m, _| {
            Ok(if user_text(m).contains("<previous_report>") {
                "Final Answer: x".into()
            } else {
                "<tool_call>{\"name\": \"search\", \"arguments\": {\"query\": [\"a\", \"b\"]}}</tool_call>".into()
            })
        });
        let t = run_trajectory("q", &AgentConfig::mko(), &g, &EchoTools).unwrap();
        let total = t.total_tokens();
        assert_eq!(total.input_tokens, t.token_stats.iter().map(|r| r.input_tokens).sum::<u64>());
        assert_eq!(t.usage().search_calls, 2);
        assert_eq!(t.usage().llm_calls, 2);
    }

    #[test]
    fn empty_question_rejected() {
        let g = ScriptedGenerator::new("x", |_, _| Ok("Final Answer: 1".into()));
        assert!(run_trajectory(" ", &AgentConfig::lkp(), &g, &RefusalStub).is_err());
    }
}
