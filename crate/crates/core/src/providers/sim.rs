//! A small simulated model world for offline end-to-end runs.
//!
//! One generator plays every role. It reads the system prompt to decide
//! which role it is in and answers with deterministic, plausible output:
//! the chunker strips markup, the seed writer builds a question from its
//! passages, the refiner searches and then appends a constraint, and the
//! solvers are right or wrong according to hash-based rules keyed on the
//! question and the sampling seed. Gold answers are a function of the
//! question text, so a solver that "knows" the answer can recompute it.

use regex::Regex;
use serde_json::{json, Value};

use super::mock::{mock_usage, overlap_coefficient, MockGenerator};
use super::{render_judge_reply, ChatMessage, GenerationResult, Generator, JudgeVerdict, ProviderError, Role, SamplingParams};
use crate::agent_loop::parse_final_answer;
use crate::corpus::split_paragraphs;
use crate::prompts::{PromptKind, CHUNK_SEPARATOR, NO_TOOL_PROTOCOL, TOOL_CALL_CLOSE, TOOL_CALL_OPEN};
use crate::text::{extract_json_object, hash_parts, normalize_answer, sha256_hex};

pub const REFINEMENT_MARK: &str = "(Refinement ";

const TOPICS: [&str; 12] = [
    "the archival record",
    "the second measurement",
    "the earliest publication",
    "the cited sample size",
    "the reported unit",
    "the follow-up study",
    "the named institution",
    "the recorded year",
    "the quoted ratio",
    "the original author",
    "the revised estimate",
    "the regional variant",
];

const DIMENSIONS: [&str; 4] = [
    "knowledge_expansion",
    "conceptual_abstraction",
    "factual_grounding",
    "computational_formulation",
];

/// Gold answer for a simulated question.
pub fn gold_answer(question: &str) -> String {
    format!("ans-{}", &sha256_hex(normalize_answer(question))[..8])
}

/// Number of refinement steps applied to a simulated question.
pub fn depth(question: &str) -> usize {
    question.matches(REFINEMENT_MARK).count()
}

fn base(question: &str) -> &str {
    question.split(REFINEMENT_MARK).next().unwrap_or(question).trim()
}

/// Depth at which the tool-less solver stops knowing the answer.
pub fn lkp_cap(question: &str) -> usize {
    1 + (hash_parts(["cap", base(question)]) % 4) as usize
}

/// Seeds whose questions are flawed: no solver ever gets them right.
pub fn is_flawed(question: &str) -> bool {
    hash_parts(["flaw", base(question)]) % 6 == 0
}

pub fn lkp_correct(question: &str, seed: u64) -> bool {
    let d = depth(question);
    let cap = lkp_cap(question);
    let s = seed.to_string();
    d < cap || (d == cap && hash_parts(["lucky", base(question), &s]) % 5 == 0)
}

pub fn mko_correct(question: &str, seed: u64) -> bool {
    let s = seed.to_string();
    !is_flawed(question) && hash_parts(["mko", question, &s]) % 3 != 0
}

fn wrong_answer(question: &str, seed: u64) -> String {
    let s = seed.to_string();
    format!("ans-{:08x}", hash_parts(["wrong", question, &s]) as u32)
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(&text[start..start + len])
}

fn tool_call(name: &str, arguments: Value) -> String {
    format!("{TOOL_CALL_OPEN}{}{TOOL_CALL_CLOSE}", json!({"name": name, "arguments": arguments}))
}

fn lead_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// Round number of the reply being written, read back from the previous
/// report's "Round N:" prefix.
fn round_number(user: &str) -> u32 {
    between(user, "<previous_report>\n", "\n</previous_report>")
        .and_then(|r| r.strip_prefix("Round "))
        .and_then(|r| r.split(':').next())
        .and_then(|n| n.parse::<u32>().ok())
        .map_or(1, |n| n + 1)
}

/// Deterministic role-playing generator.
#[derive(Debug, Clone, Default)]
pub struct SimWorld {
    pub seed: u64,
}

impl SimWorld {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn chunk(&self, body: &str) -> String {
        let tags = Regex::new(r"<[^>]*>").expect("static regex");
        let clean = tags.replace_all(body, " ");
        let clean: String = clean
            .lines()
            .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n");
        split_paragraphs(&clean).join(&format!("\n{CHUNK_SEPARATOR}\n"))
    }

    fn seed_qa(&self, user: &str) -> String {
        let passages: Vec<&str> = user
            .split("Passage ")
            .skip(1)
            .map(|p| p.split_once(":\n").map_or(p, |(_, body)| body).trim())
            .collect();
        let leads: Vec<String> = passages.iter().map(|p| lead_words(p, 6)).collect();
        let question = format!(
            "Which single detail connects the accounts beginning \"{}\"?",
            leads.join("\", \"")
        );
        json!({"question": question, "answer": gold_answer(&question)}).to_string()
    }

    fn refine(&self, user: &str, seed: u64) -> String {
        let round = round_number(user);
        let Some(block) = between(user, "<question>\n", "\n</question>") else {
            return "Round 1: no input found.\nFinal Answer: none".into();
        };
        let Some(qa) = extract_json_object(block) else {
            return format!("Round {round}: input is not a QA object.\nFinal Answer: none");
        };
        let question = qa.get("question").and_then(Value::as_str).unwrap_or_default();
        if round == 1 {
            let topic = lead_words(base(question), 8);
            return format!(
                "Round 1: gathering background before escalating.\n{}\n{}",
                tool_call("search", json!({"query": [topic.clone()]})),
                tool_call("scholar", json!({"query": [topic]}))
            );
        }
        let d = depth(question) + 1;
        let h = hash_parts(["refine", question, &seed.to_string()]);
        let topic = TOPICS[(h % TOPICS.len() as u64) as usize];
        let next = format!(
            "{question} {REFINEMENT_MARK}{d}: account for {topic} reported {} years later.)",
            1 + (h >> 8) % 40
        );
        let mut dims = vec![DIMENSIONS[((h >> 16) % 3) as usize]];
        if (h >> 24) % 2 == 0 {
            dims.push(DIMENSIONS[3]);
        }
        let out = json!({"question": next, "answer": gold_answer(&next), "dimensions": dims});
        format!("Round {round}: combined the retrieved sources into a harder pair.\nFinal Answer: {out}")
    }

    fn solve(&self, system: &str, user: &str, seed: u64) -> String {
        let round = round_number(user);
        let question = between(user, "<question>\n", "\n</question>").unwrap_or_default();
        let tools = !system.contains(NO_TOOL_PROTOCOL);
        if !tools {
            let answer = if lkp_correct(question, seed) {
                gold_answer(question)
            } else {
                wrong_answer(question, seed)
            };
            return format!("Round {round}: answering from memory.\nFinal Answer: {answer}");
        }
        let h = hash_parts(["browse", question, &seed.to_string()]);
        match round {
            1 => format!(
                "Round 1: searching for the key entities.\n{}",
                tool_call("search", json!({"query": [lead_words(base(question), 8)]}))
            ),
            2 if h % 2 == 0 => format!(
                "Round 2: reading the most relevant result.\n{}",
                tool_call(
                    "browser",
                    json!({"url": format!("https://example.org/sim/{h:016x}"), "goal": "find the year and the reported value"})
                )
            ),
            _ => {
                let answer = if mko_correct(question, seed) {
                    gold_answer(question)
                } else {
                    wrong_answer(question, seed)
                };
                format!("Round {round}: the evidence is consistent.\nFinal Answer: {answer}")
            }
        }
    }

    fn browse(&self, user: &str) -> String {
        let goal = between(user, "Goal: ", "\n\n").unwrap_or_default();
        let content = user.split_once("):\n").map_or("", |(_, c)| c);
        let mut sentences: Vec<(usize, f64, &str)> = content
            .split_inclusive(['.', '\n'])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .enumerate()
            .map(|(i, s)| (i, overlap_coefficient(goal, s), s))
            .collect();
        sentences.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut best: Vec<_> = sentences.into_iter().take(2).collect();
        best.sort_by_key(|s| s.0);
        best.iter().map(|s| s.2).collect::<Vec<_>>().join(" ")
    }

    fn judge(&self, user: &str) -> String {
        let response = between(user, "[response]: ", "\n\nYour judgement").unwrap_or_default();
        let gold = between(user, "[correct_answer]: ", "\n\nreasoning:").unwrap_or_default();
        let extracted = parse_final_answer(response).unwrap_or_else(|| response.trim().to_string());
        let correct = normalize_answer(&extracted) == normalize_answer(gold);
        render_judge_reply(&JudgeVerdict {
            extracted_final_answer: (!extracted.is_empty()).then_some(extracted),
            reasoning: if correct { "matches".into() } else { "does not match".into() },
            correct,
            confidence: 100,
        })
    }
}

impl Generator for SimWorld {
    fn complete(&self, messages: &[ChatMessage], params: &SamplingParams) -> Result<GenerationResult, ProviderError> {
        let system = messages
            .iter()
            .find(|m| m.role == Role::System)
            .map_or("", |m| m.content.as_str());
        let user = messages
            .iter()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str());
        let seed = hash_parts([self.seed.to_string(), format!("{:?}", params.seed)]);
        // The judge template arrives as a lone user message.
        let text = match PromptKind::detect(system).or_else(|| PromptKind::detect(user)) {
            Some(PromptKind::Chunker) => self.chunk(user),
            Some(PromptKind::Seed) => self.seed_qa(user),
            Some(PromptKind::Refine) => self.refine(user, seed),
            Some(PromptKind::Solver) => self.solve(system, user, params.seed.unwrap_or(0)),
            Some(PromptKind::Browser) => self.browse(user),
            Some(PromptKind::Judge) => self.judge(user),
            None => {
                return MockGenerator { seed: self.seed }.complete(messages, params);
            }
        };
        Ok(mock_usage(messages, text))
    }

    fn identity(&self) -> String {
        format!("sim-world(seed={})", self.seed)
    }
}
