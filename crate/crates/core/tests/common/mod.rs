//! Scripted world for routing tests. Every seed belongs to a numbered case
//! whose behaviour is fixed by a table, so each candidate's path through
//! the engine can be enumerated by hand.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use zpdforge::corpus::RawDocument;
use zpdforge::engine::{Engine, EngineConfig, Models, PartitionLabel};
use zpdforge::providers::mock::{MockReranker, ScriptedGenerator, ScriptedJudge};
use zpdforge::providers::{ChatMessage, Embedder, ProviderError, RetryPolicy, Role};
use zpdforge::text::extract_json_object;
use zpdforge::toolkit::RefusalStub;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    /// Tool-less peer solves every version; stops at the cap and is
    /// solved again at verification.
    AlwaysEasy,
    /// Peer fails from `fail_at` escalations on; the verifier first
    /// succeeds on attempt `mko_hit` (1-based), or never when 0.
    Frontier { fail_at: u32, mko_hit: u32 },
    /// Same question stem as case `of`, with the same behaviour.
    DuplicateOf { of: usize },
    /// Verifier answers, but the judge can never decide.
    Undecidable { fail_at: u32 },
    /// Refiner never produces parseable output.
    BrokenRefiner,
}

pub const STEP: &str = " (step)";

fn stem(case: usize) -> String {
    (0..8).map(|i| format!("k{case}w{i}")).collect::<Vec<_>>().join(" ")
}

/// Resolve duplicates to the case whose stem and behaviour they copy.
fn root(cases: &[Case], g: usize) -> usize {
    match cases[g] {
        Case::DuplicateOf { of } => root(cases, of),
        _ => g,
    }
}

pub fn question_of(m: &[ChatMessage]) -> String {
    let u = m.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.clone()).unwrap_or_default();
    let start = u.find("<question>\n").map(|i| i + 11).unwrap_or(0);
    let end = u.find("\n</question>").unwrap_or(u.len());
    u[start..end].to_string()
}

/// Case number from "Case N:" at the start of a question.
pub fn case_of(question: &str) -> usize {
    let rest = question.trim_start_matches("Case ");
    rest[..rest.find(':').expect("case prefix")].parse().expect("case number")
}

pub fn depth(question: &str) -> u32 {
    question.matches(STEP).count() as u32
}

pub fn gold(g: usize) -> String {
    format!("gold{g}")
}

/// One-hot embedding on the `group-N` marker, so each case's three
/// documents form exactly one composite unit.
pub struct GroupEmbedder {
    pub dim: usize,
}

impl Embedder for GroupEmbedder {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        texts
            .iter()
            .map(|t| {
                let g = marker(t).ok_or_else(|| ProviderError::Malformed("no group marker".into()))?;
                let mut v = vec![0.0; self.dim];
                v[g] = 1.0;
                Ok(v)
            })
            .collect()
    }

    fn identity(&self) -> String {
        format!("group-embedder({})", self.dim)
    }
}

fn marker(t: &str) -> Option<usize> {
    let i = t.find("group-")? + 6;
    let digits: String = t[i..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

pub fn documents(cases: &[Case]) -> Vec<RawDocument> {
    (0..cases.len())
        .flat_map(|g| {
            (0..3).map(move |i| RawDocument {
                doc_id: format!("g{g:03}-d{i}"),
                source_uri: format!("https://example.org/{g}/{i}"),
                body: format!("Passage {i} about group-{g} and its history."),
                published_date: None,
            })
        })
        .collect()
}

pub fn models(cases: &[Case]) -> Models {
    let cases: Arc<Vec<Case>> = Arc::new(cases.to_vec());

    let seed_writer = ScriptedGenerator::new("seed-writer", {
        let cases = cases.clone();
        move |m, _| {
            let u = &m.last().unwrap().content;
            let g = marker(u).unwrap();
            let q = format!("Case {g}: {}?", stem(root(&cases, g)));
            Ok(serde_json::json!({"question": q, "answer": gold(g)}).to_string())
        }
    });

    let refiner = ScriptedGenerator::new("refiner", {
        let cases = cases.clone();
        move |m, _| {
            let v = extract_json_object(&question_of(m)).unwrap();
            let q = v["question"].as_str().unwrap();
            let g = case_of(q);
            if cases[root(&cases, g)] == Case::BrokenRefiner {
                return Ok("Final Answer: I could not rewrite it".into());
            }
            let child = serde_json::json!({
                "question": format!("{q}{STEP}"),
                "answer": v["answer"],
                "dimensions": ["knowledge_expansion"],
            });
            Ok(format!("Rewritten.\nFinal Answer: {child}"))
        }
    });

    let lkp = ScriptedGenerator::new("lkp", {
        let cases = cases.clone();
        move |m, _| {
            let q = question_of(m);
            let g = case_of(&q);
            let solves = match cases[root(&cases, g)] {
                Case::AlwaysEasy => true,
                Case::Frontier { fail_at, .. } | Case::Undecidable { fail_at } => depth(&q) < fail_at,
                Case::BrokenRefiner => true,
                Case::DuplicateOf { .. } => unreachable!(),
            };
            Ok(format!("Final Answer: {}", if solves { gold(g) } else { "unsure".into() }))
        }
    });

    // Attempt counter per question; attempts for one candidate are sequential.
    let attempts: Arc<Mutex<HashMap<String, u32>>> = Arc::default();
    let mko = ScriptedGenerator::new("mko", {
        let cases = cases.clone();
        move |m, _| {
            let q = question_of(m);
            let g = case_of(&q);
            let n = {
                let mut a = attempts.lock().unwrap();
                let e = a.entry(q.clone()).or_insert(0);
                *e += 1;
                *e
            };
            let answer = match cases[root(&cases, g)] {
                Case::Frontier { mko_hit, .. } if mko_hit == n => gold(g),
                Case::Undecidable { .. } => "undecidable".into(),
                _ => "wrong".into(),
            };
            Ok(format!("Final Answer: {answer}"))
        }
    });

    let judge = ScriptedJudge::new(|_, resp, gold| {
        if resp == "undecidable" {
            Err(ProviderError::JudgeParse {
                message: "missing 'correct:' field".into(),
                raw: String::new(),
            })
        } else {
            Ok(ScriptedJudge::verdict(resp == gold))
        }
    });

    Models {
        generator: Arc::new(seed_writer),
        refiner: Arc::new(refiner),
        lkp: Arc::new(lkp),
        mko: Arc::new(mko),
        embedder: Arc::new(GroupEmbedder { dim: cases.len() }),
        judge: Arc::new(judge),
        reranker: Arc::new(MockReranker),
        tools: Arc::new(RefusalStub),
        chunk_with_llm: false,
    }
}

pub fn engine(cases: &[Case]) -> Engine {
    Engine::new(EngineConfig::default(), models(cases))
        .unwrap()
        .with_retry(RetryPolicy {
            max_retries: 2,
            base_delay_ms: 0,
            factor: 1.0,
        })
}

/// Label per case, worked out from the table by hand:
/// always-easy pairs reach the cap and are solved again; frontier pairs
/// with a hit are admitted unless an earlier case has the same stem;
/// frontier pairs without a hit go to human review; undecidable judges
/// and broken refiners are quarantined.
pub fn routing_table_30() -> Vec<(Case, PartitionLabel)> {
    use Case::*;
    use PartitionLabel::*;
    vec![
        (AlwaysEasy, Pretrain),
        (Frontier { fail_at: 0, mko_hit: 1 }, Zpd),
        (Frontier { fail_at: 1, mko_hit: 2 }, Zpd),
        (Frontier { fail_at: 3, mko_hit: 3 }, Zpd),
        (Frontier { fail_at: 2, mko_hit: 0 }, Human),
        (Undecidable { fail_at: 1 }, Quarantine),
        (BrokenRefiner, Quarantine),
        (DuplicateOf { of: 1 }, RejectedDuplicate),
        (AlwaysEasy, Pretrain),
        (Frontier { fail_at: 5, mko_hit: 1 }, Zpd),
        (Frontier { fail_at: 0, mko_hit: 0 }, Human),
        (DuplicateOf { of: 3 }, RejectedDuplicate),
        (Frontier { fail_at: 4, mko_hit: 2 }, Zpd),
        (AlwaysEasy, Pretrain),
        (Undecidable { fail_at: 0 }, Quarantine),
        (Frontier { fail_at: 1, mko_hit: 0 }, Human),
        (Frontier { fail_at: 2, mko_hit: 1 }, Zpd),
        (DuplicateOf { of: 9 }, RejectedDuplicate),
        (Frontier { fail_at: 7, mko_hit: 3 }, Zpd),
        (BrokenRefiner, Quarantine),
        (AlwaysEasy, Pretrain),
        (Frontier { fail_at: 1, mko_hit: 1 }, Zpd),
        (Frontier { fail_at: 3, mko_hit: 0 }, Human),
        (DuplicateOf { of: 16 }, RejectedDuplicate),
        (Frontier { fail_at: 2, mko_hit: 2 }, Zpd),
        (Undecidable { fail_at: 2 }, Quarantine),
        (AlwaysEasy, Pretrain),
        (Frontier { fail_at: 6, mko_hit: 0 }, Human),
        (DuplicateOf { of: 4 }, Human),
        (Frontier { fail_at: 0, mko_hit: 3 }, Zpd),
    ]
}
