//! Exam construction, judge scoring, pass@N curves and per-tool accuracy.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent_loop::{AgentConfig, AgentError, Trajectory};
use crate::engine::{probe, ProbeOutcome, ProbeRecord, QaPair};
use crate::providers::{Generator, Judge, RetryPolicy};
use crate::text::hash_parts;
use crate::toolkit::{RefusalStub, ToolHandle, ToolKind};

pub const EXAM_ATTEMPTS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// How many of the aided attempts must succeed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyRule {
    #[default]
    AllThree,
    AtLeastOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExamDecision {
    Include,
    Exclude,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamCandidate {
    pub qa: QaPair,
    pub unaided_results: Vec<bool>,
    pub aided_results: Vec<bool>,
    pub decision: ExamDecision,
    pub unaided_attempts: Vec<ProbeRecord>,
    pub aided_attempts: Vec<ProbeRecord>,
}

fn as_bool(o: ProbeOutcome) -> Option<bool> {
    match o {
        ProbeOutcome::Correct => Some(true),
        ProbeOutcome::Incorrect => Some(false),
        ProbeOutcome::Indeterminate => None,
    }
}

/// Decision from graded attempts; `None` is an undecided judge verdict.
/// Aided results are only consulted once no unaided attempt succeeded.
pub fn exam_decision(unaided: &[Option<bool>], aided: &[Option<bool>], rule: ConsistencyRule) -> ExamDecision {
    if unaided.contains(&Some(true)) {
        return ExamDecision::Exclude;
    }
    let aided_fails = match rule {
        ConsistencyRule::AllThree => aided.contains(&Some(false)),
        ConsistencyRule::AtLeastOne => aided.len() == EXAM_ATTEMPTS && aided.iter().all(|a| *a == Some(false)),
    };
    if aided_fails {
        return ExamDecision::Exclude;
    }
    if unaided.len() < EXAM_ATTEMPTS || aided.len() < EXAM_ATTEMPTS {
        return ExamDecision::Pending;
    }
    let aided_ok = match rule {
        ConsistencyRule::AllThree => aided.iter().all(|a| *a == Some(true)),
        ConsistencyRule::AtLeastOne => aided.contains(&Some(true)),
    };
    if unaided.iter().all(|u| *u == Some(false)) && aided_ok {
        ExamDecision::Include
    } else {
        ExamDecision::Pending
    }
}

/// Everything an exam attempt needs besides the two agent configs.
pub struct ExamRunner<'a> {
    pub generator: &'a dyn Generator,
    pub tools: &'a dyn ToolHandle,
    pub judge: &'a dyn Judge,
    pub judge_retry: RetryPolicy,
    pub rule: ConsistencyRule,
    pub seed: u64,
}

impl ExamRunner<'_> {
    fn attempt_cfg(&self, cfg: &AgentConfig, qa: &QaPair, arm: &str, i: usize) -> AgentConfig {
        let seed = hash_parts([self.seed.to_string(), "exam".into(), qa.qa_id.clone(), arm.into(), i.to_string()]);
        AgentConfig {
            sampling: cfg.sampling.with_seed(seed),
            ..cfg.clone()
        }
    }

    /// Up to three unaided attempts, stopping at the first success, then
    /// three aided attempts in parallel if none succeeded.
    pub fn exam_filter(&self, qa: &QaPair, untooled: &AgentConfig, tooled: &AgentConfig) -> Result<ExamCandidate, EvalError> {
        if untooled.tools_enabled || !tooled.tools_enabled {
            return Err(EvalError::Precondition("expected one tool-less and one tool-enabled config".into()));
        }
        if untooled.name != tooled.name
            || untooled.max_rounds != tooled.max_rounds
            || untooled.sampling != tooled.sampling
            || untooled.context_mode != tooled.context_mode
        {
            return Err(EvalError::Precondition(
                "configs must describe the same model and differ only in tool access".into(),
            ));
        }
        let mut unaided_attempts = Vec::new();
        for i in 0..EXAM_ATTEMPTS {
            let cfg = self.attempt_cfg(untooled, qa, "unaided", i);
            let p = probe(qa, &cfg, self.generator, &RefusalStub, self.judge, &self.judge_retry)?;
            let solved = p.solved();
            unaided_attempts.push(p);
            if solved {
                break;
            }
        }
        let unaided: Vec<Option<bool>> = unaided_attempts.iter().map(|p| as_bool(p.outcome)).collect();
        let aided_attempts = if unaided.contains(&Some(true)) {
            Vec::new()
        } else {
            (0..EXAM_ATTEMPTS)
                .into_par_iter()
                .map(|i| {
                    let cfg = self.attempt_cfg(tooled, qa, "aided", i);
                    probe(qa, &cfg, self.generator, self.tools, self.judge, &self.judge_retry)
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        let aided: Vec<Option<bool>> = aided_attempts.iter().map(|p| as_bool(p.outcome)).collect();
        Ok(ExamCandidate {
            qa: qa.clone(),
            unaided_results: unaided.iter().map(|u| *u == Some(true)).collect(),
            aided_results: aided.iter().map(|a| *a == Some(true)).collect(),
            decision: exam_decision(&unaided, &aided, self.rule),
            unaided_attempts,
            aided_attempts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub accuracy: f64,
    /// Questions in the denominator.
    pub scored: usize,
    pub correct: usize,
    pub indeterminate: usize,
    pub verdicts: BTreeMap<String, Verdict>,
}

/// Judge every response against its gold answer. Undecided verdicts count
/// as incorrect unless `exclude_indeterminate` drops them from the
/// denominator.
pub fn score_run(
    answers: &BTreeMap<String, String>,
    gold: &BTreeMap<String, String>,
    judge: &dyn Judge,
    exclude_indeterminate: bool,
) -> Result<ScoreReport, EvalError> {
    if !answers.keys().eq(gold.keys()) {
        return Err(EvalError::Precondition("answer and gold question sets differ".into()));
    }
    if answers.is_empty() {
        return Err(EvalError::Precondition("nothing to score".into()));
    }
    let verdicts: BTreeMap<String, Verdict> = answers
        .par_iter()
        .map(|(q, resp)| {
            let v = match judge.judge_correct(q, resp, &gold[q]) {
                Ok(v) if v.correct => Verdict::Correct,
                Ok(_) => Verdict::Incorrect,
                Err(e) => {
                    tracing::warn!(question = %q, error = %e, "judge failed");
                    Verdict::Indeterminate
                }
            };
            (q.clone(), v)
        })
        .collect();
    let correct = verdicts.values().filter(|v| **v == Verdict::Correct).count();
    let indeterminate = verdicts.values().filter(|v| **v == Verdict::Indeterminate).count();
    let scored = if exclude_indeterminate { verdicts.len() - indeterminate } else { verdicts.len() };
    Ok(ScoreReport {
        accuracy: if scored == 0 { 0.0 } else { correct as f64 / scored as f64 },
        scored,
        correct,
        indeterminate,
        verdicts,
    })
}

/// Correctness of N attempts per question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptMatrix {
    rows: Vec<String>,
    cells: Vec<Vec<bool>>,
}

impl AttemptMatrix {
    pub fn new(rows: Vec<String>, cells: Vec<Vec<bool>>) -> Result<Self, EvalError> {
        if rows.len() != cells.len() || rows.is_empty() {
            return Err(EvalError::Precondition(format!(
                "{} row ids for {} rows",
                rows.len(),
                cells.len()
            )));
        }
        let n = cells[0].len();
        if n == 0 || cells.iter().any(|r| r.len() != n) {
            return Err(EvalError::Precondition("matrix must be rectangular with at least one attempt".into()));
        }
        Ok(Self { rows, cells })
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cells(&self) -> &[Vec<bool>] {
        &self.cells
    }

    pub fn attempts(&self) -> usize {
        self.cells[0].len()
    }
}

/// `(n, fraction of rows with a success among the first n attempts)` for
/// n = 1..=N.
pub fn pass_at_n(m: &AttemptMatrix) -> Vec<(usize, f64)> {
    let total = m.cells.len() as f64;
    // First successful attempt per row, if any.
    let first: Vec<Option<usize>> = m.cells.iter().map(|r| r.iter().position(|c| *c)).collect();
    (1..=m.attempts())
        .map(|n| {
            let hits = first.iter().filter(|f| f.is_some_and(|i| i < n)).count();
            (n, hits as f64 / total)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRow {
    pub tasks: usize,
    pub correct: usize,
    pub calls: u64,
    pub usage_per_round: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolAccuracyTable {
    pub tasks: usize,
    pub overall_accuracy: f64,
    /// Tools nobody used have no row.
    pub tools: BTreeMap<ToolKind, ToolRow>,
}

/// Accuracy restricted to tasks that used each tool. Denominators count
/// tasks, not calls.
pub fn conditional_tool_accuracy(items: &[(Trajectory, bool)]) -> Result<ToolAccuracyTable, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Precondition("no trajectories".into()));
    }
    let rounds: usize = items.iter().map(|(t, _)| t.rounds.len()).sum();
    let mut tools = BTreeMap::new();
    for kind in ToolKind::ALL {
        let users: Vec<&(Trajectory, bool)> = items.iter().filter(|(t, _)| t.uses_tool(kind)).collect();
        if users.is_empty() {
            continue;
        }
        let calls: u64 = items.iter().map(|(t, _)| t.tool_call_counts.get(&kind).copied().unwrap_or(0)).sum();
        let correct = users.iter().filter(|(_, ok)| *ok).count();
        tools.insert(
            kind,
            ToolRow {
                tasks: users.len(),
                correct,
                calls,
                usage_per_round: if rounds == 0 { 0.0 } else { calls as f64 / rounds as f64 },
                accuracy: correct as f64 / users.len() as f64,
            },
        );
    }
    let correct = items.iter().filter(|(_, ok)| *ok).count();
    Ok(ToolAccuracyTable {
        tasks: items.len(),
        overall_accuracy: correct as f64 / items.len() as f64,
        tools,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMetrics {
    pub questions: usize,
    pub attempts: usize,
    /// First-attempt accuracy.
    pub accuracy: f64,
    pub pass_at_n: Vec<(usize, f64)>,
    pub tool_accuracy: ToolAccuracyTable,
    pub indeterminate: usize,
}

/// Run `attempts` independent trajectories per question and aggregate.
/// Undecided judge verdicts count as incorrect.
pub fn evaluate_benchmark(
    items: &[QaPair],
    cfg: &AgentConfig,
    runner: &ExamRunner<'_>,
    attempts: usize,
) -> Result<BenchmarkMetrics, EvalError> {
    if items.is_empty() || attempts == 0 {
        return Err(EvalError::Precondition("need at least one question and one attempt".into()));
    }
    let tools: &dyn ToolHandle = if cfg.tools_enabled { runner.tools } else { &RefusalStub };
    let probes: Vec<Vec<ProbeRecord>> = items
        .par_iter()
        .map(|qa| {
            (0..attempts)
                .map(|i| {
                    let c = runner.attempt_cfg(cfg, qa, "eval", i);
                    probe(qa, &c, runner.generator, tools, runner.judge, &runner.judge_retry)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let matrix = AttemptMatrix::new(
        items.iter().map(|q| q.qa_id.clone()).collect(),
        probes.iter().map(|row| row.iter().map(ProbeRecord::solved).collect()).collect(),
    )?;
    let curve = pass_at_n(&matrix);
    let first: Vec<(Trajectory, bool)> = probes.iter().map(|row| (row[0].trajectory.clone(), row[0].solved())).collect();
    Ok(BenchmarkMetrics {
        questions: items.len(),
        attempts,
        accuracy: curve[0].1,
        pass_at_n: curve,
        tool_accuracy: conditional_tool_accuracy(&first)?,
        indeterminate: probes.iter().flatten().filter(|p| p.outcome == ProbeOutcome::Indeterminate).count(),
    })
}
