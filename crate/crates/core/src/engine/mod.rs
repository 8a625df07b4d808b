//! Seed generation, escalation to the peer's frontier, calibration and
//! deduplicated admission.
//!
//! The per-candidate operations live here; [`pipeline`] strings them into
//! a resumable run over a corpus.

pub mod pipeline;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent_loop::{extract_final_answer, run_trajectory, AgentConfig, AgentError, Trajectory};
use crate::corpus::{CompositeUnit, CorpusError, IndexConfig};
use crate::cost_ledger::UsageEvent;
use crate::prompts::{fill, REFINE_REPROMPT, SEED_SYSTEM, SEED_USER};
use crate::providers::mock::{MockEmbedder, MockJudge, MockReranker};
use crate::providers::sim::SimWorld;
use crate::providers::{
    ChatMessage, Embedder, Generator, Judge, JudgeVerdict, ProviderError, Reranker, RetryPolicy, SamplingParams,
};
use crate::text::{extract_json_object, hash_parts};
use crate::toolkit::{RefusalStub, ToolHandle, Toolkit};

pub use pipeline::{run_pipeline, Pipeline, PipelineReport, RunLayout, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("composite unit references missing chunk {0}")]
    MissingChunk(String),
    #[error("generation failed: {0}")]
    Generation(#[from] ProviderError),
    #[error("could not parse model output: {0}")]
    Parse(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error(transparent)]
    Ledger(#[from] crate::cost_ledger::LedgerError),
    #[error("{0}")]
    Run(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    KnowledgeExpansion,
    ConceptualAbstraction,
    FactualGrounding,
    ComputationalFormulation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// Id of the composite unit the seed was written from.
    pub seed_unit: String,
    pub iteration: u32,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub qa_id: String,
    pub question: String,
    pub answer: String,
    pub lineage: Lineage,
    #[serde(default)]
    pub dimension_tags: BTreeSet<Dimension>,
}

impl QaPair {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(EngineError::Precondition(format!("{}: empty question or answer", self.qa_id)));
        }
        if (self.lineage.iteration == 0) != self.lineage.parent.is_none() {
            return Err(EngineError::Precondition(format!(
                "{}: iteration 0 must be exactly the pairs without a parent",
                self.qa_id
            )));
        }
        Ok(())
    }

    /// The pair as the refiner receives it.
    pub fn to_prompt_json(&self) -> String {
        serde_json::json!({"question": self.question, "answer": self.answer}).to_string()
    }
}

pub fn seed_qa_id(unit_id: &str, question: &str) -> String {
    format!("qa-{:016x}", hash_parts(["seed", unit_id, question]))
}

fn child_qa_id(parent: &str, question: &str) -> String {
    format!("qa-{:016x}", hash_parts(["child", parent, question]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub k_max: u32,
    pub n_bon: u32,
    pub epsilon: f64,
    /// Run all N verification attempts even after one succeeds.
    #[serde(default)]
    pub force_all_bon: bool,
    /// Consecutive failed escalation steps before a candidate is quarantined.
    pub max_escalation_failures: u32,
    /// Root of every sampling seed the engine derives.
    pub seed: u64,
    pub workers: usize,
    pub index: IndexConfig,
    pub lkp: AgentConfig,
    pub mko: AgentConfig,
    pub refine: AgentConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k_max: 30,
            n_bon: 3,
            epsilon: 0.7,
            force_all_bon: false,
            max_escalation_failures: 3,
            seed: 0,
            workers: 4,
            index: IndexConfig::default(),
            lkp: AgentConfig::lkp(),
            mko: AgentConfig::mko(),
            refine: AgentConfig::refine(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Precondition(m.to_string()));
        if self.k_max == 0 {
            return bad("k_max must be positive");
        }
        if self.n_bon == 0 {
            return bad("n_bon must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must be in [0,1]");
        }
        if self.max_escalation_failures == 0 {
            return bad("max_escalation_failures must be positive");
        }
        if self.lkp.tools_enabled {
            return bad("the lkp agent must run without tools");
        }
        if !self.mko.tools_enabled {
            return bad("the mko agent must run with tools");
        }
        self.index.validate()?;
        Ok(())
    }
}

/// Model and tool handles the engine talks to.
#[derive(Clone)]
pub struct Models {
    /// Seed writer, and chunker when `chunk_with_llm` is set.
    pub generator: Arc<dyn Generator>,
    pub refiner: Arc<dyn Generator>,
    pub lkp: Arc<dyn Generator>,
    pub mko: Arc<dyn Generator>,
    pub embedder: Arc<dyn Embedder>,
    pub judge: Arc<dyn Judge>,
    pub reranker: Arc<dyn Reranker>,
    pub tools: Arc<dyn ToolHandle>,
    pub chunk_with_llm: bool,
}

impl Models {
    /// Fully offline set: the simulated world for every model role,
    /// synthetic search and pages, exact-match judge, overlap reranker.
    pub fn sim(seed: u64) -> Self {
        let world: Arc<dyn Generator> = Arc::new(SimWorld::new(seed));
        Self {
            generator: world.clone(),
            refiner: world.clone(),
            lkp: world.clone(),
            mko: world.clone(),
            embedder: Arc::new(MockEmbedder::default()),
            judge: Arc::new(MockJudge),
            reranker: Arc::new(MockReranker),
            tools: Arc::new(Toolkit::synthetic(Some(world))),
            chunk_with_llm: true,
        }
    }

    pub fn identities(&self) -> BTreeMap<String, String> {
        [
            ("generator", self.generator.identity()),
            ("refiner", self.refiner.identity()),
            ("lkp", self.lkp.identity()),
            ("mko", self.mko.identity()),
            ("embedder", self.embedder.identity()),
            ("judge", self.judge.identity()),
            ("reranker", self.reranker.identity()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionLabel {
    Pretrain,
    Zpd,
    Human,
    RejectedDuplicate,
    Quarantine,
}

impl PartitionLabel {
    pub const ALL: [PartitionLabel; 5] = [
        PartitionLabel::Pretrain,
        PartitionLabel::Zpd,
        PartitionLabel::Human,
        PartitionLabel::RejectedDuplicate,
        PartitionLabel::Quarantine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PartitionLabel::Pretrain => "pretrain",
            PartitionLabel::Zpd => "zpd",
            PartitionLabel::Human => "human",
            PartitionLabel::RejectedDuplicate => "rejected_duplicate",
            PartitionLabel::Quarantine => "quarantine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    Correct,
    Incorrect,
    /// The judge could not be brought to a verdict.
    Indeterminate,
}

/// One solver attempt and its verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub agent: String,
    pub seed: u64,
    pub outcome: ProbeOutcome,
    pub verdict: Option<JudgeVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
    pub trajectory: Trajectory,
}

impl ProbeRecord {
    pub fn solved(&self) -> bool {
        self.outcome == ProbeOutcome::Correct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LkpFailed,
    KMax,
    /// Repeated escalation failures or an undecidable peer probe.
    Quarantined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub frontier: QaPair,
    /// Seed first, frontier last.
    pub chain: Vec<QaPair>,
    pub iterations: u32,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub lkp_probes: Vec<ProbeRecord>,
    pub refine_trajectories: Vec<Trajectory>,
}

impl RefineOutcome {
    pub fn usage(&self) -> UsageEvent {
        let mut u = UsageEvent::default();
        for t in self.refine_trajectories.iter().chain(self.lkp_probes.iter().map(|p| &p.trajectory)) {
            u.merge(&t.usage());
        }
        u
    }
}

#[derive(Debug, Clone)]
pub struct EscalationStep {
    pub child: QaPair,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone)]
pub struct EscalationFailure {
    pub reason: String,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyOutcome {
    /// The peer solved it unaided.
    Pretrain,
    /// At least one tool-augmented attempt was correct.
    Verified,
    /// Every attempt was judged incorrect.
    Human,
    Quarantine,
}

/// Stage III outcome before admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub qa_id: String,
    pub lkp: Option<ProbeRecord>,
    pub mko_attempts: Vec<ProbeRecord>,
    pub outcome: VerifyOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Verification {
    pub fn usage(&self) -> UsageEvent {
        let mut u = UsageEvent::default();
        for p in self.lkp.iter().chain(&self.mko_attempts) {
            u.merge(&p.trajectory.usage());
        }
        u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub run_id: String,
    pub qa_id: String,
    pub qa: QaPair,
    /// Seed first, this pair last.
    pub lineage_chain: Vec<QaPair>,
    pub iterations: u32,
    pub stop_reason: StopReason,
    pub lkp_solvable: bool,
    pub lkp_probe: Option<ProbeRecord>,
    pub mko_attempts: Vec<ProbeRecord>,
    pub label: PartitionLabel,
    pub nearest_zpd_sim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quarantine_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZpdEntry {
    pub qa_id: String,
    pub question: String,
}

/// Questions admitted so far, in admission order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZpdStore {
    pub entries: Vec<ZpdEntry>,
}

impl ZpdStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Admission {
    pub label: PartitionLabel,
    /// Highest similarity to an earlier admission; None for an empty store.
    pub max_sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub unit_id: String,
    pub qa: Option<QaPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub usage: UsageEvent,
}

/// Retry any error, not only transport ones: a judge that returned an
/// unreadable reply may well return a readable one next time.
pub(crate) fn retry_any<T>(policy: &RetryPolicy, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
    let mut attempt = 0;
    loop {
        match op() {
            Err(e) if attempt < policy.max_retries => {
                tracing::warn!(error = %e, attempt, "retrying");
                thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Run one trajectory and grade its final answer against `qa.answer`. A
/// missing final answer is incorrect; a judge that keeps failing leaves the
/// outcome indeterminate.
pub fn probe(
    qa: &QaPair,
    cfg: &AgentConfig,
    generator: &dyn Generator,
    tools: &dyn ToolHandle,
    judge: &dyn Judge,
    judge_retry: &RetryPolicy,
) -> Result<ProbeRecord, AgentError> {
    let seed = cfg.sampling.seed.unwrap_or(0);
    let trajectory = run_trajectory(&qa.question, cfg, generator, tools)?;
    let Some(answer) = extract_final_answer(&trajectory) else {
        return Ok(ProbeRecord {
            agent: cfg.name.clone(),
            seed,
            outcome: ProbeOutcome::Incorrect,
            verdict: None,
            judge_error: None,
            trajectory,
        });
    };
    let judged = retry_any(judge_retry, || judge.judge_correct(&qa.question, &answer, &qa.answer));
    let (outcome, verdict, judge_error) = match judged {
        Ok(v) if v.correct => (ProbeOutcome::Correct, Some(v), None),
        Ok(v) => (ProbeOutcome::Incorrect, Some(v), None),
        Err(e) => (ProbeOutcome::Indeterminate, None, Some(e.to_string())),
    };
    Ok(ProbeRecord {
        agent: cfg.name.clone(),
        seed,
        outcome,
        verdict,
        judge_error,
        trajectory,
    })
}

fn parse_qa_json(text: &str) -> Result<(String, String, Value), String> {
    let v = extract_json_object(text).ok_or("no JSON object found")?;
    let field = |k: &str| {
        v.get(k)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .ok_or(format!("missing string field '{k}'"))
    };
    let (q, a) = (field("question")?, field("answer")?);
    Ok((q, a, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Lkp,
    Mko,
}

pub struct Engine {
    pub cfg: EngineConfig,
    pub models: Models,
    pub judge_retry: RetryPolicy,
    pub rerank_retry: RetryPolicy,
}

impl Engine {
    pub fn new(cfg: EngineConfig, models: Models) -> Result<Self, EngineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            models,
            judge_retry: RetryPolicy::default(),
            rerank_retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, policy: RetryPolicy) -> Self {
        self.judge_retry = policy;
        self.rerank_retry = policy;
        self
    }

    fn derive_seed(&self, parts: &[&str]) -> u64 {
        let root = self.cfg.seed.to_string();
        hash_parts(std::iter::once(root.as_str()).chain(parts.iter().copied()))
    }

    fn seeded(cfg: &AgentConfig, seed: u64) -> AgentConfig {
        AgentConfig {
            sampling: cfg.sampling.with_seed(seed),
            ..cfg.clone()
        }
    }

    /// Write a seed pair from the three chunks of `unit`.
    pub fn generate_seed(&self, unit: &CompositeUnit, texts: &HashMap<String, String>) -> Result<SeedRecord, EngineError> {
        let mut chunk_texts = Vec::with_capacity(3);
        for id in &unit.chunk_ids {
            chunk_texts.push(texts.get(id).ok_or_else(|| EngineError::MissingChunk(id.clone()))?.as_str());
        }
        let unit_id = unit.unit_id();
        let user = fill(SEED_USER, &[("c1", chunk_texts[0]), ("c2", chunk_texts[1]), ("c3", chunk_texts[2])]);
        let messages = [ChatMessage::system(SEED_SYSTEM), ChatMessage::user(user)];
        let mut usage = UsageEvent::default();
        let mut last_err = String::new();
        // One extra attempt with a different seed if the reply is unusable.
        for attempt in 0..2u32 {
            let params = SamplingParams::default().with_seed(self.derive_seed(&["seed", &unit_id, &attempt.to_string()]));
            let r = match self.models.generator.generate(&messages, &params) {
                Ok(r) => r,
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            };
            usage.merge(&UsageEvent {
                llm_calls: 1,
                input_tokens: r.input_tokens as i64,
                output_tokens: r.output_tokens as i64,
                estimated: !r.usage_reported,
                ..UsageEvent::default()
            });
            match parse_qa_json(&r.text) {
                Ok((question, answer, _)) => {
                    let qa = QaPair {
                        qa_id: seed_qa_id(&unit_id, &question),
                        question,
                        answer,
                        lineage: Lineage {
                            seed_unit: unit_id.clone(),
                            iteration: 0,
                            parent: None,
                        },
                        dimension_tags: BTreeSet::new(),
                    };
                    return Ok(SeedRecord {
                        unit_id,
                        qa: Some(qa),
                        error: None,
                        usage,
                    });
                }
                Err(e) => last_err = e,
            }
        }
        tracing::warn!(unit = %unit_id, error = %last_err, "seed generation failed; unit skipped");
        Ok(SeedRecord {
            unit_id,
            qa: None,
            error: Some(last_err),
            usage,
        })
    }

    /// One refinement step: the refine agent rewrites `qa` into a harder
    /// pair. An unparseable result gets one reprompt.
    pub fn escalate_once(&self, qa: &QaPair, attempt: u32) -> Result<EscalationStep, EscalationFailure> {
        let mut trajectories = Vec::new();
        let mut reason = String::new();
        for reprompt in 0..2u32 {
            let mut input = qa.to_prompt_json();
            if reprompt > 0 {
                input = format!("{input}\n\n{REFINE_REPROMPT}");
            }
            let seed = self.derive_seed(&["refine", &qa.qa_id, &attempt.to_string(), &reprompt.to_string()]);
            let traj = match run_trajectory(
                &input,
                &Self::seeded(&self.cfg.refine, seed),
                self.models.refiner.as_ref(),
                self.models.tools.as_ref(),
            ) {
                Ok(t) => t,
                Err(e) => {
                    reason = e.to_string();
                    break;
                }
            };
            let answer = extract_final_answer(&traj);
            trajectories.push(traj);
            let Some(answer) = answer else {
                reason = "refine agent gave no final answer".into();
                continue;
            };
            match parse_qa_json(&answer) {
                Ok((question, new_answer, v)) => {
                    let dimension_tags = v
                        .get("dimensions")
                        .and_then(Value::as_array)
                        .map(|a| {
                            a.iter()
                                .filter_map(|d| serde_json::from_value::<Dimension>(d.clone()).ok())
                                .collect()
                        })
                        .unwrap_or_default();
                    let child = QaPair {
                        qa_id: child_qa_id(&qa.qa_id, &question),
                        question,
                        answer: new_answer,
                        lineage: Lineage {
                            seed_unit: qa.lineage.seed_unit.clone(),
                            iteration: qa.lineage.iteration + 1,
                            parent: Some(qa.qa_id.clone()),
                        },
                        dimension_tags,
                    };
                    return Ok(EscalationStep { child, trajectories });
                }
                Err(e) => reason = format!("unparseable refinement: {e}"),
            }
        }
        Err(EscalationFailure { reason, trajectories })
    }

    /// Run one trajectory under the solver's config and judge its answer.
    pub fn is_solvable_by(&self, solver: Solver, qa: &QaPair, seed: u64) -> Result<ProbeRecord, EngineError> {
        let (cfg, generator, tools): (&AgentConfig, &dyn Generator, &dyn ToolHandle) = match solver {
            Solver::Lkp => (&self.cfg.lkp, self.models.lkp.as_ref(), &RefusalStub),
            Solver::Mko => (&self.cfg.mko, self.models.mko.as_ref(), self.models.tools.as_ref()),
        };
        Ok(probe(
            qa,
            &Self::seeded(cfg, seed),
            generator,
            tools,
            self.models.judge.as_ref(),
            &self.judge_retry,
        )?)
    }

    /// Escalate `seed` until the tool-less peer fails or `k_max` steps have
    /// been applied. The cap is checked before probing, so a k_max stop
    /// always means exactly `k_max` escalations.
    pub fn refine_until_frontier(&self, seed: &QaPair) -> Result<RefineOutcome, EngineError> {
        seed.validate()?;
        if seed.lineage.iteration != 0 {
            return Err(EngineError::Precondition(format!("{} is not a seed pair", seed.qa_id)));
        }
        let mut chain = vec![seed.clone()];
        let mut lkp_probes = Vec::new();
        let mut refine_trajectories = Vec::new();
        let mut k = 0u32;
        let finish = |chain: Vec<QaPair>, k, stop_reason, failure, lkp_probes, refine_trajectories| RefineOutcome {
            frontier: chain.last().cloned().expect("chain starts with the seed"),
            chain,
            iterations: k,
            stop_reason,
            failure,
            lkp_probes,
            refine_trajectories,
        };
        loop {
            let current = chain.last().expect("non-empty chain").clone();
            if k == self.cfg.k_max {
                return Ok(finish(chain, k, StopReason::KMax, None, lkp_probes, refine_trajectories));
            }
            let probe_seed = self.derive_seed(&["frontier", &current.qa_id]);
            let probe = self.is_solvable_by(Solver::Lkp, &current, probe_seed)?;
            let outcome = probe.outcome;
            let judge_error = probe.judge_error.clone();
            lkp_probes.push(probe);
            match outcome {
                ProbeOutcome::Incorrect => {
                    return Ok(finish(chain, k, StopReason::LkpFailed, None, lkp_probes, refine_trajectories));
                }
                ProbeOutcome::Indeterminate => {
                    let why = format!("peer probe undecidable: {}", judge_error.unwrap_or_default());
                    return Ok(finish(chain, k, StopReason::Quarantined, Some(why), lkp_probes, refine_trajectories));
                }
                ProbeOutcome::Correct => {}
            }
            let mut failures = 0;
            let child = loop {
                match self.escalate_once(&current, failures) {
                    Ok(step) => {
                        refine_trajectories.extend(step.trajectories);
                        break step.child;
                    }
                    Err(f) => {
                        refine_trajectories.extend(f.trajectories);
                        failures += 1;
                        if failures >= self.cfg.max_escalation_failures {
                            let why = format!("escalation failed {failures} times in a row: {}", f.reason);
                            return Ok(finish(chain, k, StopReason::Quarantined, Some(why), lkp_probes, refine_trajectories));
                        }
                    }
                }
            };
            chain.push(child);
            k += 1;
        }
    }

    /// Stage III probe: re-check the peer, then best-of-N with tools.
    pub fn calibrate(&self, qa: &QaPair) -> Result<Verification, EngineError> {
        qa.validate()?;
        let lkp = self.is_solvable_by(Solver::Lkp, qa, self.derive_seed(&["calibrate-lkp", &qa.qa_id]))?;
        let mut v = Verification {
            qa_id: qa.qa_id.clone(),
            lkp: None,
            mko_attempts: Vec::new(),
            outcome: VerifyOutcome::Pretrain,
            reason: None,
        };
        match lkp.outcome {
            ProbeOutcome::Correct => {
                v.lkp = Some(lkp);
                return Ok(v);
            }
            ProbeOutcome::Indeterminate => {
                v.reason = Some(format!("peer probe undecidable: {}", lkp.judge_error.clone().unwrap_or_default()));
                v.lkp = Some(lkp);
                v.outcome = VerifyOutcome::Quarantine;
                return Ok(v);
            }
            ProbeOutcome::Incorrect => v.lkp = Some(lkp),
        }
        for i in 0..self.cfg.n_bon {
            let seed = self.derive_seed(&["mko", &qa.qa_id, &i.to_string()]);
            let attempt = self.is_solvable_by(Solver::Mko, qa, seed)?;
            let solved = attempt.solved();
            v.mko_attempts.push(attempt);
            if solved && !self.cfg.force_all_bon {
                break;
            }
        }
        let any = |o| v.mko_attempts.iter().any(|a| a.outcome == o);
        (v.outcome, v.reason) = if any(ProbeOutcome::Correct) {
            (VerifyOutcome::Verified, None)
        } else if any(ProbeOutcome::Indeterminate) {
            (
                VerifyOutcome::Quarantine,
                Some("no attempt judged correct and at least one verdict undecidable".into()),
            )
        } else {
            (VerifyOutcome::Human, None)
        };
        Ok(v)
    }

    /// Admit `qa` into the store unless it is within `epsilon` of an earlier
    /// admission. The store changes only on admission.
    pub fn admit_with_dedup(&self, qa: &QaPair, store: &mut ZpdStore) -> Result<Admission, EngineError> {
        let mut max_sim: Option<f64> = None;
        for e in &store.entries {
            let s = retry_any(&self.rerank_retry, || self.models.reranker.similarity(&qa.question, &e.question))?;
            max_sim = Some(max_sim.map_or(s, |m: f64| m.max(s)));
        }
        if max_sim.unwrap_or(0.0) >= self.cfg.epsilon {
            return Ok(Admission {
                label: PartitionLabel::RejectedDuplicate,
                max_sim,
            });
        }
        store.entries.push(ZpdEntry {
            qa_id: qa.qa_id.clone(),
            question: qa.question.clone(),
        });
        Ok(Admission {
            label: PartitionLabel::Zpd,
            max_sim,
        })
    }
}

#[cfg(test)]
mod tests;
