//! Rejection-sampled training data: accepted trajectories become one sample
//! per round, with loss computed on the round's report only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent_loop::{extract_final_answer, round_context, SegmentKind, Trajectory};
use crate::io::{self, IoError};
use crate::providers::Judge;
use crate::text::normalize_answer;
use crate::toolkit::ToolKind;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Copy)]
pub enum AcceptMode<'a> {
    ExactMatch,
    Judge(&'a dyn Judge),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum Acceptance {
    Accepted,
    Rejected,
    /// The judge could not decide; the trajectory is left out.
    Indeterminate(String),
}

impl Acceptance {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Acceptance::Accepted)
    }
}

pub fn accept_trajectory(traj: &Trajectory, gold: &str, mode: AcceptMode<'_>) -> Acceptance {
    let Some(answer) = extract_final_answer(traj) else {
        return Acceptance::Rejected;
    };
    match mode {
        AcceptMode::ExactMatch => {
            if normalize_answer(&answer) == normalize_answer(gold) {
                Acceptance::Accepted
            } else {
                Acceptance::Rejected
            }
        }
        AcceptMode::Judge(judge) => match judge.judge_correct(&traj.question, &answer, gold) {
            Ok(v) if v.correct => Acceptance::Accepted,
            Ok(_) => Acceptance::Rejected,
            Err(e) => {
                tracing::warn!(question = %traj.question, error = %e, "judge failed; trajectory excluded");
                Acceptance::Indeterminate(e.to_string())
            }
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSource {
    pub qa_id: String,
    pub round_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSegment {
    pub text: String,
    pub loss_masked: bool,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub sample_id: String,
    pub source: SampleSource,
    pub segments: Vec<SampleSegment>,
}

impl TrainingSample {
    /// Context the model is conditioned on for this round.
    pub fn prompt(&self) -> String {
        self.segments.iter().filter(|s| s.loss_masked).map(|s| s.text.as_str()).collect()
    }

    /// The loss-bearing text.
    pub fn target(&self) -> String {
        self.segments.iter().filter(|s| !s.loss_masked).map(|s| s.text.as_str()).collect()
    }

    pub fn full_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }
}

pub fn sample_id(qa_id: &str, round_index: u32) -> String {
    format!("{qa_id}/r{round_index:03}")
}

/// One sample per round. The context for round j is the question plus
/// round j-1's report and observations.
pub fn to_training_samples(traj: &Trajectory, qa_id: &str, question: &str) -> Vec<TrainingSample> {
    traj.rounds
        .iter()
        .enumerate()
        .map(|(i, round)| {
            let prev = i.checked_sub(1).map(|p| &traj.rounds[p]);
            let mut segments: Vec<SampleSegment> = round_context(question, prev)
                .into_iter()
                .map(|s| SampleSegment {
                    text: s.text,
                    loss_masked: true,
                    kind: s.kind,
                })
                .collect();
            segments.push(SampleSegment {
                text: round.report.clone(),
                loss_masked: false,
                kind: SegmentKind::Report,
            });
            TrainingSample {
                sample_id: sample_id(qa_id, round.index),
                source: SampleSource {
                    qa_id: qa_id.to_string(),
                    round_index: round.index,
                },
                segments,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub trajectories: usize,
    pub avg_rounds: f64,
    pub avg_calls: BTreeMap<ToolKind, f64>,
}

pub fn dataset_stats(trajs: &[Trajectory]) -> Result<DatasetStats, ExportError> {
    if trajs.is_empty() {
        return Err(ExportError::Precondition("no trajectories".into()));
    }
    let n = trajs.len() as f64;
    let rounds: usize = trajs.iter().map(|t| t.rounds.len()).sum();
    let avg_calls = ToolKind::ALL
        .iter()
        .map(|k| {
            let total: u64 = trajs.iter().map(|t| t.tool_call_counts.get(k).copied().unwrap_or(0)).sum();
            (*k, total as f64 / n)
        })
        .collect();
    Ok(DatasetStats {
        trajectories: trajs.len(),
        avg_rounds: rounds as f64 / n,
        avg_calls,
    })
}

/// Uniform subsample of exactly `target` items without replacement. Input
/// order is kept among the survivors.
pub fn normalize_volume<T: Clone>(samples: &[T], target: usize, seed: u64) -> Result<Vec<T>, ExportError> {
    if target > samples.len() {
        return Err(ExportError::Precondition(format!(
            "target {target} exceeds the {} available samples",
            samples.len()
        )));
    }
    if target == samples.len() {
        return Ok(samples.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, samples.len(), target).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| samples[i].clone()).collect())
}

/// A trajectory offered for export with the pair it answers.
#[derive(Debug, Clone)]
pub struct ExportInput {
    pub qa_id: String,
    pub question: String,
    pub gold: String,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub candidates: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub indeterminate: usize,
    pub acceptance_ratio: f64,
    pub samples: usize,
    pub stats: Option<DatasetStats>,
}

#[derive(Debug, Clone)]
pub struct ExportBatch {
    pub samples: Vec<TrainingSample>,
    pub summary: ExportSummary,
}

/// Accept, expand and merge. Samples come back sorted by id regardless of
/// how the work was scheduled.
pub fn export(inputs: &[ExportInput], mode: AcceptMode<'_>) -> ExportBatch {
    let judged: Vec<(Acceptance, Vec<TrainingSample>)> = inputs
        .par_iter()
        .map(|inp| {
            let a = accept_trajectory(&inp.trajectory, &inp.gold, mode);
            let samples = if a.is_accepted() {
                to_training_samples(&inp.trajectory, &inp.qa_id, &inp.question)
            } else {
                Vec::new()
            };
            (a, samples)
        })
        .collect();
    let accepted_trajs: Vec<Trajectory> = inputs
        .iter()
        .zip(&judged)
        .filter(|(_, (a, _))| a.is_accepted())
        .map(|(i, _)| i.trajectory.clone())
        .collect();
    let count = |f: fn(&Acceptance) -> bool| judged.iter().filter(|(a, _)| f(a)).count();
    let accepted = accepted_trajs.len();
    let rejected = count(|a| matches!(a, Acceptance::Rejected));
    let indeterminate = count(|a| matches!(a, Acceptance::Indeterminate(_)));
    let mut samples: Vec<TrainingSample> = judged.into_iter().flat_map(|(_, s)| s).collect();
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let summary = ExportSummary {
        candidates: inputs.len(),
        accepted,
        rejected,
        indeterminate,
        acceptance_ratio: if inputs.is_empty() { 0.0 } else { accepted as f64 / inputs.len() as f64 },
        samples: samples.len(),
        stats: dataset_stats(&accepted_trajs).ok(),
    };
    ExportBatch { samples, summary }
}

/// Write `train-NNNNN.jsonl` shards of at most `shard_size` samples.
pub fn write_shards(dir: &Path, samples: &[TrainingSample], shard_size: usize) -> Result<Vec<PathBuf>, ExportError> {
    if shard_size == 0 {
        return Err(ExportError::Precondition("shard size must be positive".into()));
    }
    let mut paths = Vec::new();
    for (i, chunk) in samples.chunks(shard_size).enumerate() {
        let path = dir.join(format!("train-{i:05}.jsonl"));
        io::write_jsonl(&path, chunk)?;
        paths.push(path);
    }
    Ok(paths)
}
