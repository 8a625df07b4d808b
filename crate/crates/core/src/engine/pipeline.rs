//! Staged, resumable runs over a corpus.
//!
//! Every stage reads its inputs from the run directory and writes its
//! outputs there atomically. A stage refuses to overwrite outputs that
//! already exist unless the run is resumed, in which case finished work is
//! loaded instead of recomputed. Per-seed refinement and verification
//! results are checkpointed individually, so an interrupted run loses at
//! most the seeds that were in flight.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    CalibrationRecord, Engine, EngineConfig, EngineError, PartitionLabel, QaPair, RefineOutcome, SeedRecord, StopReason,
    Verification, VerifyOutcome, ZpdStore,
};
use crate::corpus::{self, attach_embeddings, chunk_document, embed_chunks, Chunk, CompositeUnit, EmbeddingRecord, RawDocument, VectorIndex};
use crate::cost_ledger::{total_cost, CostLedger, CostReport, LedgerSnapshot, Phase, PriceTable, UsageEvent};
use crate::io::{read_json, read_jsonl, to_jsonl, write_json, write_jsonl};
use crate::prompts::prompt_revision;
use crate::text::sha256_hex;

pub const CHECKPOINT_DIR: &str = "checkpoints";

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn ingest_meta(&self) -> PathBuf {
        self.root.join("ingest.json")
    }
    pub fn chunks(&self) -> PathBuf {
        self.root.join("chunks.jsonl")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.jsonl")
    }
    pub fn units(&self) -> PathBuf {
        self.root.join("units.jsonl")
    }
    pub fn seeds(&self) -> PathBuf {
        self.root.join("seeds.jsonl")
    }
    pub fn refine_dir(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join("refine")
    }
    pub fn calibrate_dir(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join("calibrate")
    }
    pub fn refine_file(&self, qa_id: &str) -> PathBuf {
        self.refine_dir().join(format!("{qa_id}.json"))
    }
    pub fn calibrate_file(&self, qa_id: &str) -> PathBuf {
        self.calibrate_dir().join(format!("{qa_id}.json"))
    }
    /// Dataset file for a label; duplicates only appear in the records.
    pub fn partition(&self, label: PartitionLabel) -> Option<PathBuf> {
        match label {
            PartitionLabel::RejectedDuplicate => None,
            l => Some(self.root.join(format!("{}.jsonl", l.as_str()))),
        }
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Source of stage timestamps. The logical clock makes offline runs
/// byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Logical,
}

impl Clock {
    fn stamp(self, ordinal: usize) -> String {
        match self {
            Clock::System => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            Clock::Logical => format!("1970-01-01T00:00:{ordinal:02}Z"),
        }
    }
}

const STAGES: [&str; 6] = ["ingest", "index", "mine", "seed", "refine", "calibrate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of everything that determines outputs; embedded in artifacts.
    pub run_id: String,
    pub config_hash: String,
    pub providers: BTreeMap<String, String>,
    pub prompt_revision: String,
    pub price_preset: String,
    pub seed: u64,
    pub tool_version: String,
    #[serde(default)]
    pub corpus_hash: Option<String>,
    #[serde(default)]
    pub stage_timestamps: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(engine: &Engine, prices: &PriceTable) -> Self {
        // Pool size does not change outputs, so it stays out of the hash.
        let hashed = EngineConfig {
            workers: 0,
            ..engine.cfg.clone()
        };
        let config_hash = sha256_hex(serde_json::to_string(&hashed).expect("config serializes"))[..16].to_string();
        let providers = engine.models.identities();
        let prompt_revision = prompt_revision();
        let run_id = sha256_hex(
            serde_json::json!({
                "config": config_hash,
                "providers": providers,
                "prompts": prompt_revision,
                "prices": prices,
            })
            .to_string(),
        )[..16]
            .to_string();
        Self {
            run_id,
            config_hash,
            providers,
            prompt_revision,
            price_preset: prices.preset.clone(),
            seed: engine.cfg.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            corpus_hash: None,
            stage_timestamps: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestMeta {
    pub documents: usize,
    pub chunks: usize,
    pub warnings: Vec<String>,
    pub usage: UsageEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub run_id: String,
    pub label: PartitionLabel,
    pub qa: QaPair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub qa_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub run_id: String,
    pub documents: usize,
    pub chunks: usize,
    pub composite_units: usize,
    pub seeds: usize,
    /// Units whose seed pair could not be generated.
    pub skipped_units: usize,
    pub counts: BTreeMap<PartitionLabel, usize>,
    /// Share of calibrated candidates admitted to the zpd set.
    pub admission_rate: f64,
    pub iteration_histogram: BTreeMap<u32, usize>,
    pub stop_reasons: BTreeMap<StopReason, usize>,
    pub quarantined: Vec<QuarantineEntry>,
    pub usage: LedgerSnapshot,
    pub cost: CostReport,
    /// Relative to the run directory.
    pub checkpoint_dir: String,
}

impl PipelineReport {
    pub fn quarantine_count(&self) -> usize {
        self.counts.get(&PartitionLabel::Quarantine).copied().unwrap_or(0)
    }
}

pub struct Pipeline {
    pub engine: Engine,
    pub layout: RunLayout,
    pub prices: PriceTable,
    pub resume: bool,
    clock: Clock,
    manifest: RunManifest,
}

fn run_err(msg: impl Into<String>) -> EngineError {
    EngineError::Run(msg.into())
}

impl Pipeline {
    /// Open a run directory. An existing manifest must describe the same
    /// configuration.
    pub fn open(engine: Engine, root: impl Into<PathBuf>, prices: PriceTable, resume: bool, clock: Clock) -> Result<Self, EngineError> {
        prices.validate()?;
        let layout = RunLayout::new(root);
        let mut manifest = RunManifest::new(&engine, &prices);
        if layout.manifest().exists() {
            let existing: RunManifest = read_json(&layout.manifest())?;
            if existing.run_id != manifest.run_id {
                return Err(run_err(format!(
                    "{} was created by a different configuration (run {} vs {})",
                    layout.root.display(),
                    existing.run_id,
                    manifest.run_id
                )));
            }
            manifest.stage_timestamps = existing.stage_timestamps;
            manifest.corpus_hash = existing.corpus_hash;
        } else if resume {
            return Err(run_err(format!("nothing to resume: {} has no manifest", layout.root.display())));
        }
        fs::create_dir_all(&layout.root).map_err(|e| run_err(format!("{}: {e}", layout.root.display())))?;
        Ok(Self {
            engine,
            layout,
            prices,
            resume,
            clock,
            manifest,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn mark(&mut self, stage: &str) -> Result<(), EngineError> {
        let ordinal = STAGES.iter().position(|s| *s == stage).unwrap_or(STAGES.len());
        self.manifest
            .stage_timestamps
            .entry(stage.to_string())
            .or_insert_with(|| self.clock.stamp(ordinal));
        write_json(&self.layout.manifest(), &self.manifest)?;
        Ok(())
    }

    /// True when `path` exists and may be reused; error when it exists and
    /// the run is not resumed.
    fn existing(&self, path: &Path) -> Result<bool, EngineError> {
        if !path.exists() {
            return Ok(false);
        }
        if self.resume {
            return Ok(true);
        }
        Err(run_err(format!(
            "{} already exists; stage outputs are immutable (use --resume or a new run directory)",
            path.display()
        )))
    }

    fn require(path: &Path, stage: &str) -> Result<(), EngineError> {
        if path.exists() {
            Ok(())
        } else {
            Err(run_err(format!(
                "missing artifact {}: run the `{stage}` stage first",
                path.display()
            )))
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, EngineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.engine.cfg.workers.max(1))
            .build()
            .map_err(|e| run_err(e.to_string()))
    }

    pub fn ingest(&mut self, docs: &[RawDocument]) -> Result<IngestMeta, EngineError> {
        if self.existing(&self.layout.ingest_meta())? {
            return Ok(read_json(&self.layout.ingest_meta())?);
        }
        corpus::validate_documents(docs)?;
        let chunker = self.engine.models.chunk_with_llm.then(|| self.engine.models.generator.clone());
        let outcomes = self.pool()?.install(|| {
            docs.par_iter()
                .map(|d| chunk_document(d, chunker.as_deref()))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mut chunks = Vec::new();
        let mut warnings = Vec::new();
        let mut usage = UsageEvent::default();
        for o in outcomes {
            chunks.extend(o.chunks);
            warnings.extend(o.warning);
            usage.merge(&o.usage);
        }
        corpus::write_chunks(&self.layout.chunks(), &chunks)?;
        let meta = IngestMeta {
            documents: docs.len(),
            chunks: chunks.len(),
            warnings,
            usage,
        };
        self.manifest.corpus_hash = Some(sha256_hex(to_jsonl(docs)?)[..16].to_string());
        write_json(&self.layout.ingest_meta(), &meta)?;
        self.mark("ingest")?;
        Ok(meta)
    }

    pub fn index(&mut self) -> Result<Vec<EmbeddingRecord>, EngineError> {
        Self::require(&self.layout.chunks(), "ingest")?;
        if self.existing(&self.layout.embeddings())? {
            return Ok(read_jsonl(&self.layout.embeddings())?);
        }
        let chunks = corpus::read_chunks(&self.layout.chunks())?;
        let records = embed_chunks(&chunks, self.engine.models.embedder.as_ref(), 64)?;
        write_jsonl(&self.layout.embeddings(), &records)?;
        self.mark("index")?;
        Ok(records)
    }

    fn indexed_chunks(&self) -> Result<Vec<Chunk>, EngineError> {
        Self::require(&self.layout.chunks(), "ingest")?;
        Self::require(&self.layout.embeddings(), "index")?;
        let mut chunks = corpus::read_chunks(&self.layout.chunks())?;
        attach_embeddings(&mut chunks, read_jsonl(&self.layout.embeddings())?)?;
        Ok(chunks)
    }

    pub fn mine(&mut self) -> Result<Vec<CompositeUnit>, EngineError> {
        let chunks = self.indexed_chunks()?;
        if self.existing(&self.layout.units())? {
            return Ok(read_jsonl(&self.layout.units())?);
        }
        let index = VectorIndex::build(&chunks)?;
        let units = self.pool()?.install(|| index.mine_composite_units(&self.engine.cfg.index))?;
        write_jsonl(&self.layout.units(), &units)?;
        self.mark("mine")?;
        Ok(units)
    }

    pub fn seed(&mut self) -> Result<Vec<SeedRecord>, EngineError> {
        Self::require(&self.layout.units(), "mine")?;
        if self.existing(&self.layout.seeds())? {
            return Ok(read_jsonl(&self.layout.seeds())?);
        }
        let units: Vec<CompositeUnit> = read_jsonl(&self.layout.units())?;
        let texts: HashMap<String, String> = corpus::read_chunks(&self.layout.chunks())?
            .into_iter()
            .map(|c| (c.chunk_id, c.text))
            .collect();
        let engine = &self.engine;
        let records = self.pool()?.install(|| {
            units
                .par_iter()
                .map(|u| engine.generate_seed(u, &texts))
                .collect::<Result<Vec<_>, _>>()
        })?;
        write_jsonl(&self.layout.seeds(), &records)?;
        self.mark("seed")?;
        Ok(records)
    }

    fn seed_pairs(&self) -> Result<Vec<QaPair>, EngineError> {
        Self::require(&self.layout.seeds(), "seed")?;
        let records: Vec<SeedRecord> = read_jsonl(&self.layout.seeds())?;
        Ok(records.into_iter().filter_map(|r| r.qa).collect())
    }

    fn refine_one(&self, seed: &QaPair) -> Result<RefineOutcome, EngineError> {
        let path = self.layout.refine_file(&seed.qa_id);
        if path.exists() {
            return Ok(read_json(&path)?);
        }
        let outcome = self.engine.refine_until_frontier(seed)?;
        write_json(&path, &outcome)?;
        Ok(outcome)
    }

    fn calibrate_one(&self, refined: &RefineOutcome) -> Result<Verification, EngineError> {
        let path = self.layout.calibrate_file(&refined.frontier.qa_id);
        if path.exists() {
            return Ok(read_json(&path)?);
        }
        let v = if refined.stop_reason == StopReason::Quarantined {
            Verification {
                qa_id: refined.frontier.qa_id.clone(),
                lkp: None,
                mko_attempts: Vec::new(),
                outcome: VerifyOutcome::Quarantine,
                reason: refined.failure.clone(),
            }
        } else {
            self.engine.calibrate(&refined.frontier)?
        };
        write_json(&path, &v)?;
        Ok(v)
    }

    fn open_checkpoints(&self, dir: &Path) -> Result<(), EngineError> {
        if dir.exists() && !self.resume {
            return Err(run_err(format!(
                "{} already exists; stage outputs are immutable (use --resume or a new run directory)",
                dir.display()
            )));
        }
        fs::create_dir_all(dir).map_err(|e| run_err(format!("{}: {e}", dir.display())))
    }

    pub fn refine(&mut self) -> Result<Vec<RefineOutcome>, EngineError> {
        let seeds = self.seed_pairs()?;
        self.open_checkpoints(&self.layout.refine_dir())?;
        let out = self.pool()?.install(|| {
            seeds
                .par_iter()
                .map(|s| self.refine_one(s))
                .collect::<Result<Vec<_>, _>>()
        })?;
        self.mark("refine")?;
        Ok(out)
    }

    pub fn calibrate(&mut self) -> Result<PipelineReport, EngineError> {
        let seeds = self.seed_pairs()?;
        let mut refined = Vec::with_capacity(seeds.len());
        for s in &seeds {
            let path = self.layout.refine_file(&s.qa_id);
            Self::require(&path, "refine")?;
            refined.push(read_json::<RefineOutcome>(&path)?);
        }
        self.open_checkpoints(&self.layout.calibrate_dir())?;
        let verified = self.pool()?.install(|| {
            refined
                .par_iter()
                .map(|r| self.calibrate_one(r))
                .collect::<Result<Vec<_>, _>>()
        })?;
        self.finalize(&refined, &verified)
    }

    /// Every stage in order. Seeds flow through refinement and verification
    /// concurrently; admission runs afterwards in seed order.
    pub fn run_all(&mut self, docs: &[RawDocument]) -> Result<PipelineReport, EngineError> {
        self.ingest(docs)?;
        self.index()?;
        self.mine()?;
        self.seed()?;
        let seeds = self.seed_pairs()?;
        self.open_checkpoints(&self.layout.refine_dir())?;
        self.open_checkpoints(&self.layout.calibrate_dir())?;
        let done = self.pool()?.install(|| {
            seeds
                .par_iter()
                .map(|s| {
                    let r = self.refine_one(s)?;
                    let v = self.calibrate_one(&r)?;
                    Ok((r, v))
                })
                .collect::<Result<Vec<_>, EngineError>>()
        })?;
        self.mark("refine")?;
        let (refined, verified): (Vec<_>, Vec<_>) = done.into_iter().unzip();
        self.finalize(&refined, &verified)
    }

    fn finalize(&mut self, refined: &[RefineOutcome], verified: &[Verification]) -> Result<PipelineReport, EngineError> {
        let report_path = self.layout.report();
        if report_path.exists() {
            self.existing(&report_path)?;
            let complete = PartitionLabel::ALL
                .iter()
                .filter_map(|l| self.layout.partition(*l))
                .chain([self.layout.records()])
                .all(|p| p.exists());
            if complete {
                return Ok(read_json(&report_path)?);
            }
        }

        let run_id = self.manifest.run_id.clone();
        let mut store = ZpdStore::default();
        let mut records: Vec<Option<CalibrationRecord>> = vec![None; refined.len()];
        let mut deferred = Vec::new();
        for (i, (r, v)) in refined.iter().zip(verified).enumerate() {
            let mut rec = CalibrationRecord {
                run_id: run_id.clone(),
                qa_id: r.frontier.qa_id.clone(),
                qa: r.frontier.clone(),
                lineage_chain: r.chain.clone(),
                iterations: r.iterations,
                stop_reason: r.stop_reason,
                lkp_solvable: v.lkp.as_ref().is_some_and(|p| p.solved()),
                lkp_probe: v.lkp.clone(),
                mko_attempts: v.mko_attempts.clone(),
                label: PartitionLabel::Quarantine,
                nearest_zpd_sim: None,
                quarantine_reason: None,
            };
            match v.outcome {
                VerifyOutcome::Pretrain => rec.label = PartitionLabel::Pretrain,
                VerifyOutcome::Human => rec.label = PartitionLabel::Human,
                VerifyOutcome::Quarantine => {
                    rec.quarantine_reason = Some(v.reason.clone().unwrap_or_else(|| "unspecified".into()));
                }
                VerifyOutcome::Verified => match self.engine.admit_with_dedup(&r.frontier, &mut store) {
                    Ok(a) => {
                        rec.label = a.label;
                        rec.nearest_zpd_sim = a.max_sim;
                    }
                    Err(e) => {
                        tracing::warn!(qa = %rec.qa_id, error = %e, "admission deferred");
                        deferred.push(i);
                    }
                },
            }
            records[i] = Some(rec);
        }
        // Deferred candidates get one more pass once everything else is in.
        for i in deferred {
            let rec = records[i].as_mut().expect("record built above");
            match self.engine.admit_with_dedup(&refined[i].frontier, &mut store) {
                Ok(a) => {
                    rec.label = a.label;
                    rec.nearest_zpd_sim = a.max_sim;
                }
                Err(e) => rec.quarantine_reason = Some(format!("similarity check kept failing: {e}")),
            }
        }
        let records: Vec<CalibrationRecord> = records.into_iter().map(|r| r.expect("every slot filled")).collect();

        for label in PartitionLabel::ALL {
            if let Some(path) = self.layout.partition(label) {
                let lines: Vec<DatasetLine> = records
                    .iter()
                    .filter(|r| r.label == label)
                    .map(|r| DatasetLine {
                        run_id: run_id.clone(),
                        label,
                        qa: r.qa.clone(),
                    })
                    .collect();
                write_jsonl(&path, &lines)?;
            }
        }
        write_jsonl(&self.layout.records(), &records)?;

        let report = self.build_report(refined, verified, &records)?;
        self.mark("calibrate")?;
        write_json(&report_path, &report)?;
        Ok(report)
    }

    /// Cost is rebuilt from persisted artifacts so a resumed run reports
    /// the same totals as an uninterrupted one.
    fn build_report(
        &self,
        refined: &[RefineOutcome],
        verified: &[Verification],
        records: &[CalibrationRecord],
    ) -> Result<PipelineReport, EngineError> {
        let ingest: IngestMeta = read_json(&self.layout.ingest_meta())?;
        let seeds: Vec<SeedRecord> = read_jsonl(&self.layout.seeds())?;
        let units = seeds.len();
        let ledger = CostLedger::new();
        ledger.record(Phase::Seeding, &ingest.usage)?;
        for s in &seeds {
            ledger.record(Phase::Seeding, &s.usage)?;
        }
        for r in refined {
            ledger.record(Phase::Refinement, &r.usage())?;
        }
        for v in verified {
            ledger.record(Phase::Verification, &v.usage())?;
        }
        let usage = ledger.snapshot();
        let cost = total_cost(&usage, &self.prices)?;

        let mut counts: BTreeMap<PartitionLabel, usize> = PartitionLabel::ALL.iter().map(|l| (*l, 0)).collect();
        for r in records {
            *counts.entry(r.label).or_default() += 1;
        }
        let mut iteration_histogram = BTreeMap::new();
        let mut stop_reasons = BTreeMap::new();
        for r in refined {
            *iteration_histogram.entry(r.iterations).or_default() += 1;
            *stop_reasons.entry(r.stop_reason).or_default() += 1;
        }
        let quarantined = records
            .iter()
            .filter(|r| r.label == PartitionLabel::Quarantine)
            .map(|r| QuarantineEntry {
                qa_id: r.qa_id.clone(),
                reason: r.quarantine_reason.clone().unwrap_or_default(),
            })
            .collect();
        let zpd = counts[&PartitionLabel::Zpd];
        Ok(PipelineReport {
            run_id: self.manifest.run_id.clone(),
            documents: ingest.documents,
            chunks: ingest.chunks,
            composite_units: units,
            seeds: records.len(),
            skipped_units: seeds.iter().filter(|s| s.qa.is_none()).count(),
            counts,
            admission_rate: if records.is_empty() { 0.0 } else { zpd as f64 / records.len() as f64 },
            iteration_histogram,
            stop_reasons,
            quarantined,
            usage,
            cost,
            checkpoint_dir: CHECKPOINT_DIR.to_string(),
        })
    }
}

pub fn load_report(root: &Path) -> Result<PipelineReport, EngineError> {
    let path = RunLayout::new(root).report();
    Pipeline::require(&path, "calibrate")?;
    Ok(read_json(&path)?)
}

/// Run every stage into `root`.
pub fn run_pipeline(
    docs: &[RawDocument],
    engine: Engine,
    root: &Path,
    prices: PriceTable,
    resume: bool,
    clock: Clock,
) -> Result<PipelineReport, EngineError> {
    Pipeline::open(engine, root, prices, resume, clock)?.run_all(docs)
}
