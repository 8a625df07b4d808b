//! Command-line surface: one subcommand per stage, sharing a config file
//! and a run directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::agent_loop::AgentConfig;
use crate::corpus::read_documents;
use crate::cost_ledger::PriceTable;
use crate::engine::pipeline::{load_report, Clock, DatasetLine, Pipeline, PipelineReport, RunLayout, RunManifest};
use crate::engine::{CalibrationRecord, Engine, EngineConfig, Models, PartitionLabel, QaPair};
use crate::evalkit::{evaluate_benchmark, BenchmarkMetrics, ConsistencyRule, ExamCandidate, ExamDecision, ExamRunner};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::providers::judge::GeneratorJudge;
use crate::providers::remote::{ChatCompletionsClient, EndpointConfig, HttpEmbedder, HttpReranker};
use crate::providers::{Generator, RetryPolicy};
use crate::rft_export::{self, AcceptMode, ExportInput};
use crate::toolkit::backends::{FixtureReader, FixtureSearch, HttpReader, HttpSearch, HttpToolEndpoint, PageReader, SearchBackend};
use crate::toolkit::sandbox::PythonSandbox;
use crate::toolkit::{Toolkit, ToolkitConfig};

/// Exit status when candidates were quarantined and that was not allowed.
pub const EXIT_QUARANTINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "zpdforge", version, about = "Synthesize calibrated agentic QA data from a document corpus")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use the offline simulated providers and a logical clock.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Root RNG seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Continue a run, reusing finished stage outputs and checkpoints.
    /// Optionally names the run directory.
    #[arg(long, global = true, num_args = 0..=1, value_name = "RUN_DIR")]
    pub resume: Option<Option<PathBuf>>,
    /// Run directory [default: runs/<run id>].
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Worker threads [default: logical cores].
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Exit 0 even when candidates were quarantined.
    #[arg(long, global = true)]
    pub allow_quarantine: bool,
    /// Price preset: as-listed or per-1k-browser.
    #[arg(long, global = true)]
    pub prices: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a JSON Lines corpus.
    Ingest(InputArgs),
    /// Embed chunks.
    Index,
    /// Mine thematically coherent chunk triplets.
    Mine,
    /// Write one seed pair per triplet.
    Seed,
    /// Escalate seeds until the tool-less peer fails.
    Refine,
    /// Verify frontier pairs, deduplicate and partition.
    Calibrate,
    /// Every stage from ingest to calibrate.
    Pipeline(InputArgs),
    /// Training samples from accepted verification trajectories.
    ExportRft(ExportArgs),
    /// Build an exam from admitted pairs.
    ExamBuild(ExamArgs),
    /// Score an agent on an exam file.
    Evaluate(EvaluateArgs),
    /// Print the run report.
    Report,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Documents, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Judge,
    ExactMatch,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, value_enum, default_value = "judge")]
    pub mode: ModeArg,
    /// Subsample to exactly this many rounds.
    #[arg(long)]
    pub target_rounds: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub shard_size: usize,
}

#[derive(Debug, Args)]
pub struct ExamArgs {
    /// Number of questions to keep.
    #[arg(long, default_value_t = 1024)]
    pub size: usize,
    /// Include when at least one aided attempt succeeds instead of all three.
    #[arg(long)]
    pub at_least_one: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Exam file [default: <run dir>/exam/exam.jsonl].
    #[arg(long)]
    pub exam: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub attempts: usize,
    #[arg(long, default_value = "zpd-exam")]
    pub benchmark: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    pub generator: Option<EndpointConfig>,
    pub refiner: Option<EndpointConfig>,
    pub lkp: Option<EndpointConfig>,
    pub mko: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
    pub embedder: Option<EndpointConfig>,
    pub reranker: Option<EndpointConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolsConfig {
    pub search: Option<HttpToolEndpoint>,
    pub scholar: Option<HttpToolEndpoint>,
    pub reader: Option<HttpToolEndpoint>,
    /// Recorded search results and pages, consulted before the live APIs.
    pub fixtures: Option<PathBuf>,
    #[serde(default)]
    pub toolkit: ToolkitConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub prices: String,
    pub chunk_with_llm: bool,
    pub retry: RetryPolicy,
    pub engine: EngineConfig,
    pub providers: ProvidersConfig,
    pub tools: ToolsConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            prices: "as-listed".into(),
            chunk_with_llm: true,
            retry: RetryPolicy::default(),
            engine: EngineConfig::default(),
            providers: ProvidersConfig::default(),
            tools: ToolsConfig::default(),
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn endpoint<'a>(cfg: &'a Option<EndpointConfig>, fallback: &'a Option<EndpointConfig>, role: &str) -> Result<&'a EndpointConfig> {
    cfg.as_ref()
        .or(fallback.as_ref())
        .ok_or_else(|| anyhow!("no [providers.{role}] endpoint configured (or pass --mock)"))
}

fn remote_models(fc: &FileConfig) -> Result<Models> {
    let p = &fc.providers;
    let chat = |cfg: &Option<EndpointConfig>, role: &str| -> Result<Arc<dyn Generator>> {
        Ok(Arc::new(ChatCompletionsClient::new(endpoint(cfg, &p.generator, role)?.clone(), fc.retry)?))
    };
    let generator = chat(&p.generator, "generator")?;
    let judge_model = chat(&p.judge, "judge")?;
    let search: Arc<dyn SearchBackend> = match (&fc.tools.search, &fc.tools.scholar) {
        (Some(s), scholar) => Arc::new(HttpSearch::new(s.clone(), scholar.clone().unwrap_or_else(|| s.clone()))?),
        _ => bail!("no [tools.search] endpoint configured (or pass --mock)"),
    };
    let reader: Arc<dyn PageReader> = match &fc.tools.reader {
        Some(r) => Arc::new(HttpReader::new(r.clone())?),
        None => bail!("no [tools.reader] endpoint configured (or pass --mock)"),
    };
    let (search, reader): (Arc<dyn SearchBackend>, Arc<dyn PageReader>) = match &fc.tools.fixtures {
        Some(dir) => (
            Arc::new(FixtureSearch::new(dir).with_fallback(search)),
            Arc::new(FixtureReader::new(dir).with_fallback(reader)),
        ),
        None => (search, reader),
    };
    let mko = chat(&p.mko, "mko")?;
    let tools = Toolkit::new(
        search,
        reader,
        Some(mko.clone()),
        Arc::new(PythonSandbox::default()),
        fc.tools.toolkit.clone(),
    );
    Ok(Models {
        refiner: chat(&p.refiner, "refiner")?,
        lkp: chat(&p.lkp, "lkp")?,
        mko,
        embedder: Arc::new(HttpEmbedder::new(endpoint(&p.embedder, &None, "embedder")?.clone(), fc.retry)?),
        judge: Arc::new(GeneratorJudge::new(judge_model)),
        reranker: Arc::new(HttpReranker::new(endpoint(&p.reranker, &None, "reranker")?.clone(), fc.retry)?),
        tools: Arc::new(tools),
        chunk_with_llm: fc.chunk_with_llm,
        generator,
    })
}

struct RunContext {
    engine: Engine,
    prices: PriceTable,
    clock: Clock,
    run_dir: PathBuf,
    resume: bool,
    allow_quarantine: bool,
}

fn build_context(g: &GlobalArgs) -> Result<RunContext> {
    let mut fc = load_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        fc.engine.seed = seed;
    }
    fc.engine.workers = g
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let price_name = g.prices.clone().unwrap_or(fc.prices.clone());
    let prices = PriceTable::preset(&price_name).ok_or_else(|| anyhow!("unknown price preset '{price_name}'"))?;
    let (models, clock) = if g.mock {
        (Models::sim(fc.engine.seed), Clock::Logical)
    } else {
        (remote_models(&fc)?, Clock::System)
    };
    let engine = Engine::new(fc.engine, models)?;
    let run_id = RunManifest::new(&engine, &prices).run_id;
    let resume_dir = g.resume.clone().flatten();
    let run_dir = match (g.run_dir.clone(), resume_dir) {
        (Some(a), Some(b)) if a != b => bail!("--run-dir and --resume name different directories"),
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => PathBuf::from("runs").join(run_id),
    };
    Ok(RunContext {
        engine,
        prices,
        clock,
        run_dir,
        resume: g.resume.is_some(),
        allow_quarantine: g.allow_quarantine,
    })
}

impl RunContext {
    fn pipeline(self) -> Result<Pipeline> {
        Ok(Pipeline::open(self.engine, self.run_dir, self.prices, self.resume, self.clock)?)
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn report_status(report: &PipelineReport, allow_quarantine: bool) -> i32 {
    let q = report.quarantine_count();
    if q > 0 && !allow_quarantine {
        eprintln!("{q} candidate(s) quarantined; see quarantine.jsonl (pass --allow-quarantine to exit 0)");
        EXIT_QUARANTINE
    } else {
        0
    }
}

/// Stage an output directory next to `dest` and move it into place only
/// once complete.
fn publish_dir(dest: &Path, resume: bool, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if dest.exists() {
        if resume {
            return Ok(());
        }
        bail!("{} already exists; stage outputs are immutable (use --resume or a new run directory)", dest.display());
    }
    let parent = dest.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let staging = tempfile::tempdir_in(parent)?;
    fill(staging.path())?;
    std::fs::rename(staging.keep(), dest).with_context(|| format!("publishing {}", dest.display()))?;
    Ok(())
}

fn read_records(layout: &RunLayout) -> Result<Vec<CalibrationRecord>> {
    let path = layout.records();
    if !path.exists() {
        bail!("missing artifact {}: run the `calibrate` stage first", path.display());
    }
    Ok(read_jsonl(&path)?)
}

fn export_rft(ctx: RunContext, args: &ExportArgs) -> Result<i32> {
    let layout = RunLayout::new(&ctx.run_dir);
    let records = read_records(&layout)?;
    let inputs: Vec<ExportInput> = records
        .iter()
        .filter(|r| r.label == PartitionLabel::Zpd)
        .flat_map(|r| {
            r.mko_attempts.iter().map(|a| ExportInput {
                qa_id: format!("{}-s{:016x}", r.qa_id, a.seed),
                question: r.qa.question.clone(),
                gold: r.qa.answer.clone(),
                trajectory: a.trajectory.clone(),
            })
        })
        .collect();
    let judge = ctx.engine.models.judge.clone();
    let mode = match args.mode {
        ModeArg::Judge => AcceptMode::Judge(judge.as_ref()),
        ModeArg::ExactMatch => AcceptMode::ExactMatch,
    };
    let batch = rft_export::export(&inputs, mode);
    let samples = match args.target_rounds {
        Some(t) => rft_export::normalize_volume(&batch.samples, t, ctx.engine.cfg.seed)?,
        None => batch.samples,
    };
    let summary = rft_export::ExportSummary {
        samples: samples.len(),
        ..batch.summary
    };
    let dest = ctx.run_dir.join("rft");
    publish_dir(&dest, ctx.resume, |dir| {
        rft_export::write_shards(dir, &samples, args.shard_size)?;
        write_json(&dir.join("stats.json"), &summary)?;
        Ok(())
    })?;
    print_json(&summary)?;
    Ok(0)
}

/// Tool-less and tool-enabled configs of the same base model.
fn exam_configs(cfg: &EngineConfig) -> (AgentConfig, AgentConfig) {
    let untooled = cfg.lkp.clone();
    let tooled = AgentConfig {
        tools_enabled: true,
        system_prompt: cfg.mko.system_prompt.clone(),
        ..untooled.clone()
    };
    (untooled, tooled)
}

#[derive(Debug, Serialize)]
struct ExamSummary {
    candidates: usize,
    decisions: BTreeMap<String, usize>,
    selected: usize,
}

fn exam_build(ctx: RunContext, args: &ExamArgs) -> Result<i32> {
    let layout = RunLayout::new(&ctx.run_dir);
    let path = layout.partition(PartitionLabel::Zpd).expect("zpd has a partition file");
    if !path.exists() {
        bail!("missing artifact {}: run the `calibrate` stage first", path.display());
    }
    let lines: Vec<DatasetLine> = read_jsonl(&path)?;
    let models = &ctx.engine.models;
    let runner = ExamRunner {
        generator: models.lkp.as_ref(),
        tools: models.tools.as_ref(),
        judge: models.judge.as_ref(),
        judge_retry: RetryPolicy::default(),
        rule: if args.at_least_one { ConsistencyRule::AtLeastOne } else { ConsistencyRule::AllThree },
        seed: ctx.engine.cfg.seed,
    };
    let (untooled, tooled) = exam_configs(&ctx.engine.cfg);
    let candidates: Vec<ExamCandidate> = lines
        .iter()
        .map(|l| runner.exam_filter(&l.qa, &untooled, &tooled))
        .collect::<Result<_, _>>()?;
    let mut decisions = BTreeMap::new();
    for c in &candidates {
        *decisions.entry(format!("{:?}", c.decision).to_lowercase()).or_insert(0) += 1;
    }
    let included: Vec<ExamCandidate> = candidates.iter().filter(|c| c.decision == ExamDecision::Include).cloned().collect();
    let selected = rft_export::normalize_volume(&included, args.size.min(included.len()), ctx.engine.cfg.seed)?;
    let summary = ExamSummary {
        candidates: candidates.len(),
        decisions,
        selected: selected.len(),
    };
    publish_dir(&ctx.run_dir.join("exam"), ctx.resume, |dir| {
        write_jsonl(&dir.join("exam.jsonl"), &selected)?;
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(())
    })?;
    print_json(&summary)?;
    Ok(0)
}

fn evaluate(ctx: RunContext, args: &EvaluateArgs) -> Result<i32> {
    let exam = args.exam.clone().unwrap_or_else(|| ctx.run_dir.join("exam").join("exam.jsonl"));
    if !exam.exists() {
        bail!("missing artifact {}: run the `exam-build` stage first", exam.display());
    }
    let items: Vec<QaPair> = read_jsonl::<ExamCandidate>(&exam)?.into_iter().map(|c| c.qa).collect();
    if items.is_empty() {
        bail!("{} holds no questions: no candidate passed the exam filter", exam.display());
    }
    let models = &ctx.engine.models;
    let runner = ExamRunner {
        generator: models.mko.as_ref(),
        tools: models.tools.as_ref(),
        judge: models.judge.as_ref(),
        judge_retry: RetryPolicy::default(),
        rule: ConsistencyRule::AllThree,
        seed: ctx.engine.cfg.seed,
    };
    let metrics = evaluate_benchmark(&items, &ctx.engine.cfg.mko, &runner, args.attempts)?;
    let out = ctx.run_dir.join("metrics.json");
    let mut all: BTreeMap<String, BenchmarkMetrics> = if out.exists() { read_json(&out)? } else { BTreeMap::new() };
    if all.contains_key(&args.benchmark) && !ctx.resume {
        bail!("{} already has metrics for '{}'", out.display(), args.benchmark);
    }
    all.insert(args.benchmark.clone(), metrics);
    write_json(&out, &all)?;
    print_json(&all[&args.benchmark])?;
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    let ctx = build_context(&cli.global)?;
    let allow = ctx.allow_quarantine;
    match &cli.command {
        Command::Ingest(a) => {
            let docs = read_documents(&a.input)?;
            print_json(&ctx.pipeline()?.ingest(&docs)?)?;
        }
        Command::Index => {
            let n = ctx.pipeline()?.index()?.len();
            println!("embedded {n} chunks");
        }
        Command::Mine => {
            let n = ctx.pipeline()?.mine()?.len();
            println!("mined {n} composite units");
        }
        Command::Seed => {
            let records = ctx.pipeline()?.seed()?;
            let ok = records.iter().filter(|r| r.qa.is_some()).count();
            println!("wrote {ok} seeds ({} units skipped)", records.len() - ok);
        }
        Command::Refine => {
            let n = ctx.pipeline()?.refine()?.len();
            println!("refined {n} seeds");
        }
        Command::Calibrate => {
            let report = ctx.pipeline()?.calibrate()?;
            print_json(&report)?;
            return Ok(report_status(&report, allow));
        }
        Command::Pipeline(a) => {
            let docs = read_documents(&a.input)?;
            let report = ctx.pipeline()?.run_all(&docs)?;
            print_json(&report)?;
            return Ok(report_status(&report, allow));
        }
        Command::ExportRft(a) => return export_rft(ctx, a),
        Command::ExamBuild(a) => return exam_build(ctx, a),
        Command::Evaluate(a) => return evaluate(ctx, a),
        Command::Report => {
            let report = load_report(&ctx.run_dir)?;
            print_json(&report)?;
            return Ok(report_status(&report, allow));
        }
    }
    Ok(0)
}

/// Parse `args` and run. Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
