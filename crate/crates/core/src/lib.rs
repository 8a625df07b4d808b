//! Data-synthesis engine for frontier-difficulty agentic QA.
//!
//! The crate turns a document corpus into calibrated question-answer data:
//! chunks are embedded and mined for thematically coherent triplets, seed
//! questions are escalated by a tool-using agent until a tool-less peer can
//! no longer solve them, and a stronger tool-augmented agent decides whether
//! each candidate is learnable. Everything talks to models through the
//! traits in [`providers`], so the whole pipeline runs offline against the
//! deterministic mocks.

pub mod agent_loop;
pub mod cli;
pub mod corpus;
pub mod cost_ledger;
pub mod engine;
pub mod evalkit;
pub mod io;
pub mod prompts;
pub mod providers;
pub mod rft_export;
pub mod text;
pub mod toolkit;

pub use agent_loop::{AgentConfig, Round, Trajectory};
pub use corpus::{Chunk, CompositeUnit, IndexConfig, RawDocument, VectorIndex};
pub use cost_ledger::{CostLedger, Phase, PriceTable, UsageEvent};
pub use engine::{CalibrationRecord, EngineConfig, PartitionLabel, QaPair};
pub use providers::{ChatMessage, GenerationResult, JudgeVerdict, Role, SamplingParams};
pub use toolkit::{Observation, ToolCall, ToolKind};
