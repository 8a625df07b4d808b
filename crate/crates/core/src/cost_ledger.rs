//! Token and call accounting, priced through a configurable rate table.
//!
//! Counters are atomics shared by all workers. The audit log keeps every
//! event so a ledger can be rebuilt by replay.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LedgerError {
    #[error("usage event has negative {field}: {value}")]
    NegativeCount { field: &'static str, value: i64 },
    #[error("success rate must be in (0, 1], got {0}")]
    InvalidSuccessRate(f64),
    #[error("price table has a negative or non-finite rate: {0}")]
    InvalidPrice(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Chunking and seed generation.
    Seeding,
    Refinement,
    Verification,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Seeding, Phase::Refinement, Phase::Verification];
}

/// One unit of recorded usage. Signed so that externally supplied logs can
/// be validated rather than silently wrapped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEvent {
    #[serde(default)]
    pub llm_calls: i64,
    #[serde(default)]
    pub input_tokens: i64,
    #[serde(default)]
    pub output_tokens: i64,
    #[serde(default)]
    pub search_calls: i64,
    #[serde(default)]
    pub scholar_calls: i64,
    #[serde(default)]
    pub browser_tokens: i64,
    #[serde(default)]
    pub code_calls: i64,
    /// Token counts include a characters/4 estimate somewhere.
    #[serde(default)]
    pub estimated: bool,
}

impl UsageEvent {
    pub fn llm(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            llm_calls: 1,
            input_tokens: input_tokens as i64,
            output_tokens: output_tokens as i64,
            ..Self::default()
        }
    }

    fn fields(&self) -> [(&'static str, i64); 7] {
        [
            ("llm_calls", self.llm_calls),
            ("input_tokens", self.input_tokens),
            ("output_tokens", self.output_tokens),
            ("search_calls", self.search_calls),
            ("scholar_calls", self.scholar_calls),
            ("browser_tokens", self.browser_tokens),
            ("code_calls", self.code_calls),
        ]
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        match self.fields().into_iter().find(|(_, v)| *v < 0) {
            Some((field, value)) => Err(LedgerError::NegativeCount { field, value }),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: &UsageEvent) {
        self.llm_calls += other.llm_calls;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.search_calls += other.search_calls;
        self.scholar_calls += other.scholar_calls;
        self.browser_tokens += other.browser_tokens;
        self.code_calls += other.code_calls;
        self.estimated |= other.estimated;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub llm_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub search_calls: u64,
    pub scholar_calls: u64,
    pub browser_tokens: u64,
    pub code_calls: u64,
    pub estimated_events: u64,
}

impl PhaseCounters {
    pub fn add(&mut self, e: &UsageEvent) {
        self.llm_calls += e.llm_calls as u64;
        self.input_tokens += e.input_tokens as u64;
        self.output_tokens += e.output_tokens as u64;
        self.search_calls += e.search_calls as u64;
        self.scholar_calls += e.scholar_calls as u64;
        self.browser_tokens += e.browser_tokens as u64;
        self.code_calls += e.code_calls as u64;
        self.estimated_events += e.estimated as u64;
    }
}

#[derive(Default)]
struct AtomicCounters([AtomicU64; 8]);

impl AtomicCounters {
    fn add(&self, e: &UsageEvent) {
        let vals = [
            e.llm_calls as u64,
            e.input_tokens as u64,
            e.output_tokens as u64,
            e.search_calls as u64,
            e.scholar_calls as u64,
            e.browser_tokens as u64,
            e.code_calls as u64,
            e.estimated as u64,
        ];
        for (slot, v) in self.0.iter().zip(vals) {
            slot.fetch_add(v, Ordering::Relaxed);
        }
    }

    fn load(&self) -> PhaseCounters {
        let v: Vec<u64> = self.0.iter().map(|a| a.load(Ordering::Relaxed)).collect();
        PhaseCounters {
            llm_calls: v[0],
            input_tokens: v[1],
            output_tokens: v[2],
            search_calls: v[3],
            scholar_calls: v[4],
            browser_tokens: v[5],
            code_calls: v[6],
            estimated_events: v[7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub phase: Phase,
    #[serde(flatten)]
    pub event: UsageEvent,
}

#[derive(Default)]
pub struct CostLedger {
    seeding: AtomicCounters,
    refinement: AtomicCounters,
    verification: AtomicCounters,
    log: Mutex<Vec<LoggedEvent>>,
}

pub type LedgerSnapshot = BTreeMap<Phase, PhaseCounters>;

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn counters(&self, phase: Phase) -> &AtomicCounters {
        match phase {
            Phase::Seeding => &self.seeding,
            Phase::Refinement => &self.refinement,
            Phase::Verification => &self.verification,
        }
    }

    /// Add an event. No deduplication: recording the same event twice
    /// counts it twice.
    pub fn record(&self, phase: Phase, event: &UsageEvent) -> Result<(), LedgerError> {
        event.validate()?;
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        self.counters(phase).add(event);
        log.push(LoggedEvent {
            phase,
            event: event.clone(),
        });
        Ok(())
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        Phase::ALL
            .into_iter()
            .map(|p| (p, self.counters(p).load()))
            .collect()
    }

    pub fn events(&self) -> Vec<LoggedEvent> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Rebuild a ledger from an audit log.
    pub fn replay(events: &[LoggedEvent]) -> Result<Self, LedgerError> {
        let ledger = Self::new();
        for e in events {
            ledger.record(e.phase, &e.event)?;
        }
        Ok(ledger)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    /// Label recorded in run manifests.
    pub preset: String,
    pub input_token_rate: f64,
    pub output_token_rate: f64,
    pub search_call_rate: f64,
    pub scholar_call_rate: f64,
    pub browser_token_rate: f64,
}

impl Default for PriceTable {
    fn default() -> Self {
        Self::as_listed()
    }
}

impl PriceTable {
    /// Browser reader billed at $0.00005 per token, the listed per-token rate.
    pub fn as_listed() -> Self {
        Self {
            preset: "as-listed".into(),
            input_token_rate: 0.56e-6,
            output_token_rate: 1.68e-6,
            search_call_rate: 0.00275,
            scholar_call_rate: 0.00275,
            browser_token_rate: 0.00005,
        }
    }

    /// Same as [`PriceTable::as_listed`] but the browser rate read as
    /// $0.00005 per thousand tokens, which is what the published per-call
    /// browser totals imply.
    pub fn per_1k_browser() -> Self {
        Self {
            preset: "per-1k-browser".into(),
            browser_token_rate: 0.00005 / 1000.0,
            ..Self::as_listed()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "as-listed" => Some(Self::as_listed()),
            "per-1k-browser" => Some(Self::per_1k_browser()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        for (name, v) in [
            ("input_token_rate", self.input_token_rate),
            ("output_token_rate", self.output_token_rate),
            ("search_call_rate", self.search_call_rate),
            ("scholar_call_rate", self.scholar_call_rate),
            ("browser_token_rate", self.browser_token_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LedgerError::InvalidPrice(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub llm: f64,
    pub search: f64,
    pub scholar: f64,
    pub browser: f64,
    /// Always zero: code runs locally.
    pub code: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub preset: String,
    pub phases: BTreeMap<Phase, PhaseCost>,
    pub grand_total: f64,
}

pub fn phase_cost(c: &PhaseCounters, prices: &PriceTable) -> PhaseCost {
    let llm = c.input_tokens as f64 * prices.input_token_rate
        + c.output_tokens as f64 * prices.output_token_rate;
    let search = c.search_calls as f64 * prices.search_call_rate;
    let scholar = c.scholar_calls as f64 * prices.scholar_call_rate;
    let browser = c.browser_tokens as f64 * prices.browser_token_rate;
    PhaseCost {
        llm,
        search,
        scholar,
        browser,
        code: 0.0,
        total: llm + search + scholar + browser,
    }
}

pub fn total_cost(snapshot: &LedgerSnapshot, prices: &PriceTable) -> Result<CostReport, LedgerError> {
    prices.validate()?;
    let phases: BTreeMap<Phase, PhaseCost> = snapshot
        .iter()
        .map(|(p, c)| (*p, phase_cost(c, prices)))
        .collect();
    let grand_total = phases.values().map(|c| c.total).sum();
    Ok(CostReport {
        preset: prices.preset.clone(),
        phases,
        grand_total,
    })
}

/// Cost per verified data point when only `success_rate` of candidates pass.
pub fn amortized_cost(verified_cost: f64, success_rate: f64) -> Result<f64, LedgerError> {
    if !(success_rate > 0.0 && success_rate <= 1.0) {
        return Err(LedgerError::InvalidSuccessRate(success_rate));
    }
    Ok(verified_cost / success_rate)
}
