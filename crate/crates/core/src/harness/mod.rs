//! Drivers that wire the parties into attack scenarios and theorem checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ChainParams;
use crate::discovery::SelectionConfig;
use crate::exec::ExecMode;
use crate::facilitator::DEFAULT_VERIFY_LATENCY_MS;
use crate::model::{Millis, DEFAULT_FRESHNESS_WINDOW_MS};
use crate::server::DEFAULT_CLAIM_TTL_MS;
use crate::web::PathDelays;

pub mod attacks;
pub mod report;
pub mod theorems;
pub mod world;

pub use attacks::{run_attack_1a, run_attack_1b, run_attack_2, run_attack_3, run_attack_4};
pub use report::{ExperimentReport, SCHEMA_VERSION};
pub use theorems::validate_theorems;

/// Base seed used when none is given.
pub const DEFAULT_SEED: u64 = 0x402;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "1a")]
    RevertGrant,
    #[serde(rename = "1b")]
    Preemption,
    #[serde(rename = "2")]
    Replay,
    #[serde(rename = "3")]
    Proxy,
    #[serde(rename = "4")]
    Discovery,
    #[serde(rename = "theorems")]
    Theorems,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub k: Vec<u32>,
    pub p_reorg: Vec<f64>,
    pub delta_ms: Vec<Millis>,
    /// Replay batch sizes.
    pub n: Vec<u32>,
    /// Sybil registration counts.
    pub r: Vec<u32>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            k: vec![0, 3, 6, 12],
            p_reorg: vec![0.0, 0.01, 0.05],
            delta_ms: vec![0, 100, 200, 400],
            n: vec![1, 5, 10, 50],
            r: vec![1, 3, 5],
        }
    }
}

/// Experiment settings. Every field has a default, so `{}` is a complete
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub attack: Option<AttackKind>,
    pub grid: Grid,
    /// Trials per revert-grant cell.
    pub trials: u64,
    /// Trials per control cell (conservative + honest, byzantine).
    pub control_trials: u64,
    /// Trials for the byzantine authorization check.
    pub auth_trials: u64,
    pub byzantine_mu: f64,
    pub auth_p_reorg: f64,
    pub auth_k: u32,
    /// Repetitions of the replay-window experiment.
    pub replay_repetitions: u64,
    /// Late replays sent per repetition.
    pub replays_per_repetition: u32,
    /// Requests per proxy scenario.
    pub proxy_requests: u64,
    /// Attacker submission offsets swept for the preemption race.
    pub race_offsets_ms: Vec<Millis>,
    pub base_seed: u64,
    pub chain: ChainParams,
    pub delays: PathDelays,
    pub verify_latency_ms: Millis,
    pub claim_ttl_ms: Millis,
    pub freshness_window_ms: Millis,
    /// Target error when choosing the finality depth k*.
    pub epsilon_target: f64,
    pub discovery: SelectionConfig,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            attack: None,
            grid: Grid::default(),
            trials: 100_000,
            control_trials: 10_000,
            auth_trials: 100_000,
            byzantine_mu: 0.5,
            auth_p_reorg: 0.05,
            auth_k: 3,
            replay_repetitions: 1_000,
            replays_per_repetition: 4,
            proxy_requests: 1_000,
            race_offsets_ms: (0..=20).map(|i| i * 10).collect(),
            base_seed: DEFAULT_SEED,
            chain: ChainParams::default(),
            delays: PathDelays::default(),
            verify_latency_ms: DEFAULT_VERIFY_LATENCY_MS,
            claim_ttl_ms: DEFAULT_CLAIM_TTL_MS,
            freshness_window_ms: DEFAULT_FRESHNESS_WINDOW_MS,
            epsilon_target: 1e-2,
            discovery: SelectionConfig::default(),
            exec: ExecMode::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        let g = &self.grid;
        if g.k.is_empty() || g.p_reorg.is_empty() || g.delta_ms.is_empty() || g.n.is_empty() || g.r.is_empty() {
            return bad("sweep grids must be non-empty");
        }
        if self.trials == 0
            || self.control_trials == 0
            || self.auth_trials == 0
            || self.replay_repetitions == 0
            || self.proxy_requests == 0
        {
            return bad("trial counts must be at least 1");
        }
        if g.n.contains(&0) {
            return bad("replay batch size must be at least 1");
        }
        if g.r.contains(&0) {
            return bad("sybil count must be at least 1");
        }
        if g.p_reorg.iter().chain([&self.auth_p_reorg]).any(|p| !(0.0..1.0).contains(p)) {
            return bad("p_reorg must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.byzantine_mu) {
            return bad("byzantine_mu must lie in [0, 1]");
        }
        if self.race_offsets_ms.is_empty() {
            return bad("race offsets must be non-empty");
        }
        if self.freshness_window_ms >= self.claim_ttl_ms {
            return bad("freshness window must be shorter than the claim TTL");
        }
        if !(self.epsilon_target > 0.0 && self.epsilon_target < 1.0) {
            return bad("epsilon_target must lie in (0, 1)");
        }
        self.chain.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.discovery.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Copy with every trial count replaced by `n`.
    pub fn with_trials(mut self, n: u64) -> Self {
        self.trials = n;
        self.control_trials = n;
        self.auth_trials = n;
        self.replay_repetitions = n;
        self.proxy_requests = n;
        self
    }
}
