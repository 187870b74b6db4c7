//! Attack drivers. Each returns a typed result; `to_report` renders the
//! shared report envelope.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{revert_grant_lower_bound, ChainParams, RevertModel};
use crate::discovery::{run_selection_experiment, SelectionReport};
use crate::exec::{fold_trials, trial_seed};
use crate::facilitator::{FacilitatorConfig, FacilitatorMode};
use crate::metrics::{
    self, grant_count, latency_samples, leak_counts, mutation_counts, names, premature_report_counts,
    revert_grant_counts, settlement_count, LatencyReport, LatencySamples,
};
use crate::model::{Millis, SignatureMode};
use crate::server::{ExecutionPolicy, Mitigations, RejectReason, ServerConfig};
use crate::settlement::{ContractKind, Permit2Config};
use crate::stats::RateEstimate;
use crate::trace::{Actor, Event, Trace};
use crate::web::{CachePolicy, Intermediary, PathConfig, PathDelays};

use super::report::{Check, ExperimentReport, Metric, Row};
use super::world::{AttackerConfig, ClientConfig, Parties, World, WorldConfig, CLIENT_FUNDS};
use super::{ExperimentConfig, HarnessError};

pub const RESOURCE: &str = "/weather";
pub const PRICE: u64 = 10_000;
/// Unpaid proxy probes start after the warm-up grant has certainly landed.
const PROBE_START_MS: Millis = 120_000;

pub fn parties() -> Parties {
    Parties::new(2, SignatureMode::WellFormed)
}

/// Builder for one world configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub policy: ExecutionPolicy,
    pub k: u32,
    pub mode: FacilitatorMode,
    pub contract: ContractKind,
    pub mitigations: Mitigations,
    pub chain: ChainParams,
    pub delays: PathDelays,
    pub intermediaries: Vec<Intermediary>,
    pub client: ClientConfig,
    pub attacker: Option<AttackerConfig>,
}

impl Scenario {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Scenario {
            policy: ExecutionPolicy::Conservative,
            k: 3,
            mode: FacilitatorMode::Honest,
            contract: ContractKind::Eip3009,
            mitigations: Mitigations::default(),
            chain: cfg.chain,
            delays: cfg.delays,
            intermediaries: Vec::new(),
            client: ClientConfig::default(),
            attacker: None,
        }
    }

    pub fn world_config(&self, cfg: &ExperimentConfig, parties: &Parties) -> WorldConfig {
        let k_report = self.k.max(1);
        WorldConfig {
            chain: self.chain,
            server: ServerConfig {
                policy: self.policy,
                k: self.k,
                mitigations: self.mitigations,
                claim_ttl_ms: cfg.claim_ttl_ms,
                freshness_window_ms: cfg.freshness_window_ms,
                price_table: parties.price_table(&[RESOURCE], PRICE),
                replay_status_402: false,
                facilitator: Some(parties.facilitator),
            },
            facilitator: FacilitatorConfig {
                mode: self.mode,
                k_report,
                verify_latency_ms: cfg.verify_latency_ms,
                contract: self.contract,
                freshness_window_ms: cfg.freshness_window_ms,
            },
            path: PathConfig {
                delays: self.delays,
                intermediaries: self.intermediaries.clone(),
            },
            client: self.client,
            attacker: self.attacker,
            watch_depth: k_report as u64,
        }
    }

    /// Time from broadcast to the server's grant decision on the verify path.
    pub fn grant_lag_ms(&self, cfg: &ExperimentConfig) -> Millis {
        cfg.verify_latency_ms + self.delays.f_to_r + self.delays.delta
    }
}

// ---------------------------------------------------------------- attack 1a

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevertCell {
    pub scenario: String,
    pub policy: ExecutionPolicy,
    pub facilitator: FacilitatorMode,
    pub revert_model: RevertModel,
    pub k: u32,
    pub p_reorg: f64,
    pub delta_ms: Millis,
    /// Broadcast-to-grant lag `Δ`.
    pub grant_lag_ms: Millis,
    pub rgp: RateEstimate,
    /// Lower bound on `rgp` for early-grant cells.
    pub bound: Option<f64>,
    pub premature_reports: RateEstimate,
    pub latency: LatencyReport,
}

impl RevertCell {
    /// `rgp ≥ bound − half-width`; `None` when no bound applies.
    pub fn meets_bound(&self) -> Option<bool> {
        self.bound.map(|b| self.rgp.point >= b - self.rgp.half_width())
    }

    fn row(&self) -> Row {
        let mut r = Row::new(self.scenario.clone())
            .param("policy", self.policy)
            .param("facilitator", self.facilitator)
            .param("k", self.k)
            .param("p_reorg", self.p_reorg)
            .param("delta_ms", self.delta_ms)
            .param("grant_lag_ms", self.grant_lag_ms)
            .metric(names::RGP, Metric::Rate(self.rgp))
            .metric("premature_reports", Metric::Rate(self.premature_reports))
            .metric(names::L_GRANT, Metric::Latency(self.latency.l_grant))
            .metric(names::T_GF, Metric::Latency(self.latency.t_gf));
        if let Some(b) = self.bound {
            r = r.metric("rgp_bound", Metric::Value(b));
        }
        r
    }
}

#[derive(Debug, Clone, Default)]
struct RevertAcc {
    reverted: u64,
    attempts: u64,
    premature: u64,
    settle_calls: u64,
    samples: LatencySamples,
    error: Option<HarnessError>,
}

impl RevertAcc {
    fn merge(mut self, other: RevertAcc) -> RevertAcc {
        self.reverted += other.reverted;
        self.attempts += other.attempts;
        self.premature += other.premature;
        self.settle_calls += other.settle_calls;
        self.samples.extend(other.samples);
        self.error = self.error.or(other.error);
        self
    }
}

/// One paid request per trial; returns the trial's trace.
pub fn revert_trial(wc: &WorldConfig, parties: &Parties, seed: u64, nonce: u64) -> Result<Trace, HarnessError> {
    let mut w = World::new(wc.clone(), parties, seed)?;
    let pp = w.payment(0, RESOURCE, nonce, 0);
    w.send(0, 0, RESOURCE, Some(&pp));
    w.run()?;
    Ok(w.trace)
}

/// Runs `trials` independent single-payment worlds and folds the metrics.
pub fn run_revert_cell(
    cfg: &ExperimentConfig,
    parties: &Parties,
    label: &str,
    sc: &Scenario,
    trials: u64,
    with_bound: bool,
) -> Result<RevertCell, HarnessError> {
    let wc = sc.world_config(cfg, parties);
    World::new(wc.clone(), parties, 0)?;
    let k = sc.k;
    let acc = fold_trials(
        cfg.exec,
        trials,
        RevertAcc::default(),
        |i| match revert_trial(&wc, parties, trial_seed(cfg.base_seed, i), i) {
            Ok(trace) => {
                let (reverted, attempts) = revert_grant_counts(&trace, k);
                let (premature, settle_calls) = premature_report_counts(&trace);
                RevertAcc {
                    reverted,
                    attempts,
                    premature,
                    settle_calls,
                    samples: latency_samples(&trace, k),
                    error: None,
                }
            }
            Err(e) => RevertAcc {
                error: Some(e),
                ..Default::default()
            },
        },
        RevertAcc::merge,
    );
    if let Some(e) = acc.error {
        return Err(e);
    }
    let lag = sc.grant_lag_ms(cfg);
    Ok(RevertCell {
        scenario: label.to_string(),
        policy: sc.policy,
        facilitator: sc.mode,
        revert_model: sc.chain.revert_model,
        k,
        p_reorg: sc.chain.p_reorg,
        delta_ms: sc.delays.delta,
        grant_lag_ms: lag,
        rgp: RateEstimate::new(acc.reverted, acc.attempts),
        bound: with_bound.then(|| revert_grant_lower_bound(&sc.chain, k, lag as f64)),
        premature_reports: RateEstimate::new(acc.premature, acc.settle_calls),
        latency: LatencyReport::from_samples(&acc.samples),
    })
}

/// Optimistic server with an honest facilitator over the full grid.
pub fn revert_grid(cfg: &ExperimentConfig) -> Result<Vec<RevertCell>, HarnessError> {
    let parties = parties();
    let mut out = Vec::new();
    for &k in &cfg.grid.k {
        for &p in &cfg.grid.p_reorg {
            for &delta in &cfg.grid.delta_ms {
                let mut sc = Scenario::new(cfg);
                sc.policy = ExecutionPolicy::Optimistic;
                sc.k = k;
                sc.chain.p_reorg = p;
                sc.chain.revert_model = RevertModel::Analytic;
                sc.delays.delta = delta;
                out.push(run_revert_cell(cfg, &parties, "optimistic-honest", &sc, cfg.trials, true)?);
            }
        }
    }
    Ok(out)
}

/// Control rows: conservative + honest with reorgs shallower than `k`, and
/// optimistic + always-lying byzantine facilitator.
pub fn revert_controls(cfg: &ExperimentConfig) -> Result<Vec<RevertCell>, HarnessError> {
    let parties = parties();
    let delta = cfg.grid.delta_ms[0];
    let mut out = Vec::new();
    for &k in cfg.grid.k.iter().filter(|&&k| k >= 1) {
        for &p in &cfg.grid.p_reorg {
            let mut sc = Scenario::new(cfg);
            sc.policy = ExecutionPolicy::Conservative;
            sc.k = k;
            sc.chain.p_reorg = p;
            sc.chain.revert_model = RevertModel::BranchInjector { max_depth: k - 1 };
            sc.delays.delta = delta;
            out.push(run_revert_cell(cfg, &parties, "conservative-honest", &sc, cfg.control_trials, false)?);
        }
    }
    for &k in &cfg.grid.k {
        for &p in &cfg.grid.p_reorg {
            let mut sc = Scenario::new(cfg);
            sc.policy = ExecutionPolicy::Optimistic;
            sc.k = k;
            sc.mode = FacilitatorMode::Byzantine { mu: 1.0 };
            sc.chain.p_reorg = p;
            sc.delays.delta = delta;
            out.push(run_revert_cell(cfg, &parties, "optimistic-byzantine", &sc, cfg.control_trials, false)?);
        }
    }
    Ok(out)
}

/// Conservative server, byzantine facilitator, analytic reorgs: the rate of
/// grants without durable `k`-final settlement.
pub fn auth_check(cfg: &ExperimentConfig) -> Result<RevertCell, HarnessError> {
    let parties = parties();
    let mut sc = Scenario::new(cfg);
    sc.policy = ExecutionPolicy::Conservative;
    sc.k = cfg.auth_k;
    sc.mode = FacilitatorMode::Byzantine { mu: cfg.byzantine_mu };
    sc.chain.p_reorg = cfg.auth_p_reorg;
    sc.chain.revert_model = RevertModel::Analytic;
    let mut cell = run_revert_cell(cfg, &parties, "conservative-byzantine", &sc, cfg.auth_trials, false)?;
    cell.bound = Some(cfg.byzantine_mu * cfg.auth_p_reorg);
    Ok(cell)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attack1aResult {
    pub grid: Vec<RevertCell>,
    pub controls: Vec<RevertCell>,
}

impl Attack1aResult {
    pub fn to_report(&self, cfg: &ExperimentConfig) -> ExperimentReport {
        let mut rep = ExperimentReport::new("1a", cfg);
        for c in self.grid.iter().chain(&self.controls) {
            rep.rows.push(c.row());
        }
        for c in &self.grid {
            rep.checks.push(Check {
                name: format!("rgp_bound k={} p={} delta={}", c.k, c.p_reorg, c.delta_ms),
                pass: c.meets_bound().unwrap_or(true),
                measured: c.rgp.point,
                bound: c.bound,
                slack: Some(c.rgp.half_width()),
                detail: format!("{}/{}", c.rgp.successes, c.rgp.trials),
            });
        }
        for c in &self.controls {
            let expect = if c.scenario == "conservative-honest" { 0.0 } else { 1.0 };
            rep.checks.push(Check {
                name: format!("{} k={} p={}", c.scenario, c.k, c.p_reorg),
                pass: c.rgp.point == expect,
                measured: c.rgp.point,
                bound: Some(expect),
                slack: None,
                detail: format!("{}/{}", c.rgp.successes, c.rgp.trials),
            });
        }
        rep.notes.push(
            "rgp is measured against p_reorg * P(T_inc + k*T_b > grant_lag); the measured value rises toward \
             p_reorg as the bound's inclusion term grows, so a larger delta lowers the bound but not the measurement"
                .into(),
        );
        rep
    }
}

pub fn run_attack_1a(cfg: &ExperimentConfig) -> Result<Attack1aResult, HarnessError> {
    cfg.validate()?;
    Ok(Attack1aResult {
        grid: revert_grid(cfg)?,
        controls: revert_controls(cfg)?,
    })
}

// ---------------------------------------------------------------- attack 1b

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreemptionScenario {
    Eip3009,
    Permit2Unbound,
    Permit2CallerBound,
}

impl PreemptionScenario {
    pub const ALL: [PreemptionScenario; 3] = [
        PreemptionScenario::Eip3009,
        PreemptionScenario::Permit2Unbound,
        PreemptionScenario::Permit2CallerBound,
    ];

    pub fn caller_bound(self) -> bool {
        self == PreemptionScenario::Permit2CallerBound
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreemptionRun {
    pub scenario: PreemptionScenario,
    pub offset_ms: Millis,
    pub attacker_first: bool,
    pub preempted: bool,
    pub payer_charged: bool,
    pub client_status: u16,
    pub settlements: u64,
    pub grants: u64,
    pub attacker_outcome: Option<String>,
    pub honest_settle_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attack1bResult {
    pub runs: Vec<PreemptionRun>,
}

impl Attack1bResult {
    pub fn to_report(&self, cfg: &ExperimentConfig) -> ExperimentReport {
        let mut rep = ExperimentReport::new("1b", cfg);
        for r in &self.runs {
            rep.rows.push(
                Row::new("preemption")
                    .param("contract", r.scenario)
                    .param("offset_ms", r.offset_ms)
                    .metric("attacker_first", Metric::Flag(r.attacker_first))
                    .metric("preempted", Metric::Flag(r.preempted))
                    .metric("payer_charged", Metric::Flag(r.payer_charged))
                    .metric("client_status", Metric::Count(r.client_status as u64))
                    .metric("settlements", Metric::Count(r.settlements))
                    .metric("grants", Metric::Count(r.grants))
                    .metric(
                        "attacker_outcome",
                        Metric::Text(r.attacker_outcome.clone().unwrap_or_default()),
                    )
                    .metric(
                        "honest_settle_error",
                        Metric::Text(r.honest_settle_error.clone().unwrap_or_default()),
                    ),
            );
        }
        for s in PreemptionScenario::ALL {
            let runs: Vec<_> = self.runs.iter().filter(|r| r.scenario == s).collect();
            let (name, ok, n) = if s.caller_bound() {
                let ok = runs
                    .iter()
                    .filter(|r| r.attacker_outcome.as_deref() == Some("caller_mismatch") && r.client_status == 200)
                    .count();
                ("caller_bound_blocks_attacker", ok, runs.len())
            } else {
                let first: Vec<_> = runs.iter().filter(|r| r.attacker_first).collect();
                let ok = first
                    .iter()
                    .filter(|r| r.settlements == 1 && r.grants == 0 && r.client_status == 402)
                    .count();
                ("attacker_first_preempts", ok, first.len())
            };
            rep.checks.push(Check {
                name: format!("{name} {}", serde_json::to_value(s).unwrap().as_str().unwrap()),
                pass: n > 0 && ok == n,
                measured: ok as f64,
                bound: Some(n as f64),
                slack: None,
                detail: format!("{ok}/{n}"),
            });
        }
        rep
    }
}

pub fn preemption_run(
    cfg: &ExperimentConfig,
    parties: &Parties,
    scenario: PreemptionScenario,
    offset_ms: Millis,
) -> Result<PreemptionRun, HarnessError> {
    let mut sc = Scenario::new(cfg);
    // Settle-before-grant: the grant waits for the first confirmation.
    sc.policy = ExecutionPolicy::Conservative;
    sc.k = 1;
    sc.chain.p_reorg = 0.0;
    sc.intermediaries = vec![Intermediary::Observer];
    sc.attacker = Some(AttackerConfig {
        submit_offset_ms: offset_ms,
    });
    sc.contract = match scenario {
        PreemptionScenario::Eip3009 => ContractKind::Eip3009,
        PreemptionScenario::Permit2Unbound => ContractKind::Permit2(Permit2Config::UNBOUND),
        PreemptionScenario::Permit2CallerBound => ContractKind::Permit2(Permit2Config::CALLER_BOUND),
    };
    sc.client.bind_facilitator = scenario.caller_bound();
    let mut w = World::new(sc.world_config(cfg, parties), parties, cfg.base_seed)?;
    let pp = w.payment(0, RESOURCE, 1, 0);
    let req = w.send(0, 0, RESOURCE, Some(&pp));
    w.run()?;

    let mut first_actor = None;
    let mut attacker_outcome = None;
    let mut honest_settle_error = None;
    for e in w.trace.iter() {
        if let Event::Settlement { outcome, .. } = &e.event {
            first_actor.get_or_insert(e.actor);
            match e.actor {
                Actor::Attacker => attacker_outcome = Some(outcome.clone()),
                Actor::Facilitator if outcome != "applied" => honest_settle_error = Some(outcome.clone()),
                _ => {}
            }
        }
    }
    let client = w.parties().clients[0].address();
    Ok(PreemptionRun {
        scenario,
        offset_ms,
        attacker_first: first_actor == Some(Actor::Attacker),
        preempted: metrics::e_preempt(&w.trace, &pp.payment_id),
        payer_charged: w.ledger.balance_of(&client) < CLIENT_FUNDS,
        client_status: w
            .responses
            .get(&req)
            .map(|r| r.status)
            .ok_or_else(|| HarnessError::Invariant("client got no response".into()))?,
        settlements: settlement_count(&w.trace, &pp.payment_id),
        grants: grant_count(&w.trace, &pp.payment_id),
        attacker_outcome,
        honest_settle_error,
    })
}

pub fn run_attack_1b(cfg: &ExperimentConfig) -> Result<Attack1bResult, HarnessError> {
    cfg.validate()?;
    let parties = parties();
    let mut runs = Vec::new();
    for s in PreemptionScenario::ALL {
        for &off in &cfg.race_offsets_ms {
            runs.push(preemption_run(cfg, &parties, s, off)?);
        }
    }
    Ok(Attack1bResult { runs })
}

// ---------------------------------------------------------------- attack 2

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayCell {
    pub policy: ExecutionPolicy,
    pub idempotency: bool,
    pub n: u32,
    pub dgr: u64,
    pub settlements: u64,
    pub rejections: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayWindowResult {
    pub repetitions: u64,
    pub replays_per_repetition: u32,
    /// Repetitions whose original payment was granted exactly once.
    pub single_grant_runs: u64,
    /// Grants to replays arriving in `(t, t + TTL]` after the original claim.
    pub replay_grants: u64,
    pub replays_in_window: u64,
    pub rejected_replay: u64,
    pub rejected_stale: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreconsumedResult {
    pub n: u32,
    pub grants: u64,
    pub settlements: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attack2Result {
    pub cells: Vec<ReplayCell>,
    pub window: ReplayWindowResult,
    pub preconsumed: PreconsumedResult,
}

impl Attack2Result {
    pub fn to_report(&self, cfg: &ExperimentConfig) -> ExperimentReport {
        let mut rep = ExperimentReport::new("2", cfg);
        for c in &self.cells {
            rep.rows.push(
                Row::new("barrier-replay")
                    .param("policy", c.policy)
                    .param("idempotency", c.idempotency)
                    .param("n", c.n)
                    .metric(names::DGR, Metric::Count(c.dgr))
                    .metric("settlements", Metric::Count(c.settlements))
                    .metric("rejections", Metric::Count(c.rejections)),
            );
            let (expect, why) = match (c.idempotency, c.policy) {
                (true, _) => (1, "claim store"),
                (false, ExecutionPolicy::Optimistic) => (c.n as u64, "no check"),
                (false, _) => (1, "nonce consumed at settlement"),
            };
            rep.checks.push(Check {
                name: format!("dgr policy={:?} m3={} n={}", c.policy, c.idempotency, c.n),
                pass: c.dgr == expect,
                measured: c.dgr as f64,
                bound: Some(expect as f64),
                slack: None,
                detail: why.into(),
            });
        }
        let w = &self.window;
        rep.rows.push(
            Row::new("replay-window")
                .param("repetitions", w.repetitions)
                .param("replays_per_repetition", w.replays_per_repetition)
                .metric("single_grant_runs", Metric::Count(w.single_grant_runs))
                .metric("replay_grants", Metric::Count(w.replay_grants))
                .metric("replays_in_window", Metric::Count(w.replays_in_window))
                .metric("rejected_replay", Metric::Count(w.rejected_replay))
                .metric("rejected_stale", Metric::Count(w.rejected_stale)),
        );
        rep.checks.push(Check {
            name: "replay window".into(),
            pass: w.replay_grants == 0 && w.single_grant_runs == w.repetitions,
            measured: w.replay_grants as f64,
            bound: Some(0.0),
            slack: None,
            detail: format!("{} single-grant runs of {}", w.single_grant_runs, w.repetitions),
        });
        let p = &self.preconsumed;
        rep.rows.push(
            Row::new("preconsumed-nonce")
                .param("n", p.n)
                .metric("grants", Metric::Count(p.grants))
                .metric("settlements", Metric::Count(p.settlements)),
        );
        rep.checks.push(Check {
            name: "grant without settlement".into(),
            pass: p.grants == p.n as u64 && p.settlements == 0,
            measured: p.grants as f64,
            bound: Some(p.n as f64),
            slack: None,
            detail: format!("settlements {}", p.settlements),
        });
        rep
    }
}

fn replay_scenario(cfg: &ExperimentConfig, policy: ExecutionPolicy, m3: bool) -> Scenario {
    let mut sc = Scenario::new(cfg);
    sc.policy = policy;
    sc.k = if policy == ExecutionPolicy::Optimistic { cfg.auth_k } else { 1 };
    sc.chain.p_reorg = 0.0;
    sc.mitigations.m3_idempotency = m3;
    sc
}

/// `n` copies of one payment released at the same instant.
pub fn barrier_replay(
    cfg: &ExperimentConfig,
    parties: &Parties,
    policy: ExecutionPolicy,
    m3: bool,
    n: u32,
) -> Result<ReplayCell, HarnessError> {
    let sc = replay_scenario(cfg, policy, m3);
    let mut w = World::new(sc.world_config(cfg, parties), parties, cfg.base_seed)?;
    let pp = w.payment(0, RESOURCE, 7, 0);
    for _ in 0..n {
        w.send(0, 0, RESOURCE, Some(&pp));
    }
    w.run()?;
    Ok(ReplayCell {
        policy,
        idempotency: m3,
        n,
        dgr: metrics::dgr(&w.trace, &pp.payment_id),
        settlements: settlement_count(&w.trace, &pp.payment_id),
        rejections: w.responses.values().filter(|r| r.status != 200).count() as u64,
    })
}

#[derive(Debug, Clone, Default)]
struct WindowAcc {
    single: u64,
    replay_grants: u64,
    in_window: u64,
    rejected_replay: u64,
    rejected_stale: u64,
    error: Option<HarnessError>,
}

/// Original payment at `t = 0`, then replays at seeded times whose arrival
/// falls in `(t_claim, t_claim + TTL]`.
pub fn replay_window(cfg: &ExperimentConfig) -> Result<ReplayWindowResult, HarnessError> {
    let parties = parties();
    let sc = replay_scenario(cfg, ExecutionPolicy::Optimistic, true);
    let wc = sc.world_config(cfg, &parties);
    World::new(wc.clone(), &parties, 0)?;
    let ttl = cfg.claim_ttl_ms;
    let per = cfg.replays_per_repetition;
    let one = |i: u64| -> Result<WindowAcc, HarnessError> {
        let seed = trial_seed(cfg.base_seed, i);
        let mut w = World::new(wc.clone(), &parties, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pp = w.payment(0, RESOURCE, i, 0);
        let original = w.send(0, 0, RESOURCE, Some(&pp));
        let mut replays = Vec::new();
        for _ in 0..per {
            let at = rng.random_range(1..=ttl);
            replays.push(w.send(at, 0, RESOURCE, Some(&pp)));
        }
        w.run()?;
        let claim_at = w
            .trace
            .iter()
            .find_map(|e| match &e.event {
                Event::Grant(g) if g.req_id == original => Some(g.grant_time),
                _ => None,
            })
            .ok_or_else(|| HarnessError::Invariant("original payment was not granted".into()))?;
        let sent: BTreeMap<u64, Millis> = w
            .trace
            .iter()
            .filter_map(|e| match &e.event {
                Event::RequestSent { req_id, .. } => Some((*req_id, e.t)),
                _ => None,
            })
            .collect();
        let c_to_r = sc.delays.c_to_r;
        let mut acc = WindowAcc::default();
        for e in w.trace.iter() {
            match &e.event {
                Event::Grant(g) if g.req_id != original => {
                    let arrive = sent[&g.req_id] + c_to_r;
                    if arrive > claim_at && arrive <= claim_at + ttl {
                        acc.replay_grants += 1;
                    }
                }
                Event::Respond {
                    req_id,
                    reason: Some(reason),
                    ..
                } if *req_id != original => match reason {
                    RejectReason::Replay => acc.rejected_replay += 1,
                    RejectReason::Stale => acc.rejected_stale += 1,
                    _ => {}
                },
                _ => {}
            }
        }
        acc.in_window = replays
            .iter()
            .filter(|r| {
                let arrive = sent[r] + c_to_r;
                arrive > claim_at && arrive <= claim_at + ttl
            })
            .count() as u64;
        acc.single = u64::from(grant_count(&w.trace, &pp.payment_id) == 1);
        Ok(acc)
    };
    let acc = fold_trials(
        cfg.exec,
        cfg.replay_repetitions,
        WindowAcc::default(),
        |i| one(i).unwrap_or_else(|e| WindowAcc {
            error: Some(e),
            ..Default::default()
        }),
        |a, b| WindowAcc {
            single: a.single + b.single,
            replay_grants: a.replay_grants + b.replay_grants,
            in_window: a.in_window + b.in_window,
            rejected_replay: a.rejected_replay + b.rejected_replay,
            rejected_stale: a.rejected_stale + b.rejected_stale,
            error: a.error.or(b.error),
        },
    );
    if let Some(e) = acc.error {
        return Err(e);
    }
    Ok(ReplayWindowResult {
        repetitions: cfg.replay_repetitions,
        replays_per_repetition: per,
        single_grant_runs: acc.single,
        replay_grants: acc.replay_grants,
        replays_in_window: acc.in_window,
        rejected_replay: acc.rejected_replay,
        rejected_stale: acc.rejected_stale,
    })
}

/// The payer's nonce is spent by an earlier sibling authorization before
/// `n` copies of the payment reach an optimistic server without the claim
/// store.
pub fn preconsumed_nonce(cfg: &ExperimentConfig, n: u32) -> Result<PreconsumedResult, HarnessError> {
    let parties = parties();
    let sc = replay_scenario(cfg, ExecutionPolicy::Optimistic, false);
    let mut w = World::new(sc.world_config(cfg, &parties), &parties, cfg.base_seed)?;
    let pp = w.payment(0, RESOURCE, 9, 1);
    let sibling = w.payment(0, RESOURCE, 9, 0);
    let payer = parties.clients[0].address();
    w.direct_settle(0, sibling, payer, Actor::Client);
    for _ in 0..n {
        w.send(0, 0, RESOURCE, Some(&pp));
    }
    w.run()?;
    Ok(PreconsumedResult {
        n,
        grants: grant_count(&w.trace, &pp.payment_id),
        settlements: settlement_count(&w.trace, &pp.payment_id),
    })
}

pub fn run_attack_2(cfg: &ExperimentConfig) -> Result<Attack2Result, HarnessError> {
    cfg.validate()?;
    let parties = parties();
    let mut cells = Vec::new();
    for policy in [ExecutionPolicy::Optimistic, ExecutionPolicy::Conservative] {
        for m3 in [false, true] {
            for &n in &cfg.grid.n {
                cells.push(barrier_replay(cfg, &parties, policy, m3, n)?);
            }
        }
    }
    let n_max = cfg.grid.n.iter().copied().max().expect("validated non-empty");
    Ok(Attack2Result {
        cells,
        window: replay_window(cfg)?,
        preconsumed: preconsumed_nonce(cfg, n_max)?,
    })
}

// ---------------------------------------------------------------- attack 3

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyKind {
    Caching,
    PassThrough,
    Mitm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyCell {
    pub proxy: ProxyKind,
    pub m5: bool,
    pub requests: u64,
    pub leak: RateEstimate,
    pub mutation: RateEstimate,
    /// Responses with status 200 among the probe requests.
    pub ok_responses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attack3Result {
    pub cells: Vec<ProxyCell>,
}

impl Attack3Result {
    pub fn cell(&self, proxy: ProxyKind, m5: bool) -> Option<&ProxyCell> {
        self.cells.iter().find(|c| c.proxy == proxy && c.m5 == m5)
    }

    pub fn to_report(&self, cfg: &ExperimentConfig) -> ExperimentReport {
        let mut rep = ExperimentReport::new("3", cfg);
        for c in &self.cells {
            rep.rows.push(
                Row::new("proxy")
                    .param("proxy", c.proxy)
                    .param("m5", c.m5)
                    .param("requests", c.requests)
                    .metric(names::LEAK_RATE, Metric::Rate(c.leak))
                    .metric(names::MUTATION_RATE, Metric::Rate(c.mutation))
                    .metric("ok_responses", Metric::Count(c.ok_responses)),
            );
        }
        rep
    }
}

pub fn proxy_cell(cfg: &ExperimentConfig, parties: &Parties, proxy: ProxyKind, m5: bool) -> Result<ProxyCell, HarnessError> {
    let mut sc = Scenario::new(cfg);
    sc.k = 1;
    sc.chain.p_reorg = 0.0;
    sc.mitigations.m5_cache_control = m5;
    sc.intermediaries = vec![match proxy {
        ProxyKind::Caching => Intermediary::SharedCache {
            policy: CachePolicy::Caching,
        },
        ProxyKind::PassThrough => Intermediary::SharedCache {
            policy: CachePolicy::PassThrough,
        },
        ProxyKind::Mitm => Intermediary::MitmDuplicateHeader {
            activation_rate: 1.0,
            injected_value: "aW5qZWN0ZWQ=".into(),
        },
    }];
    let mut w = World::new(sc.world_config(cfg, parties), parties, cfg.base_seed)?;
    let n = cfg.proxy_requests;
    let probes: Vec<u64> = if proxy == ProxyKind::Mitm {
        (0..n)
            .map(|i| {
                let pp = w.payment(0, RESOURCE, 1_000 + i, 0);
                w.send(i * 10, 0, RESOURCE, Some(&pp))
            })
            .collect()
    } else {
        // A paying client fills the cache, then a second client probes
        // without paying.
        let pp = w.payment(0, RESOURCE, 1, 0);
        w.send(0, 0, RESOURCE, Some(&pp));
        (0..n).map(|i| w.send(PROBE_START_MS + i * 10, 1, RESOURCE, None)).collect()
    };
    w.run()?;
    let (leaks, unpaid) = leak_counts(&w.trace);
    let (mutated, total) = mutation_counts(&w.trace);
    Ok(ProxyCell {
        proxy,
        m5,
        requests: n,
        leak: RateEstimate::new(leaks, unpaid),
        mutation: RateEstimate::new(mutated, total),
        ok_responses: probes
            .iter()
            .filter(|id| w.responses.get(id).map(|r| r.status) == Some(200))
            .count() as u64,
    })
}

pub fn run_attack_3(cfg: &ExperimentConfig) -> Result<Attack3Result, HarnessError> {
    cfg.validate()?;
    let parties = parties();
    let mut cells = Vec::new();
    for proxy in [ProxyKind::Caching, ProxyKind::PassThrough, ProxyKind::Mitm] {
        for m5 in [false, true] {
            cells.push(proxy_cell(cfg, &parties, proxy, m5)?);
        }
    }
    Ok(Attack3Result { cells })
}

// ---------------------------------------------------------------- attack 4

pub fn run_attack_4(cfg: &ExperimentConfig) -> Result<SelectionReport, HarnessError> {
    cfg.validate()?;
    run_selection_experiment(&cfg.discovery, &cfg.grid.r, cfg.base_seed, cfg.exec)
        .map_err(|e| HarnessError::Config(e.to_string()))
}

pub fn attack4_report(cfg: &ExperimentConfig, sel: &SelectionReport) -> ExperimentReport {
    let mut rep = ExperimentReport::new("4", cfg);
    rep.rows = sel.rows();
    rep.checks = sel.checks();
    rep
}
