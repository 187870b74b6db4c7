//! Simulated settlement chain: mempool, block production, confirmation
//! counting, reorgs and the analytic revert model.
//!
//! Time is a logical millisecond clock. Every broadcast transaction draws an
//! inclusion delay `T_inc` from the configured [`InclusionModel`]; the block
//! that includes it is mined at that instant, and further blocks follow every
//! `T_b` for as long as some included transaction still needs confirmations.
//! A transaction included at height `h` has `height − h + 1` confirmations.
//!
//! Under [`RevertModel::Analytic`] each broadcast also draws a revert depth
//! `D` with `P(D ≥ d) = p_reorg^d`. A transaction with `D ≥ 1` reaches `D`
//! confirmations and is reorged out when the next block arrives, so it is ever
//! observed `k`-final (for `k ≥ 1`) with probability `p_reorg^k`, and is
//! eventually reverted with probability `p_reorg`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Millis, TxHash};

/// Ceiling on analytic revert depth; only reached when `p_reorg == 1`.
pub const MAX_REVERT_DEPTH: u32 = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("transaction {0} was already broadcast")]
    DuplicateBroadcast(TxHash),
    #[error("invalid chain parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InclusionModel {
    /// Exponential with mean `T_b`, clamped at `cap_blocks · T_b`, rounded up
    /// to whole milliseconds.
    TruncatedExponential { cap_blocks: u32 },
    /// Constant delay.
    Fixed { delay_ms: Millis },
}

impl Default for InclusionModel {
    fn default() -> Self {
        InclusionModel::TruncatedExponential { cap_blocks: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RevertModel {
    /// Geometric revert depth drawn per transaction from `p_reorg`.
    #[default]
    Analytic,
    /// With probability `p_reorg`, a branch reorg of depth uniform in
    /// `[1, max_depth]` is injected once the transaction reaches that depth.
    BranchInjector { max_depth: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainParams {
    /// `T_b`, block interval in ms.
    pub block_interval_ms: Millis,
    pub p_reorg: f64,
    /// Exponential-finality constant for `ε_chain(k) = e^(−αk)`.
    pub alpha: f64,
    pub inclusion: InclusionModel,
    pub revert_model: RevertModel,
    pub seed: u64,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            block_interval_ms: 2000,
            p_reorg: 0.0,
            alpha: std::f64::consts::LN_10 / 2.5,
            inclusion: InclusionModel::default(),
            revert_model: RevertModel::Analytic,
            seed: 0,
        }
    }
}

impl ChainParams {
    pub fn validate(&self) -> Result<(), ChainError> {
        if self.block_interval_ms == 0 {
            return Err(ChainError::InvalidParams("block interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_reorg) {
            return Err(ChainError::InvalidParams("p_reorg must lie in [0, 1]".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ChainError::InvalidParams("alpha must be positive".into()));
        }
        if let InclusionModel::TruncatedExponential { cap_blocks: 0 } = self.inclusion {
            return Err(ChainError::InvalidParams("inclusion cap must be at least one block".into()));
        }
        Ok(())
    }
}

/// Draws one inclusion delay.
pub fn sample_inclusion_time<R: Rng + ?Sized>(params: &ChainParams, rng: &mut R) -> Millis {
    match params.inclusion {
        InclusionModel::Fixed { delay_ms } => delay_ms,
        InclusionModel::TruncatedExponential { cap_blocks } => {
            let tb = params.block_interval_ms as f64;
            let u: f64 = rng.random();
            // 1 − u lies in (0, 1], so the log is finite.
            let x = -tb * (1.0 - u).ln();
            let cap = tb * cap_blocks as f64;
            x.min(cap).ceil() as Millis
        }
    }
}

/// `P(T_inc > x)` under the declared inclusion model.
pub fn inclusion_survival(params: &ChainParams, x: f64) -> f64 {
    if x < 0.0 {
        return 1.0;
    }
    match params.inclusion {
        InclusionModel::Fixed { delay_ms } => {
            if (delay_ms as f64) > x {
                1.0
            } else {
                0.0
            }
        }
        InclusionModel::TruncatedExponential { cap_blocks } => {
            let tb = params.block_interval_ms as f64;
            if x >= tb * cap_blocks as f64 {
                0.0
            } else {
                (-x / tb).exp()
            }
        }
    }
}

/// Lower bound on the revert-grant probability of an early grant made `Δ`
/// after broadcast: `p_reorg · P(T_inc + k·T_b > Δ)`.
pub fn revert_grant_lower_bound(params: &ChainParams, k: u32, delta_ms: f64) -> f64 {
    let x = delta_ms - k as f64 * params.block_interval_ms as f64;
    params.p_reorg * inclusion_survival(params, x)
}

/// Probability that a settlement observed `k`-final is later reverted:
/// `p` at `k = 0`, `p^k` otherwise.
pub fn revert_probability(p_reorg: f64, k: u32) -> f64 {
    p_reorg.powi(k.max(1) as i32)
}

pub fn sample_revert<R: Rng + ?Sized>(rng: &mut R, p_reorg: f64, k: u32) -> bool {
    rng.random::<f64>() < revert_probability(p_reorg, k)
}

/// Geometric revert depth with `P(D ≥ d) = p^d`, from a uniform draw in
/// `[0, 1)`.
pub fn revert_depth_from_uniform(u: f64, p_reorg: f64) -> u32 {
    if p_reorg <= 0.0 || u >= p_reorg {
        return 0;
    }
    if p_reorg >= 1.0 || u <= 0.0 {
        return MAX_REVERT_DEPTH;
    }
    let d = (u.ln() / p_reorg.ln()).floor();
    if d >= MAX_REVERT_DEPTH as f64 {
        MAX_REVERT_DEPTH
    } else {
        d as u32
    }
}

/// `ε_chain(k) = e^(−αk)`.
pub fn epsilon_chain(alpha: f64, k: u32) -> f64 {
    (-alpha * k as f64).exp()
}

/// Smallest depth with `e^(−αk) ≤ ε`: `⌈α⁻¹ ln(1/ε)⌉`.
pub fn k_star(alpha: f64, epsilon: f64) -> u32 {
    assert!(alpha > 0.0 && epsilon > 0.0 && epsilon <= 1.0);
    let raw = (1.0 / epsilon).ln() / alpha;
    // Absorb float noise when the ratio is an integer in exact arithmetic.
    let snapped = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    snapped.max(0.0) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxStatus {
    Unknown,
    Mempool,
    Included { height: u64 },
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainEvent {
    Block { t: Millis, height: u64 },
    TxIncluded { t: Millis, tx: TxHash, height: u64 },
    TxDropped { t: Millis, tx: TxHash },
}

#[derive(Debug, Clone)]
struct Pending {
    /// Drops when confirmations would reach `depth + 1`.
    analytic_depth: u32,
    /// Branch reorg of this depth fires once confirmations reach it.
    branch_depth: u32,
}

/// One simulated chain. Single-threaded; owned by its simulation instance.
#[derive(Debug, Clone)]
pub struct Chain {
    params: ChainParams,
    rng: ChaCha8Rng,
    clock: Millis,
    height: u64,
    last_block_at: Millis,
    /// Scheduled inclusions, ordered by (time, broadcast order).
    schedule: BTreeSet<(Millis, u64, TxHash)>,
    mempool: BTreeSet<TxHash>,
    included: BTreeMap<TxHash, u64>,
    dropped: BTreeSet<TxHash>,
    pending: BTreeMap<TxHash, Pending>,
    broadcasts: u64,
    watch_depth: u64,
}

impl Chain {
    pub fn new(params: ChainParams) -> Result<Self, ChainError> {
        params.validate()?;
        Ok(Chain {
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            params,
            clock: 0,
            height: 0,
            last_block_at: 0,
            schedule: BTreeSet::new(),
            mempool: BTreeSet::new(),
            included: BTreeMap::new(),
            dropped: BTreeSet::new(),
            pending: BTreeMap::new(),
            broadcasts: 0,
            watch_depth: 1,
        })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn now(&self) -> Millis {
        self.clock
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    /// Blocks keep coming until every live included tx has this many
    /// confirmations.
    pub fn set_watch_depth(&mut self, depth: u64) {
        self.watch_depth = depth.max(1);
    }

    /// Submits `tx` at time `t` and returns its scheduled inclusion time.
    pub fn broadcast(&mut self, tx: TxHash, t: Millis) -> Result<Millis, ChainError> {
        if self.status(&tx) != TxStatus::Unknown {
            return Err(ChainError::DuplicateBroadcast(tx));
        }
        self.clock = self.clock.max(t);
        // Fixed draw order keeps streams aligned across parameter cells.
        let t_inc = sample_inclusion_time(&self.params, &mut self.rng);
        let u_revert: f64 = self.rng.random();
        let u_depth: f64 = self.rng.random();
        let pending = match self.params.revert_model {
            RevertModel::Analytic => Pending {
                analytic_depth: revert_depth_from_uniform(u_revert, self.params.p_reorg),
                branch_depth: 0,
            },
            RevertModel::BranchInjector { max_depth } => {
                let branch_depth = if max_depth >= 1 && u_revert < self.params.p_reorg {
                    1 + ((u_depth * max_depth as f64) as u32).min(max_depth - 1)
                } else {
                    0
                };
                Pending {
                    analytic_depth: 0,
                    branch_depth,
                }
            }
        };
        if pending.analytic_depth > 0 || pending.branch_depth > 0 {
            self.pending.insert(tx, pending);
        }
        let at = self.clock + t_inc;
        self.schedule.insert((at, self.broadcasts, tx));
        self.broadcasts += 1;
        self.mempool.insert(tx);
        Ok(at)
    }

    pub fn status(&self, tx: &TxHash) -> TxStatus {
        if self.dropped.contains(tx) {
            TxStatus::Dropped
        } else if let Some(&height) = self.included.get(tx) {
            TxStatus::Included { height }
        } else if self.mempool.contains(tx) {
            TxStatus::Mempool
        } else {
            TxStatus::Unknown
        }
    }

    pub fn confirmations(&self, tx: &TxHash) -> u64 {
        match self.included.get(tx) {
            Some(&h) if !self.dropped.contains(tx) => self.height - h + 1,
            _ => 0,
        }
    }

    /// `k = 0` is satisfied by inclusion alone.
    pub fn is_final(&self, tx: &TxHash, k: u32) -> bool {
        matches!(self.status(tx), TxStatus::Included { .. }) && self.confirmations(tx) >= (k as u64).max(1)
    }

    fn needs_blocks(&self) -> bool {
        !self.pending.is_empty()
            || self
                .included
                .keys()
                .any(|tx| !self.dropped.contains(tx) && self.confirmations(tx) < self.watch_depth)
    }

    pub fn next_event_time(&self) -> Option<Millis> {
        let inclusion = self.schedule.iter().next().map(|e| e.0);
        let block = self
            .needs_blocks()
            .then_some(self.last_block_at + self.params.block_interval_ms);
        match (inclusion, block) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Processes every chain event at or before `t`, in time order.
    pub fn advance_to(&mut self, t: Millis) -> Vec<ChainEvent> {
        let mut events = Vec::new();
        while let Some(next) = self.next_event_time() {
            if next > t {
                break;
            }
            self.clock = self.clock.max(next);
            self.mine_block(next, &mut events);
        }
        self.clock = self.clock.max(t);
        events
    }

    fn mine_block(&mut self, at: Millis, events: &mut Vec<ChainEvent>) {
        self.height += 1;
        self.last_block_at = at;
        events.push(ChainEvent::Block { t: at, height: self.height });

        // Analytic reverts: the new block would give D + 1 confirmations.
        let due: Vec<TxHash> = self
            .pending
            .iter()
            .filter(|(tx, p)| p.analytic_depth > 0 && self.confirmations(tx) == p.analytic_depth as u64 + 1)
            .map(|(tx, _)| *tx)
            .collect();
        for tx in due {
            self.pending.remove(&tx);
            self.dropped.insert(tx);
            events.push(ChainEvent::TxDropped { t: at, tx });
        }

        while let Some(&(when, seq, tx)) = self.schedule.iter().next() {
            if when > at {
                break;
            }
            self.schedule.remove(&(when, seq, tx));
            self.mempool.remove(&tx);
            self.included.insert(tx, self.height);
            events.push(ChainEvent::TxIncluded {
                t: at,
                tx,
                height: self.height,
            });
        }

        let branch: Vec<u32> = self
            .pending
            .iter()
            .filter(|(tx, p)| p.branch_depth > 0 && self.confirmations(tx) == p.branch_depth as u64)
            .map(|(_, p)| p.branch_depth)
            .collect();
        for depth in branch {
            for tx in self.inject_reorg(depth) {
                events.push(ChainEvent::TxDropped { t: at, tx });
            }
        }
    }

    /// Drops every live included tx with at most `depth` confirmations. The
    /// replacement branch has the same height and contains none of them.
    pub fn inject_reorg(&mut self, depth: u32) -> Vec<TxHash> {
        assert!(depth >= 1, "reorg depth must be at least 1");
        let victims: Vec<TxHash> = self
            .included
            .keys()
            .filter(|tx| !self.dropped.contains(*tx) && self.confirmations(tx) <= depth as u64)
            .copied()
            .collect();
        for tx in &victims {
            self.dropped.insert(*tx);
            self.pending.remove(tx);
        }
        victims
    }

    pub fn dropped(&self) -> impl Iterator<Item = &TxHash> {
        self.dropped.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::RateEstimate;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn tx(n: u8) -> TxHash {
        TxHash([n; 32])
    }

    fn fixed(delay: Millis) -> ChainParams {
        ChainParams {
            inclusion: InclusionModel::Fixed { delay_ms: delay },
            ..ChainParams::default()
        }
    }

    fn drain(chain: &mut Chain) -> Vec<ChainEvent> {
        let mut all = Vec::new();
        while let Some(t) = chain.next_event_time() {
            all.extend(chain.advance_to(t));
        }
        all
    }

    #[test]
    fn broadcast_then_inclusion() {
        let mut c = Chain::new(fixed(700)).unwrap();
        assert_eq!(c.broadcast(tx(1), 100).unwrap(), 800);
        assert_eq!(c.confirmations(&tx(1)), 0);
        assert_eq!(c.status(&tx(1)), TxStatus::Mempool);
        c.advance_to(799);
        assert_eq!(c.status(&tx(1)), TxStatus::Mempool);
        c.advance_to(800);
        assert_eq!(c.status(&tx(1)), TxStatus::Included { height: 1 });
        assert_eq!(c.confirmations(&tx(1)), 1);
        assert!(c.is_final(&tx(1), 0));
        assert!(c.is_final(&tx(1), 1));
        assert!(!c.is_final(&tx(1), 2));
    }

    #[test]
    fn double_broadcast_rejected() {
        let mut c = Chain::new(fixed(1)).unwrap();
        c.broadcast(tx(1), 0).unwrap();
        assert_eq!(c.broadcast(tx(1), 5), Err(ChainError::DuplicateBroadcast(tx(1))));
    }

    #[test]
    fn k_final_after_k_minus_one_intervals() {
        let mut c = Chain::new(fixed(500)).unwrap();
        c.set_watch_depth(3);
        c.broadcast(tx(1), 0).unwrap();
        c.advance_to(500 + 2000 - 1);
        assert_eq!(c.confirmations(&tx(1)), 1);
        c.advance_to(500 + 2 * 2000);
        assert!(c.is_final(&tx(1), 3));
        // No further blocks once the watch depth is reached.
        assert_eq!(c.next_event_time(), None);
    }

    #[test]
    fn reorg_depth_boundaries() {
        let mut c = Chain::new(fixed(0)).unwrap();
        c.set_watch_depth(10);
        c.broadcast(tx(1), 0).unwrap();
        c.advance_to(2000);
        c.broadcast(tx(2), 2000).unwrap();
        c.advance_to(2000);
        // tx(1) at height 1; tx(2) lands in a second block mined at t = 2000.
        assert_eq!(c.confirmations(&tx(1)), 3);
        assert_eq!(c.confirmations(&tx(2)), 1);
        assert_eq!(c.inject_reorg(1), vec![tx(2)]);
        assert!(!c.is_final(&tx(2), 0));
        assert_eq!(c.height(), 3);
        // Survives a reorg one block shallower than its depth.
        assert!(c.inject_reorg(2).is_empty());
        assert_eq!(c.inject_reorg(3), vec![tx(1)]);
        assert!(!c.is_final(&tx(1), 0));
    }

    #[test]
    fn analytic_revert_with_certain_reorg() {
        let mut c = Chain::new(ChainParams {
            p_reorg: 1.0,
            ..fixed(10)
        })
        .unwrap();
        c.broadcast(tx(1), 0).unwrap();
        let events = drain(&mut c);
        assert!(events.iter().any(|e| matches!(e, ChainEvent::TxDropped { .. })));
        assert_eq!(c.status(&tx(1)), TxStatus::Dropped);
        assert_eq!(c.height(), MAX_REVERT_DEPTH as u64 + 1);
    }

    #[test]
    fn branch_injector_below_k_never_reaches_k() {
        let k = 4;
        let mut c = Chain::new(ChainParams {
            p_reorg: 1.0,
            revert_model: RevertModel::BranchInjector { max_depth: k - 1 },
            ..fixed(10)
        })
        .unwrap();
        c.set_watch_depth(k as u64);
        for i in 0..20u8 {
            c.broadcast(tx(i), i as Millis * 50_000).unwrap();
            let mut final_seen = false;
            while let Some(t) = c.next_event_time() {
                c.advance_to(t);
                final_seen |= c.is_final(&tx(i), k);
            }
            assert!(!final_seen);
            assert_eq!(c.status(&tx(i)), TxStatus::Dropped);
        }
    }

    #[test]
    fn inclusion_mean_and_tail() {
        // Oracle: law of large numbers on the mean, closed form on the tail.
        let params = ChainParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<Millis> = (0..n).map(|_| sample_inclusion_time(&params, &mut rng)).collect();
        let mean = draws.iter().sum::<u64>() as f64 / n as f64;
        assert!((mean - 2000.0).abs() < 0.02 * 2000.0, "mean {mean}");
        assert!(draws.iter().all(|&d| d <= 20_000));
        let tail = RateEstimate::new(draws.iter().filter(|&&d| d > 250).count() as u64, n);
        let closed = inclusion_survival(&params, 250.0);
        assert!((closed - (-0.125f64).exp()).abs() < 1e-12);
        assert!((closed - 0.882).abs() < 1e-3);
        assert!(tail.ci_low <= closed && closed <= tail.ci_high, "{tail:?} vs {closed}");
    }

    #[test]
    fn survival_cutoff_at_cap() {
        let params = ChainParams::default();
        assert_eq!(inclusion_survival(&params, -1.0), 1.0);
        assert_eq!(inclusion_survival(&params, 20_000.0), 0.0);
        assert!(inclusion_survival(&params, 19_999.0) > 0.0);
    }

    #[test]
    fn sample_revert_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..10_000).all(|_| !sample_revert(&mut rng, 0.0, 0)));
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_revert(&mut rng, 0.05, 0)).count() as u64;
        let est = RateEstimate::new(hits, n);
        assert!(est.ci_low <= 0.05 && 0.05 <= est.ci_high);
        assert!((revert_probability(0.05, 3) - 1.25e-4).abs() < 1e-15);
    }

    #[test]
    fn deep_revert_rate_matches_closed_form() {
        // 0.05^3 over 10^7 draws is slow unoptimized; the depth sampler gives
        // the same law through P(D ≥ 3).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000_000u64;
        let hits = (0..n)
            .filter(|_| revert_depth_from_uniform(rng.random(), 0.05) >= 3)
            .count() as u64;
        let est = RateEstimate::new(hits, n);
        assert!(est.ci_low <= 1.25e-4 && 1.25e-4 <= est.ci_high, "{est:?}");
    }

    #[test]
    fn depth_law_agrees_with_sample_revert() {
        // P(D ≥ max(k, 1)) equals the Bernoulli revert probability.
        for &p in &[0.01f64, 0.05, 0.3] {
            for k in 0..5u32 {
                let d = k.max(1);
                // D ≥ d iff u ≤ p^d; probe both sides of the threshold.
                let thr = p.powi(d as i32);
                assert!(revert_depth_from_uniform(thr * 0.999, p) >= d);
                assert!(revert_depth_from_uniform(thr * 1.001, p) < d);
                assert!((revert_probability(p, k) - thr).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn finality_depth_example() {
        let alpha = std::f64::consts::LN_10 / 2.5;
        assert_eq!(k_star(alpha, 1e-2), 5);
        assert!(epsilon_chain(alpha, 5) <= 1e-2 + 1e-15);
        assert!(epsilon_chain(alpha, 4) > 1e-2);
    }

    #[test]
    fn bound_closed_form() {
        let params = ChainParams {
            p_reorg: 0.05,
            ..ChainParams::default()
        };
        let b = revert_grant_lower_bound(&params, 0, 250.0);
        assert!((b - 0.05 * (-0.125f64).exp()).abs() < 1e-15);
        assert_eq!(revert_grant_lower_bound(&params, 3, 450.0), 0.05);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = || {
            let mut c = Chain::new(ChainParams {
                p_reorg: 0.3,
                seed: 99,
                ..ChainParams::default()
            })
            .unwrap();
            c.set_watch_depth(4);
            for i in 0..10u8 {
                c.broadcast(tx(i), i as Millis * 700).unwrap();
            }
            drain(&mut c)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn params_validation() {
        assert!(ChainParams { block_interval_ms: 0, ..ChainParams::default() }.validate().is_err());
        assert!(ChainParams { p_reorg: 1.5, ..ChainParams::default() }.validate().is_err());
        assert!(ChainParams { alpha: 0.0, ..ChainParams::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn epsilon_chain_monotone(alpha in 0.01f64..5.0, k in 0u32..200) {
            prop_assert!(epsilon_chain(alpha, k + 1) <= epsilon_chain(alpha, k));
        }

        #[test]
        fn k_star_is_minimal(alpha in 0.05f64..5.0, eps in 1e-9f64..0.9) {
            let k = k_star(alpha, eps);
            prop_assert!(epsilon_chain(alpha, k) <= eps * (1.0 + 1e-9));
            if k > 0 {
                prop_assert!(epsilon_chain(alpha, k - 1) > eps);
            }
        }

        #[test]
        fn measured_revert_rate_non_increasing(seed in any::<u64>(), p in 0.0f64..0.5) {
            // Coupled draws: one uniform per trial scored at every depth.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draws: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
            let rate = |k: u32| draws.iter().filter(|&&u| u < revert_probability(p, k)).count();
            for k in 0..8 {
                prop_assert!(rate(k + 1) <= rate(k));
            }
        }

        #[test]
        fn each_tx_in_exactly_one_state(seed in any::<u64>(), p in 0.0f64..1.0, n in 1usize..12) {
            let mut c = Chain::new(ChainParams { p_reorg: p, seed, ..ChainParams::default() }).unwrap();
            c.set_watch_depth(4);
            for i in 0..n {
                c.broadcast(tx(i as u8), i as Millis * 300).unwrap();
            }
            while let Some(t) = c.next_event_time() {
                c.advance_to(t);
                for i in 0..n {
                    let t = tx(i as u8);
                    let states = [c.mempool.contains(&t), c.included.contains_key(&t) && !c.dropped.contains(&t), c.dropped.contains(&t)];
                    prop_assert_eq!(states.iter().filter(|&&s| s).count(), 1);
                }
            }
        }
    }
}
