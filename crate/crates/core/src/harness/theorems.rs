//! Checks of the four safety bounds and the finality-depth rule.

use serde::{Deserialize, Serialize};

use crate::chain::{epsilon_chain, k_star};
use crate::server::ExecutionPolicy;

use super::attacks::{auth_check, barrier_replay, parties, replay_window, revert_controls, revert_grid, RevertCell};
use super::report::{Check, ExperimentReport, Metric, Row};
use super::{ExperimentConfig, HarnessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
    pub slack: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremsResult {
    /// Conservative + honest with shallow reorgs: no grant loses its payment.
    pub conservative_safety: TheoremCheck,
    /// Early-grant revert rate against the inclusion-time bound.
    pub revert_grant_bound: TheoremCheck,
    /// Replay grants with and without the claim store.
    pub replay_bound: TheoremCheck,
    /// Byzantine reports defeat conservative gating.
    pub byzantine_gating: TheoremCheck,
    pub finality_depth: TheoremCheck,
    pub cells: Vec<RevertCell>,
}

impl TheoremsResult {
    pub fn all_pass(&self) -> bool {
        [&self.conservative_safety, &self.revert_grant_bound, &self.replay_bound, &self.byzantine_gating, &self.finality_depth]
            .iter()
            .all(|c| c.pass)
    }

    pub fn to_report(&self, cfg: &ExperimentConfig) -> ExperimentReport {
        let mut rep = ExperimentReport::new("theorems", cfg);
        for (name, c) in [
            ("conservative_safety", &self.conservative_safety),
            ("revert_grant_bound", &self.revert_grant_bound),
            ("replay_bound", &self.replay_bound),
            ("byzantine_gating", &self.byzantine_gating),
            ("finality_depth", &self.finality_depth),
        ] {
            rep.checks.push(Check {
                name: name.into(),
                pass: c.pass,
                measured: c.measured,
                bound: Some(c.bound),
                slack: Some(c.slack),
                detail: c.detail.clone(),
            });
            rep.rows.push(
                Row::new(name)
                    .metric("pass", Metric::Flag(c.pass))
                    .metric("measured", Metric::Value(c.measured))
                    .metric("bound", Metric::Value(c.bound)),
            );
        }
        rep
    }
}

pub fn validate_theorems(cfg: &ExperimentConfig) -> Result<TheoremsResult, HarnessError> {
    cfg.validate()?;
    let controls = revert_controls(cfg)?;
    let conservative: Vec<_> = controls
        .iter()
        .filter(|c| c.policy == ExecutionPolicy::Conservative)
        .collect();
    let violations: u64 = conservative.iter().map(|c| c.rgp.successes).sum();
    let runs: u64 = conservative.iter().map(|c| c.rgp.trials).sum();
    let conservative_safety = TheoremCheck {
        pass: violations == 0 && runs > 0,
        measured: violations as f64,
        bound: 0.0,
        slack: 0.0,
        detail: format!("{violations} revert-grants in {runs} conservative runs"),
    };

    let grid = revert_grid(cfg)?;
    let worst = grid
        .iter()
        .filter_map(|c| c.bound.map(|b| (c.rgp.point - (b - c.rgp.half_width()), c)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("grid is non-empty");
    let failing = grid.iter().filter(|c| c.meets_bound() == Some(false)).count();
    let revert_grant_bound = TheoremCheck {
        pass: failing == 0,
        measured: worst.1.rgp.point,
        bound: worst.1.bound.unwrap_or(0.0),
        slack: worst.1.rgp.half_width(),
        detail: format!(
            "{failing} of {} cells below bound; tightest k={} p={} delta={}",
            grid.len(),
            worst.1.k,
            worst.1.p_reorg,
            worst.1.delta_ms
        ),
    };

    let parties = parties();
    let mut negative_ok = true;
    let mut detail = Vec::new();
    for &n in &cfg.grid.n {
        let c = barrier_replay(cfg, &parties, ExecutionPolicy::Optimistic, false, n)?;
        negative_ok &= c.dgr == n as u64;
        detail.push(format!("n={n}:{}", c.dgr));
    }
    let window = replay_window(cfg)?;
    let positive_ok = window.replay_grants == 0 && window.single_grant_runs == window.repetitions;
    let replay_bound = TheoremCheck {
        pass: negative_ok && positive_ok,
        measured: window.replay_grants as f64,
        bound: 0.0,
        slack: 0.0,
        detail: format!(
            "without claims dgr [{}]; with claims {} replay grants over {} repetitions",
            detail.join(" "),
            window.replay_grants,
            window.repetitions
        ),
    };

    let auth = auth_check(cfg)?;
    let bound = auth.bound.unwrap_or(0.0);
    let byzantine_gating = TheoremCheck {
        pass: auth.rgp.point >= bound - auth.rgp.half_width(),
        measured: auth.rgp.point,
        bound,
        slack: auth.rgp.half_width(),
        detail: format!("{}/{}", auth.rgp.successes, auth.rgp.trials),
    };

    let alpha = cfg.chain.alpha;
    let eps = cfg.epsilon_target;
    let ks = k_star(alpha, eps);
    let tight = epsilon_chain(alpha, ks) <= eps * (1.0 + 1e-12)
        && (ks == 0 || epsilon_chain(alpha, ks - 1) > eps * (1.0 - 1e-12));
    let finality_depth = TheoremCheck {
        pass: tight,
        measured: ks as f64,
        bound: eps,
        slack: 0.0,
        detail: format!("alpha={alpha} eps_chain(k*)={}", epsilon_chain(alpha, ks)),
    };

    let mut cells = grid;
    cells.extend(controls);
    cells.push(auth);
    Ok(TheoremsResult {
        conservative_safety,
        revert_grant_bound,
        replay_bound,
        byzantine_gating,
        finality_depth,
        cells,
    })
}
