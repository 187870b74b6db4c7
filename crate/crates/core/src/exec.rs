//! Trial fan-out across independent simulation instances.
//!
//! Results are combined in trial-index order in both modes, so a sweep
//! produces identical output whether or not it ran in parallel.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled; otherwise runs
    /// sequentially.
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Per-trial seed: `base_seed XOR trial_index`.
pub fn trial_seed(base_seed: u64, trial: u64) -> u64 {
    base_seed ^ trial
}

/// Runs `f` for every trial index and returns the results in index order.
pub fn run_trials<T, F>(mode: ExecMode, n: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Maps every trial and folds the results with an associative `combine`,
/// keeping index order.
pub fn fold_trials<T, F, C>(mode: ExecMode, n: u64, identity: T, f: F, combine: C) -> T
where
    T: Send + Clone + Sync,
    F: Fn(u64) -> T + Sync + Send,
    C: Fn(T, T) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).reduce(|| identity.clone(), &combine)
        }
        _ => (0..n).map(f).fold(identity, combine),
    }
}
