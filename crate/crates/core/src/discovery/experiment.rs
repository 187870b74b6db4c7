//! Selection-rate experiment over the discovery market.
//!
//! Every scenario replays the same decisions: each (category, query,
//! sample) triple uses the same uniform draw, so scenarios differ only in
//! the catalog.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fixture::{bundled, parse_catalog, parse_queries};
use super::{
    fnv, register_attacker, retrieve, select, AttackMode, Catalog, CategoryQueries, Defenses, DiscoveryError,
    SelectionPolicy, DEFAULT_SHORTLIST,
};
use crate::exec::{run_trials, ExecMode};
use crate::harness::report::{Check, Metric, Row};
use crate::metrics::names;
use crate::stats::RateEstimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub policy: SelectionPolicy,
    pub shortlist: usize,
    pub samples_per_query: u32,
    pub defenses: Defenses,
    /// Sybil domains share one parent.
    pub shared_parent: bool,
    /// Categories pooled at each end of the density order.
    pub density_group: usize,
    pub catalog_path: Option<PathBuf>,
    pub queries_path: Option<PathBuf>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            policy: SelectionPolicy::SoftmaxLexical { temperature: 0.5 },
            shortlist: DEFAULT_SHORTLIST,
            samples_per_query: 8,
            defenses: Defenses::default(),
            shared_parent: false,
            density_group: 3,
            catalog_path: None,
            queries_path: None,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        self.policy.validate()?;
        if self.shortlist == 0 {
            return Err(DiscoveryError::BadShortlistLength);
        }
        if self.samples_per_query == 0 {
            return Err(DiscoveryError::Config("samples_per_query must be at least 1".into()));
        }
        if self.density_group == 0 {
            return Err(DiscoveryError::Config("density_group must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(&self) -> Result<(Catalog, Vec<CategoryQueries>), DiscoveryError> {
        let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| DiscoveryError::Fixture(format!("{}: {e}", p.display())));
        let (mut c, mut q) = match (&self.catalog_path, &self.queries_path) {
            (None, None) => return Ok(bundled()),
            _ => bundled(),
        };
        if let Some(p) = &self.catalog_path {
            c = parse_catalog(&read(p)?)?;
        }
        if let Some(p) = &self.queries_path {
            q = parse_queries(&read(p)?)?;
        }
        Ok((c, q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: String,
    pub honest_listings: usize,
    pub selection: RateEstimate,
    /// Queries whose shortlist contains an attacker listing.
    pub applicability: RateEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub mode: AttackMode,
    pub categories: Vec<CategoryResult>,
    pub aggregate: RateEstimate,
}

impl ScenarioResult {
    /// Pooled selection rate over the named categories.
    pub fn pooled(&self, categories: &[String]) -> RateEstimate {
        let (s, n) = self
            .categories
            .iter()
            .filter(|c| categories.contains(&c.category))
            .fold((0, 0), |(s, n), c| (s + c.selection.successes, n + c.selection.trials));
        RateEstimate::new(s, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub policy: SelectionPolicy,
    pub samples_per_query: u32,
    pub r_levels: Vec<u32>,
    pub scenarios: Vec<ScenarioResult>,
    /// Categories where the manipulated scenario beats the plain baseline.
    pub e_sel: BTreeMap<String, Vec<String>>,
    pub sparse: Vec<String>,
    pub dense: Vec<String>,
}

impl SelectionReport {
    pub fn scenario(&self, name: &str) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|s| s.scenario == name)
    }

    pub fn sybil(&self, r: u32) -> Option<&ScenarioResult> {
        self.scenario(&sybil_name(r))
    }

    /// Aggregate rates at each Sybil level, in `r_levels` order.
    pub fn sybil_aggregates(&self) -> Vec<(u32, RateEstimate)> {
        self.r_levels
            .iter()
            .filter_map(|&r| self.sybil(r).map(|s| (r, s.aggregate)))
            .collect()
    }

    /// Sparse and dense pooled rates at the largest Sybil level.
    pub fn sparse_dense(&self) -> Option<(RateEstimate, RateEstimate)> {
        let r = *self.r_levels.iter().max()?;
        let s = self.sybil(r)?;
        Some((s.pooled(&self.sparse), s.pooled(&self.dense)))
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        let agg = self.sybil_aggregates();
        let monotone = agg.windows(2).all(|w| w[1].1.point >= w[0].1.point);
        out.push(Check {
            name: "sybil rate non-decreasing in r".into(),
            pass: monotone,
            measured: agg.last().map_or(0.0, |a| a.1.point),
            bound: agg.first().map(|a| a.1.point),
            slack: None,
            detail: agg
                .iter()
                .map(|(r, e)| format!("r={r}:{:.4}", e.point))
                .collect::<Vec<_>>()
                .join(" "),
        });
        if let (Some(lo), Some(hi)) = (agg.first(), agg.last()) {
            out.push(Check {
                name: "sybil CIs disjoint between smallest and largest r".into(),
                pass: lo.1.disjoint_from(&hi.1) && hi.1.point > lo.1.point,
                measured: hi.1.ci_low,
                bound: Some(lo.1.ci_high),
                slack: None,
                detail: format!("{} and {} decisions", lo.1.trials, hi.1.trials),
            });
        }
        if let Some((s, d)) = self.sparse_dense() {
            out.push(Check {
                name: "sparse categories exceed dense".into(),
                pass: s.point > d.point && s.disjoint_from(&d),
                measured: s.point,
                bound: Some(d.point),
                slack: None,
                detail: format!("sparse {:?} dense {:?}", self.sparse, self.dense),
            });
        }
        out
    }

    pub fn rows(&self) -> Vec<Row> {
        let mut rows = Vec::new();
        for s in &self.scenarios {
            for c in &s.categories {
                rows.push(
                    Row::new(s.scenario.clone())
                        .param("category", &c.category)
                        .param("honest_listings", c.honest_listings)
                        .metric(names::SELECTION_RATE, Metric::Rate(c.selection))
                        .metric("applicability", Metric::Rate(c.applicability))
                        .metric(
                            "e_sel",
                            Metric::Flag(self.e_sel.get(&s.scenario).is_some_and(|v| v.contains(&c.category))),
                        ),
                );
            }
            rows.push(
                Row::new(s.scenario.clone())
                    .param("category", "all")
                    .metric(names::SELECTION_RATE, Metric::Rate(s.aggregate)),
            );
        }
        rows
    }
}

pub const BASELINE: &str = "plain";
pub const CRAFTED: &str = "crafted";

pub fn sybil_name(r: u32) -> String {
    format!("sybil-r{r}")
}

fn run_category(
    cfg: &SelectionConfig,
    base: &Catalog,
    set: &CategoryQueries,
    mode: AttackMode,
    seed: u64,
) -> Result<CategoryResult, DiscoveryError> {
    let catalog = register_attacker(base, set, mode, &cfg.defenses, seed);
    let mut picks = 0;
    let mut applicable = 0;
    for (qi, query) in set.queries.iter().enumerate() {
        let shortlist = retrieve(&catalog, query, cfg.shortlist, &cfg.defenses)?;
        if shortlist.iter().any(|c| catalog.entries[c.index].adversarial) {
            applicable += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(&set.category) ^ ((qi as u64) << 32));
        for _ in 0..cfg.samples_per_query {
            let u: f64 = rng.random();
            let chosen = select(&shortlist, cfg.policy, u)?;
            if catalog.entries[chosen.index].adversarial {
                picks += 1;
            }
        }
    }
    let decisions = set.queries.len() as u64 * cfg.samples_per_query as u64;
    Ok(CategoryResult {
        category: set.category.clone(),
        honest_listings: base.honest_count(&set.category),
        selection: RateEstimate::new(picks, decisions),
        applicability: RateEstimate::new(applicable, set.queries.len() as u64),
    })
}

fn run_scenario(
    cfg: &SelectionConfig,
    base: &Catalog,
    sets: &[CategoryQueries],
    name: String,
    mode: AttackMode,
    seed: u64,
    exec: ExecMode,
) -> Result<ScenarioResult, DiscoveryError> {
    let categories = run_trials(exec, sets.len() as u64, |i| {
        run_category(cfg, base, &sets[i as usize], mode, seed)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let (s, n) = categories
        .iter()
        .fold((0, 0), |(s, n), c| (s + c.selection.successes, n + c.selection.trials));
    Ok(ScenarioResult {
        scenario: name,
        mode,
        categories,
        aggregate: RateEstimate::new(s, n),
    })
}

/// Runs the plain baseline, the crafted listing and one Sybil scenario per
/// level in `r_levels`, all on the same decision draws.
pub fn run_selection_experiment(
    cfg: &SelectionConfig,
    r_levels: &[u32],
    seed: u64,
    exec: ExecMode,
) -> Result<SelectionReport, DiscoveryError> {
    cfg.validate()?;
    if r_levels.is_empty() || r_levels.contains(&0) {
        return Err(DiscoveryError::Config("sybil levels must be non-empty and at least 1".into()));
    }
    let (base, sets) = cfg.load()?;
    if base.is_empty() {
        return Err(DiscoveryError::EmptyCatalog);
    }
    let mut scenarios = vec![
        run_scenario(cfg, &base, &sets, BASELINE.into(), AttackMode::Plain, seed, exec)?,
        run_scenario(cfg, &base, &sets, CRAFTED.into(), AttackMode::MetadataCrafted, seed, exec)?,
    ];
    for &r in r_levels {
        let mode = AttackMode::Sybil {
            r,
            shared_parent: cfg.shared_parent,
        };
        scenarios.push(run_scenario(cfg, &base, &sets, sybil_name(r), mode, seed, exec)?);
    }

    let baseline = scenarios[0].clone();
    let mut e_sel = BTreeMap::new();
    for s in &scenarios[1..] {
        let hit = s
            .categories
            .iter()
            .zip(&baseline.categories)
            .filter(|(m, b)| m.selection.point > b.selection.point)
            .map(|(m, _)| m.category.clone())
            .collect();
        e_sel.insert(s.scenario.clone(), hit);
    }

    let mut by_density: Vec<(usize, String)> = sets
        .iter()
        .map(|s| (base.honest_count(&s.category), s.category.clone()))
        .collect();
    by_density.sort();
    let g = cfg.density_group.min(by_density.len() / 2).max(1);
    let sparse = by_density[..g].iter().map(|x| x.1.clone()).collect();
    let dense = by_density[by_density.len() - g..].iter().map(|x| x.1.clone()).collect();

    Ok(SelectionReport {
        policy: cfg.policy,
        samples_per_query: cfg.samples_per_query,
        r_levels: r_levels.to_vec(),
        scenarios,
        e_sel,
        sparse,
        dense,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_samples_rejected() {
        let cfg = SelectionConfig {
            samples_per_query: 0,
            ..SelectionConfig::default()
        };
        assert!(run_selection_experiment(&cfg, &[1], 1, ExecMode::Sequential).is_err());
    }

    #[test]
    fn sybil_cap_limits_rate_to_single_listing() {
        let capped = SelectionConfig {
            defenses: Defenses {
                sybil_cap: Some(1),
                ..Defenses::default()
            },
            ..SelectionConfig::default()
        };
        let rep = run_selection_experiment(&capped, &[1, 5], 3, ExecMode::Sequential).unwrap();
        assert_eq!(rep.sybil(1).unwrap().aggregate, rep.sybil(5).unwrap().aggregate);
    }

    #[test]
    fn metadata_validation_removes_crafted_listing() {
        let cfg = SelectionConfig {
            defenses: Defenses {
                metadata_validation: true,
                ..Defenses::default()
            },
            ..SelectionConfig::default()
        };
        let rep = run_selection_experiment(&cfg, &[1], 3, ExecMode::Sequential).unwrap();
        assert_eq!(rep.scenario(CRAFTED).unwrap().aggregate.successes, 0);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let cfg = SelectionConfig::default();
        let a = run_selection_experiment(&cfg, &[1, 3], 11, ExecMode::Sequential).unwrap();
        let b = run_selection_experiment(&cfg, &[1, 3], 11, ExecMode::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
