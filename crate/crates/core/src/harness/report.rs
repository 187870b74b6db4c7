//! Report envelope shared by every driver.
//!
//! Maps are ordered and no wall-clock data is recorded, so the same config
//! and seed serialize to the same bytes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::stats::{LatencySummary, RateEstimate};

use super::ExperimentConfig;

pub const SCHEMA_VERSION: &str = "x402-testbed.report.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Metric {
    Rate(RateEstimate),
    Count(u64),
    Value(f64),
    Latency(Option<LatencySummary>),
    Flag(bool),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub metrics: BTreeMap<String, Metric>,
}

impl Row {
    pub fn new(scenario: impl Into<String>) -> Self {
        Row {
            scenario: scenario.into(),
            params: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn param(mut self, name: &str, v: impl Serialize) -> Self {
        self.params
            .insert(name.into(), serde_json::to_value(v).expect("params serialize"));
        self
    }

    pub fn metric(mut self, name: &str, m: Metric) -> Self {
        self.metrics.insert(name.into(), m);
        self
    }
}

/// Pass/fail outcome of one checked claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub bound: Option<f64>,
    pub slack: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub attack: String,
    pub base_seed: u64,
    pub config: ExperimentConfig,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(attack: &str, config: &ExperimentConfig) -> Self {
        ExperimentReport {
            schema: SCHEMA_VERSION.into(),
            attack: attack.into(),
            base_seed: config.base_seed,
            config: config.clone(),
            rows: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Flattens the rows into a header and string records. Rates expand
    /// into point, counts and interval columns.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let flat: Vec<BTreeMap<String, String>> = self.rows.iter().map(flatten_row).collect();
        let mut cols: BTreeSet<String> = BTreeSet::new();
        for r in &flat {
            cols.extend(r.keys().filter(|k| *k != "scenario").cloned());
        }
        let mut header = vec!["scenario".to_string()];
        header.extend(cols);
        let records = flat
            .iter()
            .map(|r| header.iter().map(|c| r.get(c).cloned().unwrap_or_default()).collect())
            .collect();
        (header, records)
    }
}

fn flatten_row(row: &Row) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    out.insert("scenario".into(), row.scenario.clone());
    for (k, v) in &row.params {
        let s = match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.insert(k.clone(), s);
    }
    for (k, m) in &row.metrics {
        match m {
            Metric::Rate(r) => {
                out.insert(k.clone(), r.point.to_string());
                out.insert(format!("{k}_successes"), r.successes.to_string());
                out.insert(format!("{k}_trials"), r.trials.to_string());
                out.insert(format!("{k}_ci_low"), r.ci_low.to_string());
                out.insert(format!("{k}_ci_high"), r.ci_high.to_string());
            }
            Metric::Count(c) => {
                out.insert(k.clone(), c.to_string());
            }
            Metric::Value(v) => {
                out.insert(k.clone(), v.to_string());
            }
            Metric::Latency(l) => {
                if let Some(l) = l {
                    out.insert(format!("{k}_median"), l.median.to_string());
                    out.insert(format!("{k}_iqr"), l.iqr.to_string());
                    out.insert(format!("{k}_n"), l.n.to_string());
                }
            }
            Metric::Flag(b) => {
                out.insert(k.clone(), b.to_string());
            }
            Metric::Text(s) => {
                out.insert(k.clone(), s.clone());
            }
        }
    }
    out
}
