//! Metric folds over traces.
//!
//! A settlement counts for a payment once its transaction was applied by the
//! contract and never dropped. It is durably `k`-final when, at the end of
//! the trace, it sits at least `max(k, 1)` blocks deep.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::facilitator::SettleReport;
use crate::model::{Millis, PayId, TxHash};
use crate::stats::{LatencySummary, RateEstimate};
use crate::trace::{Event, Trace};

/// Metric names used in reports.
pub mod names {
    pub const RGP: &str = "rgp";
    pub const DGR: &str = "dgr";
    pub const LEAK_RATE: &str = "leak_rate";
    pub const MUTATION_RATE: &str = "mutation_rate";
    pub const SELECTION_RATE: &str = "selection_rate";
    pub const L_GRANT: &str = "l_grant";
    pub const T_GF: &str = "t_gf";
}

/// Chain facts reconstructed from a trace.
#[derive(Debug, Clone, Default)]
pub struct ChainView {
    inclusion_height: BTreeMap<TxHash, u64>,
    dropped: BTreeSet<TxHash>,
    block_times: BTreeMap<u64, Millis>,
    end_height: u64,
    /// Applied settlements as (tx, pay_id), in trace order.
    settlements: Vec<(TxHash, PayId)>,
}

impl ChainView {
    pub fn from_trace(trace: &Trace) -> Self {
        let mut v = ChainView::default();
        for e in trace.iter() {
            match &e.event {
                Event::Block { height } => {
                    v.block_times.entry(*height).or_insert(e.t);
                    v.end_height = v.end_height.max(*height);
                }
                Event::TxIncluded { tx_hash, height } => {
                    v.inclusion_height.insert(*tx_hash, *height);
                }
                Event::TxDropped { tx_hash } => {
                    v.dropped.insert(*tx_hash);
                }
                Event::RunEnd { height } => v.end_height = v.end_height.max(*height),
                Event::Settlement {
                    tx_hash: Some(tx),
                    outcome,
                    pay_id,
                    ..
                } if outcome == "applied" => v.settlements.push((*tx, *pay_id)),
                _ => {}
            }
        }
        v
    }

    pub fn is_durably_final(&self, tx: &TxHash, k: u32) -> bool {
        self.final_height(tx, k).is_some_and(|h| h <= self.end_height)
    }

    fn final_height(&self, tx: &TxHash, k: u32) -> Option<u64> {
        if self.dropped.contains(tx) {
            return None;
        }
        self.inclusion_height.get(tx).map(|h| h + k.max(1) as u64 - 1)
    }

    /// Time the transaction reached `max(k, 1)` confirmations, if it did so
    /// durably.
    pub fn final_time(&self, tx: &TxHash, k: u32) -> Option<Millis> {
        let h = self.final_height(tx, k)?;
        if h > self.end_height {
            return None;
        }
        self.block_times.get(&h).copied()
    }

    pub fn live_settlements<'a>(&'a self, pay_id: &'a PayId) -> impl Iterator<Item = &'a TxHash> + 'a {
        self.settlements
            .iter()
            .filter(move |(tx, p)| p == pay_id && !self.dropped.contains(tx))
            .map(|(tx, _)| tx)
    }
}

pub fn grant_count(trace: &Trace, pay_id: &PayId) -> u64 {
    trace
        .iter()
        .filter(|e| matches!(&e.event, Event::Grant(g) if &g.pay_id == pay_id))
        .count() as u64
}

/// Applied, never-dropped settlements for the payment.
pub fn settlement_count(trace: &Trace, pay_id: &PayId) -> u64 {
    ChainView::from_trace(trace).live_settlements(pay_id).count() as u64
}

/// Duplicate grant count: grants issued for one payment identity.
pub fn dgr(trace: &Trace, pay_id: &PayId) -> u64 {
    grant_count(trace, pay_id)
}

/// Distinct payment identities presented by clients.
pub fn payment_attempts(trace: &Trace) -> BTreeSet<PayId> {
    trace
        .iter()
        .filter_map(|e| match &e.event {
            Event::RequestSent { pay_id: Some(p), .. } => Some(*p),
            _ => None,
        })
        .collect()
}

/// `(revert_grants, attempts)`: payments that were granted but never got a
/// durably `k`-final settlement, over presented payments.
pub fn revert_grant_counts(trace: &Trace, k: u32) -> (u64, u64) {
    let view = ChainView::from_trace(trace);
    let attempts = payment_attempts(trace);
    let granted: BTreeSet<PayId> = trace
        .iter()
        .filter_map(|e| match &e.event {
            Event::Grant(g) => Some(g.pay_id),
            _ => None,
        })
        .collect();
    let reverted = granted
        .iter()
        .filter(|p| attempts.contains(p))
        .filter(|p| !view.live_settlements(p).any(|tx| view.is_durably_final(tx, k)))
        .count() as u64;
    (reverted, attempts.len() as u64)
}

pub fn compute_rgp<'a>(traces: impl IntoIterator<Item = &'a Trace>, k: u32) -> RateEstimate {
    let (mut s, mut n) = (0, 0);
    for t in traces {
        let (a, b) = revert_grant_counts(t, k);
        s += a;
        n += b;
    }
    RateEstimate::new(s, n)
}

/// Settled on chain yet never granted.
pub fn e_preempt(trace: &Trace, pay_id: &PayId) -> bool {
    settlement_count(trace, pay_id) == 1 && grant_count(trace, pay_id) == 0
}

/// `(premature final reports, settle calls)`.
pub fn premature_report_counts(trace: &Trace) -> (u64, u64) {
    let mut premature = 0;
    let mut calls = 0;
    for e in trace.iter() {
        match &e.event {
            Event::SettleCall { .. } => calls += 1,
            Event::SettleReport {
                report: SettleReport::Final { chain_final: false, .. },
                ..
            } => premature += 1,
            _ => {}
        }
    }
    (premature, calls)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencySamples {
    /// Grant time minus payment presentation time.
    pub l_grant: Vec<f64>,
    /// Finality time minus grant time, clamped at zero.
    pub t_gf: Vec<f64>,
}

impl LatencySamples {
    pub fn extend(&mut self, other: LatencySamples) {
        self.l_grant.extend(other.l_grant);
        self.t_gf.extend(other.t_gf);
    }
}

pub fn latency_samples(trace: &Trace, k: u32) -> LatencySamples {
    let view = ChainView::from_trace(trace);
    let mut presented: BTreeMap<u64, Millis> = BTreeMap::new();
    let mut out = LatencySamples::default();
    for e in trace.iter() {
        match &e.event {
            Event::RequestSent { req_id, pay_id: Some(_), .. } => {
                presented.insert(*req_id, e.t);
            }
            Event::Grant(g) => {
                if let Some(&t0) = presented.get(&g.req_id) {
                    out.l_grant.push((g.grant_time - t0) as f64);
                }
                let fin = view
                    .live_settlements(&g.pay_id)
                    .filter_map(|tx| view.final_time(tx, k))
                    .min();
                if let Some(f) = fin {
                    out.t_gf.push(f.saturating_sub(g.grant_time) as f64);
                }
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub l_grant: Option<LatencySummary>,
    pub t_gf: Option<LatencySummary>,
}

impl LatencyReport {
    pub fn from_samples(s: &LatencySamples) -> Self {
        LatencyReport {
            l_grant: LatencySummary::from_samples(&s.l_grant),
            t_gf: LatencySummary::from_samples(&s.t_gf),
        }
    }
}

pub fn compute_latencies(trace: &Trace, k: u32) -> LatencyReport {
    LatencyReport::from_samples(&latency_samples(trace, k))
}

/// `(leaks, unpaid responses)`: cache-served responses to requests that
/// carried no payment.
pub fn leak_counts(trace: &Trace) -> (u64, u64) {
    let mut leaks = 0;
    let mut unpaid = 0;
    for e in trace.iter() {
        if let Event::ResponseReceived {
            paid: false,
            served_from_cache,
            ..
        } = &e.event
        {
            unpaid += 1;
            if *served_from_cache {
                leaks += 1;
            }
        }
    }
    (leaks, unpaid)
}

/// `(mutated, all responses)`.
pub fn mutation_counts(trace: &Trace) -> (u64, u64) {
    let mut mutated = 0;
    let mut all = 0;
    for e in trace.iter() {
        if let Event::ResponseReceived { mutated: m, .. } = &e.event {
            all += 1;
            if *m {
                mutated += 1;
            }
        }
    }
    (mutated, all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Address, Nonce};
    use crate::server::{ExecutionPolicy, GrantRecord};
    use crate::trace::Actor;

    fn pid(n: u8) -> PayId {
        PayId([n; 32])
    }

    fn txh(n: u8) -> TxHash {
        TxHash([n; 32])
    }

    fn present(t: &mut Trace, at: Millis, req: u64, p: PayId) {
        t.push(
            at,
            Actor::Client,
            Event::RequestSent {
                req_id: req,
                client: 0,
                path: "/a".into(),
                paid: true,
                pay_id: Some(p),
            },
        );
    }

    fn grant(t: &mut Trace, at: Millis, req: u64, p: PayId) {
        t.push(
            at,
            Actor::Server,
            Event::Grant(GrantRecord {
                req_id: req,
                pay_id: p,
                resource_id: "/a".into(),
                grant_time: at,
                policy: ExecutionPolicy::Optimistic,
                tx_hash: None,
                final_at: None,
            }),
        );
    }

    fn settle(t: &mut Trace, at: Millis, tx: TxHash, p: PayId) {
        t.push(
            at,
            Actor::Facilitator,
            Event::Settlement {
                tx_hash: Some(tx),
                caller: Address([1; 20]),
                authorizer: Address([2; 20]),
                nonce: Nonce::from_u64(1),
                amount: 1000,
                outcome: "applied".into(),
                pay_id: p,
            },
        );
    }

    fn block(t: &mut Trace, at: Millis, h: u64) {
        t.push(at, Actor::Chain, Event::Block { height: h });
    }

    #[test]
    fn empty_trace_has_no_grants() {
        let mut t = Trace::new();
        present(&mut t, 0, 1, pid(1));
        assert_eq!(revert_grant_counts(&t, 3), (0, 1));
    }

    #[test]
    fn grant_without_settlement_is_revert_grant() {
        let mut t = Trace::new();
        present(&mut t, 0, 1, pid(1));
        grant(&mut t, 50, 1, pid(1));
        assert_eq!(revert_grant_counts(&t, 0), (1, 1));
        assert_eq!(settlement_count(&t, &pid(1)), 0);
    }

    #[test]
    fn depth_and_drop_are_respected() {
        let mut t = Trace::new();
        present(&mut t, 0, 1, pid(1));
        settle(&mut t, 10, txh(1), pid(1));
        grant(&mut t, 50, 1, pid(1));
        block(&mut t, 500, 1);
        t.push(500, Actor::Chain, Event::TxIncluded { tx_hash: txh(1), height: 1 });
        block(&mut t, 2500, 2);
        block(&mut t, 4500, 3);
        t.push(4500, Actor::Chain, Event::RunEnd { height: 3 });
        assert_eq!(revert_grant_counts(&t, 3), (0, 1));
        assert_eq!(revert_grant_counts(&t, 4), (1, 1));
        let lat = latency_samples(&t, 3);
        assert_eq!(lat.l_grant, vec![50.0]);
        assert_eq!(lat.t_gf, vec![4450.0]);

        t.push(6500, Actor::Chain, Event::TxDropped { tx_hash: txh(1) });
        assert_eq!(revert_grant_counts(&t, 0), (1, 1));
        assert_eq!(settlement_count(&t, &pid(1)), 0);
    }

    #[test]
    fn t_gf_clamped_at_zero() {
        let mut t = Trace::new();
        present(&mut t, 0, 1, pid(1));
        settle(&mut t, 10, txh(1), pid(1));
        block(&mut t, 500, 1);
        t.push(500, Actor::Chain, Event::TxIncluded { tx_hash: txh(1), height: 1 });
        grant(&mut t, 900, 1, pid(1));
        assert_eq!(latency_samples(&t, 1).t_gf, vec![0.0]);
    }

    #[test]
    fn preemption_predicate() {
        let mut t = Trace::new();
        present(&mut t, 0, 1, pid(1));
        settle(&mut t, 10, txh(1), pid(1));
        assert!(e_preempt(&t, &pid(1)));
        grant(&mut t, 50, 1, pid(1));
        assert!(!e_preempt(&t, &pid(1)));
    }

    #[test]
    fn leak_and_mutation_folds() {
        let mut t = Trace::new();
        for (paid, cached, mutated) in [(true, false, true), (false, true, false), (false, false, false)] {
            t.push(
                0,
                Actor::Client,
                Event::ResponseReceived {
                    req_id: 0,
                    status: 200,
                    mutated,
                    served_from_cache: cached,
                    paid,
                },
            );
        }
        assert_eq!(leak_counts(&t), (1, 2));
        assert_eq!(mutation_counts(&t), (1, 3));
    }
}
