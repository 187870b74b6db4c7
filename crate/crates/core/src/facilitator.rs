//! The verify/settle party.
//!
//! The facilitator is driven by the event loop: `verify` is a pure payload
//! check, `settle` submits through the settlement contract and starts
//! watching the transaction, and [`Facilitator::on_chain_update`] turns chain
//! progress into reports for the server.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Chain, TxStatus};
use crate::model::{
    check_timestamp, Address, FreshnessError, Millis, PayloadRejection, PaymentPayload, PaymentRequirements,
    SignatureProvider, TxHash, DEFAULT_FRESHNESS_WINDOW_MS,
};
use crate::settlement::{ContractKind, SettlementError, TokenLedger};

/// Default verify latency `T_verify` (50 ms).
pub const DEFAULT_VERIFY_LATENCY_MS: Millis = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimisticTrigger {
    /// Report as soon as the settlement is in the mempool.
    Mempool,
    /// Report at the first confirmation.
    FirstInclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FacilitatorMode {
    Honest,
    OptimisticBug { trigger: OptimisticTrigger },
    /// With probability `mu` per settlement, reports final without submitting
    /// anything and approves every verify request.
    Byzantine { mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FacilitatorConfig {
    pub mode: FacilitatorMode,
    pub k_report: u32,
    pub verify_latency_ms: Millis,
    pub contract: ContractKind,
    pub freshness_window_ms: Millis,
}

impl Default for FacilitatorConfig {
    fn default() -> Self {
        FacilitatorConfig {
            mode: FacilitatorMode::Honest,
            k_report: 3,
            verify_latency_ms: DEFAULT_VERIFY_LATENCY_MS,
            contract: ContractKind::Eip3009,
            freshness_window_ms: DEFAULT_FRESHNESS_WINDOW_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FacilitatorConfigError {
    #[error("mu must lie in [0, 1], got {0}")]
    BadMu(f64),
    #[error("{0}")]
    Permit2(String),
}

impl FacilitatorConfig {
    pub fn validate(&self) -> Result<(), FacilitatorConfigError> {
        if let FacilitatorMode::Byzantine { mu } = self.mode {
            if !(0.0..=1.0).contains(&mu) {
                return Err(FacilitatorConfigError::BadMu(mu));
            }
        }
        if let ContractKind::Permit2(cfg) = self.contract {
            cfg.validate().map_err(FacilitatorConfigError::Permit2)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum VerifyReason {
    #[error("payment id mismatch")]
    IdMismatch,
    #[error("bad signature")]
    BadSignature,
    #[error("amount below the quoted price")]
    Underpaid,
    #[error("wrong chain")]
    WrongChain,
    #[error("wrong receiver")]
    WrongReceiver,
    #[error("stale timestamp")]
    Stale,
    #[error("future-dated timestamp")]
    FutureDated,
}

impl From<PayloadRejection> for VerifyReason {
    fn from(r: PayloadRejection) -> Self {
        match r {
            PayloadRejection::IdMismatch => VerifyReason::IdMismatch,
            PayloadRejection::BadSignature => VerifyReason::BadSignature,
        }
    }
}

impl From<FreshnessError> for VerifyReason {
    fn from(e: FreshnessError) -> Self {
        match e {
            FreshnessError::Stale => VerifyReason::Stale,
            FreshnessError::FutureDated => VerifyReason::FutureDated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyVerdict {
    pub is_valid: bool,
    pub reason: Option<VerifyReason>,
}

impl VerifyVerdict {
    pub const VALID: VerifyVerdict = VerifyVerdict {
        is_valid: true,
        reason: None,
    };

    fn invalid(reason: VerifyReason) -> Self {
        VerifyVerdict {
            is_valid: false,
            reason: Some(reason),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "failure", content = "reason", rename_all = "snake_case")]
pub enum SettleFailure {
    Invalid(VerifyReason),
    Settlement(SettlementError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SettleReport {
    /// Reported as final. `chain_final` records whether the chain agreed at
    /// report time (false marks a premature report).
    Final { confirmations: u64, chain_final: bool },
    /// First inclusion, sent once when the caller asked for a reservation.
    Reserved,
    Failed(SettleFailure),
}

/// A report addressed to the settle request identified by `session`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Report {
    pub session: u64,
    pub tx: Option<TxHash>,
    pub report: SettleReport,
}

#[derive(Debug, Clone)]
struct Watch {
    session: u64,
    reserve: bool,
    reserved_sent: bool,
    target: u32,
}

/// Outcome of a settle call that is known before any chain progress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SettleStart {
    pub tx: Option<TxHash>,
    /// Report to send right away, if any.
    pub immediate: Option<SettleReport>,
}

#[derive(Debug, Clone)]
pub struct Facilitator {
    cfg: FacilitatorConfig,
    address: Address,
    provider: Arc<SignatureProvider>,
    rng: ChaCha8Rng,
    watching: BTreeMap<TxHash, Watch>,
}

impl Facilitator {
    pub fn new(cfg: FacilitatorConfig, address: Address, provider: Arc<SignatureProvider>, seed: u64) -> Self {
        Facilitator {
            cfg,
            address,
            provider,
            rng: ChaCha8Rng::seed_from_u64(seed),
            watching: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &FacilitatorConfig {
        &self.cfg
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn verify(&self, pp: &PaymentPayload, pr: &PaymentRequirements, now: Millis) -> VerifyVerdict {
        if let FacilitatorMode::Byzantine { .. } = self.cfg.mode {
            return VerifyVerdict::VALID;
        }
        match self.check(pp, pr, now) {
            Ok(()) => VerifyVerdict::VALID,
            Err(r) => VerifyVerdict::invalid(r),
        }
    }

    fn check(&self, pp: &PaymentPayload, pr: &PaymentRequirements, now: Millis) -> Result<(), VerifyReason> {
        self.provider.verify_payload(pp)?;
        if pp.fields.amount < pr.amount {
            return Err(VerifyReason::Underpaid);
        }
        if pp.fields.chain_id != pr.chain_id {
            return Err(VerifyReason::WrongChain);
        }
        if pp.fields.receiver != pr.receiver {
            return Err(VerifyReason::WrongReceiver);
        }
        check_timestamp(pp.fields.ts, now, self.cfg.freshness_window_ms)?;
        Ok(())
    }

    /// Handles a settle request. With `reserve`, a [`SettleReport::Reserved`]
    /// is sent at first inclusion before the final report.
    #[allow(clippy::too_many_arguments)]
    pub fn settle(
        &mut self,
        session: u64,
        pp: &PaymentPayload,
        pr: &PaymentRequirements,
        reserve: bool,
        ledger: &mut TokenLedger,
        chain: &mut Chain,
        now: Millis,
    ) -> SettleStart {
        let k = self.cfg.k_report;
        let target = match self.cfg.mode {
            FacilitatorMode::Byzantine { mu } => {
                // One draw per settlement keeps the stream aligned.
                let lie = self.rng.random::<f64>() < mu;
                if lie {
                    return SettleStart {
                        tx: None,
                        immediate: Some(SettleReport::Final {
                            confirmations: 0,
                            chain_final: false,
                        }),
                    };
                }
                k
            }
            FacilitatorMode::Honest => k,
            FacilitatorMode::OptimisticBug { .. } => 1,
        };
        if !matches!(self.cfg.mode, FacilitatorMode::Byzantine { .. }) {
            if let Err(r) = self.check(pp, pr, now) {
                return SettleStart {
                    tx: None,
                    immediate: Some(SettleReport::Failed(SettleFailure::Invalid(r))),
                };
            }
        }
        let record = match ledger.settle(self.cfg.contract, chain, pp, self.address, now) {
            Ok(rec) => rec,
            Err(e) => {
                return SettleStart {
                    tx: None,
                    immediate: Some(SettleReport::Failed(SettleFailure::Settlement(e))),
                }
            }
        };
        let tx = record.tx_hash;
        if let FacilitatorMode::OptimisticBug {
            trigger: OptimisticTrigger::Mempool,
        } = self.cfg.mode
        {
            return SettleStart {
                tx: Some(tx),
                immediate: Some(SettleReport::Final {
                    confirmations: 0,
                    chain_final: k == 0 && chain.is_final(&tx, 0),
                }),
            };
        }
        self.watching.insert(
            tx,
            Watch {
                session,
                reserve,
                reserved_sent: false,
                target,
            },
        );
        SettleStart { tx: Some(tx), immediate: None }
    }

    /// Honest view: `is_final(tx, k_report)`.
    pub fn report_final(&self, chain: &Chain, tx: &TxHash) -> bool {
        chain.is_final(tx, self.cfg.k_report)
    }

    /// Reports triggered by the chain's current state. Call after every chain
    /// step.
    pub fn on_chain_update(&mut self, chain: &Chain) -> Vec<Report> {
        let mut out = Vec::new();
        let mut done = Vec::new();
        for (tx, w) in self.watching.iter_mut() {
            match chain.status(tx) {
                TxStatus::Dropped => {
                    out.push(Report {
                        session: w.session,
                        tx: Some(*tx),
                        report: SettleReport::Failed(SettleFailure::Settlement(SettlementError::Reverted)),
                    });
                    done.push(*tx);
                }
                TxStatus::Included { .. } => {
                    if w.reserve && !w.reserved_sent {
                        w.reserved_sent = true;
                        out.push(Report {
                            session: w.session,
                            tx: Some(*tx),
                            report: SettleReport::Reserved,
                        });
                    }
                    if chain.is_final(tx, w.target) {
                        out.push(Report {
                            session: w.session,
                            tx: Some(*tx),
                            report: SettleReport::Final {
                                confirmations: chain.confirmations(tx),
                                chain_final: chain.is_final(tx, self.cfg.k_report),
                            },
                        });
                        done.push(*tx);
                    }
                }
                TxStatus::Mempool | TxStatus::Unknown => {}
            }
        }
        for tx in done {
            self.watching.remove(&tx);
        }
        out
    }

    pub fn idle(&self) -> bool {
        self.watching.is_empty()
    }
}
