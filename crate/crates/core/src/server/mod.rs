//! The resource server's 402 state machine.
//!
//! A paid request passes these checks in order, stopping at the first
//! failure:
//!
//! 1. payload verification (payment id and signature)
//! 2. freshness window `W`
//! 3. resource and facilitator binding, when enabled
//! 4. idempotency claim on `pay_id:resource_id`, when enabled
//! 5. facilitator verify
//! 6. the execution-policy gate
//!
//! The server never talks to the network itself. Each entry point returns
//! [`ServerAction`]s for the event loop to deliver.

pub mod claims;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::facilitator::{SettleFailure, SettleReport, VerifyReason, VerifyVerdict};
use crate::model::{
    check_timestamp, Address, Millis, PayId, PayloadRejection, PaymentPayload, PaymentRequirements,
    SignatureProvider, TxHash, DEFAULT_FRESHNESS_WINDOW_MS,
};
use crate::web::{HttpRequest, HttpResponse, CACHE_CONTROL, NO_STORE_PRIVATE, X_PAYMENT};

pub use claims::ClaimStore;

pub const DEFAULT_CLAIM_TTL_MS: Millis = 300_000;
pub const DEFAULT_K: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutionPolicy {
    /// Grant on a valid verify verdict; settlement runs alongside.
    Optimistic,
    /// Grant only once the facilitator reports finality at depth `k`.
    Conservative,
    /// Grant at first inclusion; settlement continues afterwards.
    ReserveThenSettle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Mitigations {
    pub m1_resource_binding: bool,
    pub m1_facilitator_binding: bool,
    pub m3_idempotency: bool,
    pub m5_cache_control: bool,
}

impl Mitigations {
    pub const ALL: Mitigations = Mitigations {
        m1_resource_binding: true,
        m1_facilitator_binding: true,
        m3_idempotency: true,
        m5_cache_control: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub policy: ExecutionPolicy,
    pub k: u32,
    pub mitigations: Mitigations,
    pub claim_ttl_ms: Millis,
    pub freshness_window_ms: Millis,
    pub price_table: BTreeMap<String, PaymentRequirements>,
    /// Render claim rejections as 402 instead of 409.
    pub replay_status_402: bool,
    /// Facilitator this server is configured to use.
    pub facilitator: Option<Address>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            policy: ExecutionPolicy::Conservative,
            k: DEFAULT_K,
            mitigations: Mitigations::default(),
            claim_ttl_ms: DEFAULT_CLAIM_TTL_MS,
            freshness_window_ms: DEFAULT_FRESHNESS_WINDOW_MS,
            price_table: BTreeMap::new(),
            replay_status_402: false,
            facilitator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServerConfigError {
    #[error("freshness window ({w} ms) must be shorter than the claim TTL ({ttl} ms)")]
    WindowNotBelowTtl { w: Millis, ttl: Millis },
    #[error("price table entry `{0}`: {1}")]
    BadPrice(String, String),
    #[error("facilitator binding requires a configured facilitator address")]
    MissingFacilitator,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerConfigError> {
        if self.freshness_window_ms >= self.claim_ttl_ms {
            return Err(ServerConfigError::WindowNotBelowTtl {
                w: self.freshness_window_ms,
                ttl: self.claim_ttl_ms,
            });
        }
        for (path, pr) in &self.price_table {
            pr.validate()
                .map_err(|e| ServerConfigError::BadPrice(path.clone(), e.to_string()))?;
            if &pr.resource_id != path {
                return Err(ServerConfigError::BadPrice(
                    path.clone(),
                    "resource_id differs from its key".into(),
                ));
            }
        }
        if self.mitigations.m1_facilitator_binding && self.facilitator.is_none() {
            return Err(ServerConfigError::MissingFacilitator);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    NoPayment,
    UnknownResource,
    Malformed,
    IdMismatch,
    BadSignature,
    Stale,
    FutureDated,
    ResourceMismatch,
    FacilitatorMismatch,
    Replay,
    VerifyFailed(VerifyReason),
    SettleFailed(SettleFailure),
}

impl From<PayloadRejection> for RejectReason {
    fn from(r: PayloadRejection) -> Self {
        match r {
            PayloadRejection::IdMismatch => RejectReason::IdMismatch,
            PayloadRejection::BadSignature => RejectReason::BadSignature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantRecord {
    pub req_id: u64,
    pub pay_id: PayId,
    pub resource_id: String,
    pub grant_time: Millis,
    pub policy: ExecutionPolicy,
    pub tx_hash: Option<TxHash>,
    pub final_at: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerAction {
    Respond {
        req_id: u64,
        response: HttpResponse,
        reason: Option<RejectReason>,
    },
    Grant(GrantRecord),
    CallVerify {
        session: u64,
        pp: PaymentPayload,
        pr: PaymentRequirements,
    },
    CallSettle {
        session: u64,
        pp: PaymentPayload,
        pr: PaymentRequirements,
        reserve: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    AwaitVerify,
    AwaitSettle,
    Done,
}

#[derive(Debug, Clone)]
struct Session {
    pp: PaymentPayload,
    pr: PaymentRequirements,
    stage: Stage,
}

#[derive(Debug, Clone)]
pub struct Server {
    cfg: ServerConfig,
    provider: Arc<SignatureProvider>,
    claims: ClaimStore,
    sessions: BTreeMap<u64, Session>,
}

impl Server {
    pub fn new(cfg: ServerConfig, provider: Arc<SignatureProvider>) -> Result<Self, ServerConfigError> {
        cfg.validate()?;
        Ok(Server {
            claims: ClaimStore::new(cfg.claim_ttl_ms),
            cfg,
            provider,
            sessions: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn claims(&self) -> &ClaimStore {
        &self.claims
    }

    fn reject(&self, req_id: u64, reason: RejectReason, pr: Option<&PaymentRequirements>) -> ServerAction {
        let status = match reason {
            RejectReason::UnknownResource => 404,
            RejectReason::Replay if !self.cfg.replay_status_402 => 409,
            _ => 402,
        };
        let body = match (status, pr) {
            (402, Some(pr)) => serde_json::to_string(pr).expect("requirements serialize"),
            _ => String::new(),
        };
        ServerAction::Respond {
            req_id,
            response: HttpResponse::new(status, body),
            reason: Some(reason),
        }
    }

    fn grant(&self, req_id: u64, s: &Session, now: Millis, tx: Option<TxHash>, final_at: Option<Millis>) -> Vec<ServerAction> {
        let mut response = HttpResponse::new(200, format!("paid content for {}", s.pr.resource_id))
            .with_header("Content-Type", "text/plain");
        if self.cfg.mitigations.m5_cache_control {
            response = response.with_header(CACHE_CONTROL, NO_STORE_PRIVATE);
        }
        vec![
            ServerAction::Grant(GrantRecord {
                req_id,
                pay_id: s.pp.payment_id,
                resource_id: s.pr.resource_id.clone(),
                grant_time: now,
                policy: self.cfg.policy,
                tx_hash: tx,
                final_at,
            }),
            ServerAction::Respond {
                req_id,
                response,
                reason: None,
            },
        ]
    }

    /// Entry point for an incoming request. The request id doubles as the
    /// session id for facilitator calls.
    pub fn handle_request(&mut self, req: &HttpRequest, now: Millis) -> Vec<ServerAction> {
        let Some(pr) = self.cfg.price_table.get(&req.path).cloned() else {
            return vec![self.reject(req.id, RejectReason::UnknownResource, None)];
        };
        let Some(header) = req.header(X_PAYMENT) else {
            return vec![self.reject(req.id, RejectReason::NoPayment, Some(&pr))];
        };
        let pp = match PaymentPayload::from_header(header) {
            Ok(pp) => pp,
            Err(_) => return vec![self.reject(req.id, RejectReason::Malformed, Some(&pr))],
        };
        if let Err(r) = self.provider.verify_payload(&pp) {
            return vec![self.reject(req.id, r.into(), Some(&pr))];
        }
        if let Err(e) = check_timestamp(pp.fields.ts, now, self.cfg.freshness_window_ms) {
            let reason = match e {
                crate::model::FreshnessError::Stale => RejectReason::Stale,
                crate::model::FreshnessError::FutureDated => RejectReason::FutureDated,
            };
            return vec![self.reject(req.id, reason, Some(&pr))];
        }
        let m = self.cfg.mitigations;
        if m.m1_resource_binding && pp.fields.resource_id.as_deref() != Some(req.path.as_str()) {
            return vec![self.reject(req.id, RejectReason::ResourceMismatch, Some(&pr))];
        }
        if m.m1_facilitator_binding && pp.fields.facilitator != self.cfg.facilitator {
            return vec![self.reject(req.id, RejectReason::FacilitatorMismatch, Some(&pr))];
        }
        if m.m3_idempotency && !self.claims.claim(&pp.payment_id, &pr.resource_id, now) {
            return vec![self.reject(req.id, RejectReason::Replay, Some(&pr))];
        }
        let mut out = vec![ServerAction::CallVerify {
            session: req.id,
            pp: pp.clone(),
            pr: pr.clone(),
        }];
        if self.cfg.policy == ExecutionPolicy::Optimistic {
            out.push(ServerAction::CallSettle {
                session: req.id,
                pp: pp.clone(),
                pr: pr.clone(),
                reserve: false,
            });
        }
        self.sessions.insert(
            req.id,
            Session {
                pp,
                pr,
                stage: Stage::AwaitVerify,
            },
        );
        out
    }

    pub fn on_verify_reply(&mut self, session: u64, verdict: VerifyVerdict, now: Millis) -> Vec<ServerAction> {
        let Some(s) = self.sessions.get(&session).cloned() else {
            return Vec::new();
        };
        if s.stage != Stage::AwaitVerify {
            return Vec::new();
        }
        if !verdict.is_valid {
            self.set_stage(session, Stage::Done);
            let reason = verdict.reason.map_or(RejectReason::Malformed, RejectReason::VerifyFailed);
            return vec![self.reject(session, reason, Some(&s.pr))];
        }
        match self.cfg.policy {
            ExecutionPolicy::Optimistic => {
                self.set_stage(session, Stage::Done);
                self.grant(session, &s, now, None, None)
            }
            ExecutionPolicy::Conservative | ExecutionPolicy::ReserveThenSettle => {
                self.set_stage(session, Stage::AwaitSettle);
                vec![ServerAction::CallSettle {
                    session,
                    pp: s.pp.clone(),
                    pr: s.pr.clone(),
                    reserve: self.cfg.policy == ExecutionPolicy::ReserveThenSettle,
                }]
            }
        }
    }

    pub fn on_settle_report(
        &mut self,
        session: u64,
        tx: Option<TxHash>,
        report: SettleReport,
        now: Millis,
    ) -> Vec<ServerAction> {
        let Some(s) = self.sessions.get(&session).cloned() else {
            return Vec::new();
        };
        if s.stage != Stage::AwaitSettle {
            return Vec::new();
        }
        match (self.cfg.policy, report) {
            (_, SettleReport::Failed(f)) => {
                self.set_stage(session, Stage::Done);
                vec![self.reject(session, RejectReason::SettleFailed(f), Some(&s.pr))]
            }
            (ExecutionPolicy::Conservative, SettleReport::Final { .. }) => {
                self.set_stage(session, Stage::Done);
                self.grant(session, &s, now, tx, Some(now))
            }
            (ExecutionPolicy::ReserveThenSettle, SettleReport::Reserved | SettleReport::Final { .. }) => {
                self.set_stage(session, Stage::Done);
                self.grant(session, &s, now, tx, None)
            }
            _ => Vec::new(),
        }
    }

    fn set_stage(&mut self, session: u64, stage: Stage) {
        if let Some(s) = self.sessions.get_mut(&session) {
            s.stage = stage;
        }
        if stage == Stage::Done {
            self.sessions.remove(&session);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Nonce, PaymentFields, SignatureMode, SigningKey};
    use crate::settlement::SettlementError;

    struct Fx {
        provider: Arc<SignatureProvider>,
        payer: SigningKey,
        pr_a: PaymentRequirements,
    }

    fn price(path: &str) -> PaymentRequirements {
        PaymentRequirements {
            resource_id: path.into(),
            amount: 1000,
            token: "USDC".into(),
            chain_id: 84532,
            receiver: SigningKey::derive("merchant").address(),
            expiry: 0,
            meta: BTreeMap::new(),
        }
    }

    fn fx() -> Fx {
        let mut p = SignatureProvider::new(SignatureMode::WellFormed);
        let (_, payer) = p.register_label("payer");
        Fx {
            provider: Arc::new(p),
            payer,
            pr_a: price("/a"),
        }
    }

    fn server(f: &Fx, policy: ExecutionPolicy, m: Mitigations) -> Server {
        let mut table = BTreeMap::new();
        table.insert("/a".to_string(), price("/a"));
        table.insert("/b".to_string(), price("/b"));
        Server::new(
            ServerConfig {
                policy,
                mitigations: m,
                price_table: table,
                facilitator: Some(SigningKey::derive("facilitator").address()),
                ..ServerConfig::default()
            },
            f.provider.clone(),
        )
        .unwrap()
    }

    fn pay(f: &Fx, resource: Option<&str>, ts: Millis) -> PaymentPayload {
        let fields = PaymentFields {
            payer_addr: f.payer.address(),
            receiver: f.pr_a.receiver,
            amount: 1000,
            chain_id: 84532,
            nonce: Nonce::from_u64(7),
            ts,
            resource_id: resource.map(str::to_string),
            facilitator: None,
        };
        f.provider.sign_payload(fields, &f.payer).unwrap()
    }

    fn req(id: u64, path: &str, pp: Option<&PaymentPayload>) -> HttpRequest {
        let r = HttpRequest::get(id, 0, path);
        match pp {
            Some(pp) => r.with_header(X_PAYMENT, pp.to_header()),
            None => r,
        }
    }

    fn status(actions: &[ServerAction]) -> Option<(u16, Option<RejectReason>)> {
        actions.iter().find_map(|a| match a {
            ServerAction::Respond { response, reason, .. } => Some((response.status, *reason)),
            _ => None,
        })
    }

    #[test]
    fn no_payment_gets_requirements() {
        let f = fx();
        let mut s = server(&f, ExecutionPolicy::Optimistic, Mitigations::default());
        let out = s.handle_request(&req(1, "/a", None), 1000);
        let ServerAction::Respond { response, .. } = &out[0] else { panic!() };
        assert_eq!(response.status, 402);
        let body: PaymentRequirements = serde_json::from_str(&response.body).unwrap();
        assert_eq!(body, f.pr_a);
    }

    #[test]
    fn optimistic_grants_on_verify() {
        let f = fx();
        let mut s = server(&f, ExecutionPolicy::Optimistic, Mitigations::default());
        let pp = pay(&f, None, 1000);
        let out = s.handle_request(&req(1, "/a", Some(&pp)), 1000);
        assert!(matches!(out[0], ServerAction::CallVerify { .. }));
        assert!(matches!(out[1], ServerAction::CallSettle { reserve: false, .. }));
        let out = s.on_verify_reply(1, VerifyVerdict::VALID, 1050);
        assert!(matches!(out[0], ServerAction::Grant(_)));
        assert_eq!(status(&out), Some((200, None)));
    }

    #[test]
    fn conservative_waits_for_final() {
        let f = fx();
        let mut s = server(&f, ExecutionPolicy::Conservative, Mitigations::default());
        let pp = pay(&f, None, 1000);
        s.handle_request(&req(1, "/a", Some(&pp)), 1000);
        let out = s.on_verify_reply(1, VerifyVerdict::VALID, 1050);
        assert!(matches!(out[0], ServerAction::CallSettle { reserve: false, .. }));
        assert!(s
            .on_settle_report(1, None, SettleReport::Reserved, 1100)
            .is_empty());
        let out = s.on_settle_report(
            1,
            Some(TxHash([1; 32])),
            SettleReport::Final {
                confirmations: 3,
                chain_final: true,
            },
            5000,
        );
        assert_eq!(status(&out), Some((200, None)));
    }

    #[test]
    fn settle_failure_is_402() {
        let f = fx();
        let mut s = server(&f, ExecutionPolicy::Conservative, Mitigations::default());
        let pp = pay(&f, None, 1000);
        s.handle_request(&req(1, "/a", Some(&pp)), 1000);
        s.on_verify_reply(1, VerifyVerdict::VALID, 1050);
        let fail = SettleFailure::Settlement(SettlementError::NonceConsumed);
        let out = s.on_settle_report(1, None, SettleReport::Failed(fail), 1100);
        assert_eq!(status(&out), Some((402, Some(RejectReason::SettleFailed(fail)))));
    }

    #[test]
    fn reserve_grants_at_reservation() {
        let f = fx();
        let mut s = server(&f, ExecutionPolicy::ReserveThenSettle, Mitigations::default());
        let pp = pay(&f, None, 1000);
        s.handle_request(&req(1, "/a", Some(&pp)), 1000);
        let out = s.on_verify_reply(1, VerifyVerdict::VALID, 1050);
        assert!(matches!(out[0], ServerAction::CallSettle { reserve: true, .. }));
        let out = s.on_settle_report(1, None, SettleReport::Reserved, 2000);
        assert_eq!(status(&out), Some((200, None)));
    }

    #[test]
    fn idempotency_rejects_second_presentation() {
        let f = fx();
        let m = Mitigations {
            m3_idempotency: true,
            ..Mitigations::default()
        };
        let mut s = server(&f, ExecutionPolicy::Optimistic, m);
        let pp = pay(&f, None, 1000);
        assert!(matches!(s.handle_request(&req(1, "/a", Some(&pp)), 1000)[0], ServerAction::CallVerify { .. }));
        let out = s.handle_request(&req(2, "/a", Some(&pp)), 1001);
        assert_eq!(status(&out), Some((409, Some(RejectReason::Replay))));
    }

    #[test]
    fn replay_status_can_render_as_402() {
        let f = fx();
        let mut s = server(&f, ExecutionPolicy::Optimistic, Mitigations { m3_idempotency: true, ..Mitigations::default() });
        s.cfg.replay_status_402 = true;
        let pp = pay(&f, None, 1000);
        s.handle_request(&req(1, "/a", Some(&pp)), 1000);
        let out = s.handle_request(&req(2, "/a", Some(&pp)), 1001);
        assert_eq!(status(&out), Some((402, Some(RejectReason::Replay))));
    }

    #[test]
    fn resource_binding() {
        let f = fx();
        let m = Mitigations {
            m1_resource_binding: true,
            ..Mitigations::default()
        };
        let mut s = server(&f, ExecutionPolicy::Optimistic, m);
        let pp = pay(&f, Some("/a"), 1000);
        let out = s.handle_request(&req(1, "/b", Some(&pp)), 1000);
        assert_eq!(status(&out), Some((402, Some(RejectReason::ResourceMismatch))));
        let unbound = pay(&f, None, 1000);
        let out = s.handle_request(&req(2, "/a", Some(&unbound)), 1000);
        assert_eq!(status(&out), Some((402, Some(RejectReason::ResourceMismatch))));
        let out = s.handle_request(&req(3, "/a", Some(&pp)), 1000);
        assert!(matches!(out[0], ServerAction::CallVerify { .. }));
    }

    #[test]
    fn stale_replay_reports_freshness_not_claim() {
        let f = fx();
        let m = Mitigations {
            m3_idempotency: true,
            ..Mitigations::default()
        };
        let mut s = server(&f, ExecutionPolicy::Optimistic, m);
        let pp = pay(&f, None, 1000);
        s.handle_request(&req(1, "/a", Some(&pp)), 1000);
        let late = 1000 + DEFAULT_FRESHNESS_WINDOW_MS + 1;
        let out = s.handle_request(&req(2, "/a", Some(&pp)), late);
        assert_eq!(status(&out), Some((402, Some(RejectReason::Stale))));
    }

    #[test]
    fn cache_header_only_with_m5() {
        let f = fx();
        for m5 in [false, true] {
            let m = Mitigations {
                m5_cache_control: m5,
                ..Mitigations::default()
            };
            let mut s = server(&f, ExecutionPolicy::Optimistic, m);
            let pp = pay(&f, None, 1000);
            s.handle_request(&req(1, "/a", Some(&pp)), 1000);
            let out = s.on_verify_reply(1, VerifyVerdict::VALID, 1050);
            let ServerAction::Respond { response, .. } = &out[1] else { panic!() };
            let expected = m5.then_some(NO_STORE_PRIVATE);
            assert_eq!(response.header(CACHE_CONTROL), expected);
        }
    }

    #[test]
    fn tampered_and_malformed_headers() {
        let f = fx();
        let mut s = server(&f, ExecutionPolicy::Optimistic, Mitigations::default());
        let out = s.handle_request(&req(1, "/a", None).with_header(X_PAYMENT, "%%%"), 1000);
        assert_eq!(status(&out), Some((402, Some(RejectReason::Malformed))));
        let mut pp = pay(&f, None, 1000);
        pp.sigma[3] ^= 0xff;
        let out = s.handle_request(&req(2, "/a", Some(&pp)), 1000);
        assert_eq!(status(&out), Some((402, Some(RejectReason::BadSignature))));
    }

    #[test]
    fn config_invariants() {
        let f = fx();
        let bad = ServerConfig {
            freshness_window_ms: 300_000,
            ..ServerConfig::default()
        };
        assert!(Server::new(bad, f.provider.clone()).is_err());
        let bad = ServerConfig {
            mitigations: Mitigations {
                m1_facilitator_binding: true,
                ..Mitigations::default()
            },
            ..ServerConfig::default()
        };
        assert!(Server::new(bad, f.provider.clone()).is_err());
    }
}
