//! One simulation instance: client, path, server, facilitator, contract and
//! chain on a shared logical clock.
//!
//! Chain events at time `t` are processed before queued messages at `t`.
//! Messages at equal times run in scheduling order.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chain::{Chain, ChainEvent, ChainParams};
use crate::facilitator::{Facilitator, FacilitatorConfig, SettleFailure, SettleReport, VerifyVerdict};
use crate::model::{
    Address, Millis, Nonce, PaymentFields, PaymentPayload, PaymentRequirements, SignatureMode, SignatureProvider,
    SigningKey,
};
use crate::server::{Server, ServerAction, ServerConfig};
use crate::settlement::{SettlementRecord, TokenLedger};
use crate::sim::EventQueue;
use crate::trace::{Actor, Event, Trace};
use crate::web::{ClientId, HttpRequest, HttpResponse, PathConfig, WebPath, X_PAYMENT};

use super::HarnessError;

/// Chain id used by every simulated deployment.
pub const CHAIN_ID: u64 = 84532;
/// Starting balance of every client.
pub const CLIENT_FUNDS: u128 = 1_000_000_000_000;
/// Hard cap on processed events per run.
const MAX_STEPS: usize = 5_000_000;

/// Key material shared by all instances of an experiment.
#[derive(Debug, Clone)]
pub struct Parties {
    pub provider: Arc<SignatureProvider>,
    pub clients: Vec<SigningKey>,
    pub facilitator: Address,
    pub merchant: Address,
    pub attacker: Address,
}

impl Parties {
    pub fn new(n_clients: usize, mode: SignatureMode) -> Self {
        let mut provider = SignatureProvider::new(mode);
        let clients = (0..n_clients)
            .map(|i| provider.register_label(&format!("client-{i}")).1)
            .collect();
        let facilitator = provider.register_label("facilitator").0;
        let merchant = provider.register_label("merchant").0;
        let attacker = provider.register_label("attacker").0;
        Parties {
            provider: Arc::new(provider),
            clients,
            facilitator,
            merchant,
            attacker,
        }
    }

    /// Default one-resource price table paying the merchant.
    pub fn price_table(&self, paths: &[&str], amount: u64) -> BTreeMap<String, PaymentRequirements> {
        paths
            .iter()
            .map(|p| {
                (
                    p.to_string(),
                    PaymentRequirements {
                        resource_id: p.to_string(),
                        amount,
                        token: "USDC".into(),
                        chain_id: CHAIN_ID,
                        receiver: self.merchant,
                        expiry: 0,
                        meta: BTreeMap::new(),
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// Sign the requested resource into the payload.
    pub bind_resource: bool,
    /// Sign the server's facilitator into the payload.
    pub bind_facilitator: bool,
}

/// Front-runner that copies payment headers seen by an observer and submits
/// them to the contract `submit_offset_ms` later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerConfig {
    pub submit_offset_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub chain: ChainParams,
    pub server: ServerConfig,
    pub facilitator: FacilitatorConfig,
    pub path: PathConfig,
    pub client: ClientConfig,
    pub attacker: Option<AttackerConfig>,
    /// Chain keeps mining until settlements reach this depth.
    pub watch_depth: u64,
}

#[derive(Debug, Clone)]
enum Msg {
    ClientSend(HttpRequest),
    ServerRecv(u64),
    ClientRecv {
        req_id: u64,
        response: HttpResponse,
        from_cache: bool,
    },
    FacVerify {
        session: u64,
        pp: PaymentPayload,
        pr: PaymentRequirements,
    },
    FacSettle {
        session: u64,
        pp: PaymentPayload,
        pr: PaymentRequirements,
        reserve: bool,
    },
    VerifyReply {
        session: u64,
        verdict: VerifyVerdict,
    },
    SettleReply {
        session: u64,
        tx: Option<crate::model::TxHash>,
        report: SettleReport,
    },
    DirectSettle {
        pp: PaymentPayload,
        caller: Address,
        actor: Actor,
    },
}

#[derive(Debug, Clone)]
struct InFlight {
    forwarded: HttpRequest,
    mutated: bool,
    paid: bool,
}

/// Response as seen by a client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientResponse {
    pub req_id: u64,
    pub t: Millis,
    pub status: u16,
    pub from_cache: bool,
}

pub struct World {
    parties: Parties,
    cfg: WorldConfig,
    queue: EventQueue<Msg>,
    pub chain: Chain,
    pub ledger: TokenLedger,
    pub facilitator: Facilitator,
    pub server: Server,
    pub path: WebPath,
    pub trace: Trace,
    inflight: BTreeMap<u64, InFlight>,
    sessions: BTreeMap<u64, crate::model::PayId>,
    pub responses: BTreeMap<u64, ClientResponse>,
    next_req: u64,
    now: Millis,
}

impl World {
    pub fn new(cfg: WorldConfig, parties: &Parties, seed: u64) -> Result<Self, HarnessError> {
        cfg.path.validate().map_err(HarnessError::Config)?;
        cfg.facilitator
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut chain = Chain::new(ChainParams { seed, ..cfg.chain }).map_err(|e| HarnessError::Config(e.to_string()))?;
        chain.set_watch_depth(cfg.watch_depth);
        let mut ledger = TokenLedger::new(parties.provider.clone(), CHAIN_ID);
        for c in &parties.clients {
            ledger.mint(c.address(), CLIENT_FUNDS);
        }
        let facilitator = Facilitator::new(
            cfg.facilitator,
            parties.facilitator,
            parties.provider.clone(),
            seed.rotate_left(17) ^ 0xfac1_11ad,
        );
        let server_cfg = ServerConfig {
            facilitator: cfg.server.facilitator.or(Some(parties.facilitator)),
            ..cfg.server.clone()
        };
        let server = Server::new(server_cfg, parties.provider.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(World {
            parties: parties.clone(),
            path: WebPath::new(cfg.path.clone()),
            cfg,
            queue: EventQueue::new(),
            chain,
            ledger,
            facilitator,
            server,
            trace: Trace::new(),
            inflight: BTreeMap::new(),
            sessions: BTreeMap::new(),
            responses: BTreeMap::new(),
            next_req: 0,
            now: 0,
        })
    }

    pub fn parties(&self) -> &Parties {
        &self.parties
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    /// Builds and signs a payment for `path` from client `client`.
    pub fn payment(&self, client: usize, path: &str, nonce: u64, ts: Millis) -> PaymentPayload {
        let key = &self.parties.clients[client];
        let pr = &self.server.config().price_table[path];
        let fields = PaymentFields {
            payer_addr: key.address(),
            receiver: pr.receiver,
            amount: pr.amount,
            chain_id: pr.chain_id,
            nonce: Nonce::from_u64(nonce),
            ts,
            resource_id: self.cfg.client.bind_resource.then(|| path.to_string()),
            facilitator: self.cfg.client.bind_facilitator.then_some(self.parties.facilitator),
        };
        self.parties
            .provider
            .sign_payload(fields, key)
            .expect("client keys are registered")
    }

    /// Schedules a client request and returns its id.
    pub fn send(&mut self, t: Millis, client: ClientId, path: &str, payment: Option<&PaymentPayload>) -> u64 {
        let id = self.next_req;
        self.next_req += 1;
        let mut req = HttpRequest::get(id, client, path);
        if let Some(pp) = payment {
            req = req.with_header(X_PAYMENT, pp.to_header());
        }
        self.queue.push(t, Msg::ClientSend(req));
        id
    }

    /// Schedules a contract submission outside the facilitator, e.g. an
    /// earlier use of the same nonce.
    pub fn direct_settle(&mut self, t: Millis, pp: PaymentPayload, caller: Address, actor: Actor) {
        self.queue.push(t, Msg::DirectSettle { pp, caller, actor });
    }

    /// Runs until no messages remain and the chain is idle.
    pub fn run(&mut self) -> Result<(), HarnessError> {
        let mut steps = 0;
        loop {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(HarnessError::Invariant("event budget exhausted".into()));
            }
            let q = self.queue.peek_time();
            let c = self.chain.next_event_time();
            let chain_first = match (c, q) {
                (Some(c), Some(q)) => c <= q,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if chain_first {
                let t = c.expect("checked above");
                self.now = t;
                let events = self.chain.advance_to(t);
                self.on_chain_events(events);
            } else {
                let (t, msg) = self.queue.pop().expect("checked above");
                self.now = t;
                let events = self.chain.advance_to(t);
                if !events.is_empty() {
                    self.on_chain_events(events);
                }
                self.handle(t, msg);
            }
        }
        self.trace.push(
            self.now,
            Actor::Chain,
            Event::RunEnd {
                height: self.chain.height(),
            },
        );
        Ok(())
    }

    fn on_chain_events(&mut self, events: Vec<ChainEvent>) {
        for ev in events {
            match ev {
                ChainEvent::Block { t, height } => self.trace.push(t, Actor::Chain, Event::Block { height }),
                ChainEvent::TxIncluded { t, tx, height } => {
                    self.trace.push(t, Actor::Chain, Event::TxIncluded { tx_hash: tx, height })
                }
                ChainEvent::TxDropped { t, tx } => {
                    self.ledger.revert(&tx);
                    self.trace.push(t, Actor::Chain, Event::TxDropped { tx_hash: tx });
                }
            }
        }
        let t = self.now;
        for r in self.facilitator.on_chain_update(&self.chain) {
            self.emit_report(t, r.session, r.tx, r.report);
        }
    }

    fn emit_report(&mut self, t: Millis, session: u64, tx: Option<crate::model::TxHash>, report: SettleReport) {
        if let Some(pay_id) = self.sessions.get(&session).copied() {
            self.trace.push(
                t,
                Actor::Facilitator,
                Event::SettleReport {
                    session,
                    pay_id,
                    tx_hash: tx,
                    report,
                },
            );
        }
        let at = t + self.path.config().f_to_r_total();
        self.queue.push(at, Msg::SettleReply { session, tx, report });
    }

    fn trace_settlement(
        &mut self,
        t: Millis,
        actor: Actor,
        pp: &PaymentPayload,
        caller: Address,
        result: &Result<SettlementRecord, crate::settlement::SettlementError>,
    ) {
        let (tx_hash, outcome) = match result {
            Ok(rec) => (Some(rec.tx_hash), "applied".to_string()),
            Err(e) => (None, serde_json::to_value(e).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()),
        };
        self.trace.push(
            t,
            actor,
            Event::Settlement {
                tx_hash,
                caller,
                authorizer: pp.fields.payer_addr,
                nonce: pp.fields.nonce,
                amount: pp.fields.amount,
                outcome,
                pay_id: pp.payment_id,
            },
        );
    }

    fn handle(&mut self, t: Millis, msg: Msg) {
        let delays = *self.path.delays();
        match msg {
            Msg::ClientSend(req) => {
                let pay_id = req
                    .header(X_PAYMENT)
                    .and_then(|h| PaymentPayload::from_header(h).ok())
                    .map(|pp| pp.payment_id);
                let paid = req.header(X_PAYMENT).is_some();
                self.trace.push(
                    t,
                    Actor::Client,
                    Event::RequestSent {
                        req_id: req.id,
                        client: req.client,
                        path: req.path.clone(),
                        paid,
                        pay_id,
                    },
                );
                let fwd = self.path.forward(req);
                if let Some(attacker) = self.cfg.attacker {
                    for header in &fwd.observed {
                        if let Ok(pp) = PaymentPayload::from_header(header) {
                            self.queue.push(
                                t + attacker.submit_offset_ms,
                                Msg::DirectSettle {
                                    pp,
                                    caller: self.parties.attacker,
                                    actor: Actor::Attacker,
                                },
                            );
                        }
                    }
                }
                let id = fwd.request.id;
                self.inflight.insert(
                    id,
                    InFlight {
                        forwarded: fwd.request,
                        mutated: fwd.mutated,
                        paid,
                    },
                );
                match fwd.cache_hit {
                    Some(response) => self.queue.push(
                        t + delays.c_to_r + delays.r_to_c,
                        Msg::ClientRecv {
                            req_id: id,
                            response,
                            from_cache: true,
                        },
                    ),
                    None => self.queue.push(t + delays.c_to_r, Msg::ServerRecv(id)),
                }
            }
            Msg::ServerRecv(id) => {
                let req = self.inflight[&id].forwarded.clone();
                let actions = self.server.handle_request(&req, t);
                self.apply(t, actions);
            }
            Msg::ClientRecv {
                req_id,
                response,
                from_cache,
            } => {
                let info = self.inflight.remove(&req_id).expect("response for a sent request");
                self.trace.push(
                    t,
                    Actor::Client,
                    Event::ResponseReceived {
                        req_id,
                        status: response.status,
                        mutated: info.mutated,
                        served_from_cache: from_cache,
                        paid: info.paid,
                    },
                );
                self.responses.insert(
                    req_id,
                    ClientResponse {
                        req_id,
                        t,
                        status: response.status,
                        from_cache,
                    },
                );
            }
            Msg::FacVerify { session, pp, pr } => {
                let verdict = self.facilitator.verify(&pp, &pr, t);
                let at = t + self.facilitator.config().verify_latency_ms + self.path.config().f_to_r_total();
                self.queue.push(at, Msg::VerifyReply { session, verdict });
            }
            Msg::FacSettle {
                session,
                pp,
                pr,
                reserve,
            } => {
                let before = self.ledger.records().count();
                let start = self
                    .facilitator
                    .settle(session, &pp, &pr, reserve, &mut self.ledger, &mut self.chain, t);
                let fac = self.facilitator.address();
                match (&start.tx, &start.immediate) {
                    (Some(tx), _) => {
                        let rec = self.ledger.record(tx).cloned().expect("submitted tx has a record");
                        self.trace_settlement(t, Actor::Facilitator, &pp, fac, &Ok(rec));
                    }
                    (None, Some(SettleReport::Failed(SettleFailure::Settlement(e)))) => {
                        self.trace_settlement(t, Actor::Facilitator, &pp, fac, &Err(*e));
                    }
                    _ => {}
                }
                debug_assert!(self.ledger.records().count() <= before + 1);
                if let Some(report) = start.immediate {
                    self.emit_report(t, session, start.tx, report);
                }
                // A zero inclusion delay lands in this same instant.
                let reports = self.facilitator.on_chain_update(&self.chain);
                for r in reports {
                    self.emit_report(t, r.session, r.tx, r.report);
                }
            }
            Msg::VerifyReply { session, verdict } => {
                self.trace.push(
                    t,
                    Actor::Server,
                    Event::VerifyReply {
                        session,
                        is_valid: verdict.is_valid,
                    },
                );
                let actions = self.server.on_verify_reply(session, verdict, t);
                self.apply(t, actions);
            }
            Msg::SettleReply { session, tx, report } => {
                let actions = self.server.on_settle_report(session, tx, report, t);
                self.apply(t, actions);
            }
            Msg::DirectSettle { pp, caller, actor } => {
                let kind = self.facilitator.config().contract;
                let result = self.ledger.settle(kind, &mut self.chain, &pp, caller, t);
                self.trace_settlement(t, actor, &pp, caller, &result);
            }
        }
    }

    fn apply(&mut self, t: Millis, actions: Vec<ServerAction>) {
        let delays = *self.path.delays();
        for a in actions {
            match a {
                ServerAction::Respond {
                    req_id,
                    response,
                    reason,
                } => {
                    self.trace.push(
                        t,
                        Actor::Server,
                        Event::Respond {
                            req_id,
                            status: response.status,
                            reason,
                        },
                    );
                    let fwd = self.inflight[&req_id].forwarded.clone();
                    self.path.on_response(&fwd, &response, t);
                    self.queue.push(
                        t + delays.r_to_c,
                        Msg::ClientRecv {
                            req_id,
                            response,
                            from_cache: false,
                        },
                    );
                }
                ServerAction::Grant(g) => self.trace.push(t, Actor::Server, Event::Grant(g)),
                ServerAction::CallVerify { session, pp, pr } => {
                    self.sessions.insert(session, pp.payment_id);
                    self.trace.push(
                        t,
                        Actor::Server,
                        Event::VerifyCall {
                            session,
                            pay_id: pp.payment_id,
                        },
                    );
                    self.queue.push(t + delays.r_to_f, Msg::FacVerify { session, pp, pr });
                }
                ServerAction::CallSettle {
                    session,
                    pp,
                    pr,
                    reserve,
                } => {
                    self.sessions.insert(session, pp.payment_id);
                    self.trace.push(
                        t,
                        Actor::Server,
                        Event::SettleCall {
                            session,
                            pay_id: pp.payment_id,
                        },
                    );
                    self.queue.push(
                        t + delays.r_to_f,
                        Msg::FacSettle {
                            session,
                            pp,
                            pr,
                            reserve,
                        },
                    );
                }
            }
        }
    }
}
