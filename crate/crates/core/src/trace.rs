//! Timestamped event traces.
//!
//! Each event serializes as one JSON object
//! `{"t": .., "actor": .., "event": .., "fields": {..}}`. Every metric is a
//! fold over these events.

use serde::{Deserialize, Serialize};

use crate::facilitator::SettleReport;
use crate::model::{Address, Millis, Nonce, PayId, TxHash};
use crate::server::{GrantRecord, RejectReason};
use crate::web::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Client,
    Path,
    Server,
    Facilitator,
    Chain,
    Attacker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "fields", rename_all = "snake_case")]
pub enum Event {
    /// A client request leaves the client. `pay_id` is set when it carries a
    /// payment, which marks the payment presentation.
    RequestSent {
        req_id: u64,
        client: ClientId,
        path: String,
        paid: bool,
        pay_id: Option<PayId>,
    },
    ResponseReceived {
        req_id: u64,
        status: u16,
        mutated: bool,
        served_from_cache: bool,
        paid: bool,
    },
    Respond {
        req_id: u64,
        status: u16,
        reason: Option<RejectReason>,
    },
    Grant(GrantRecord),
    VerifyCall {
        session: u64,
        pay_id: PayId,
    },
    VerifyReply {
        session: u64,
        is_valid: bool,
    },
    SettleCall {
        session: u64,
        pay_id: PayId,
    },
    SettleReport {
        session: u64,
        pay_id: PayId,
        tx_hash: Option<TxHash>,
        report: SettleReport,
    },
    /// A settlement-contract call. `outcome` is `applied` or the error name;
    /// `tx_hash` is absent for rejected calls.
    Settlement {
        tx_hash: Option<TxHash>,
        caller: Address,
        authorizer: Address,
        nonce: Nonce,
        amount: u64,
        outcome: String,
        pay_id: PayId,
    },
    Block {
        height: u64,
    },
    TxIncluded {
        tx_hash: TxHash,
        height: u64,
    },
    TxDropped {
        tx_hash: TxHash,
    },
    RunEnd {
        height: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: Millis,
    pub actor: Actor,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Millis, actor: Actor, event: Event) {
        self.events.push(TraceEvent { t, actor, event });
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { events })
    }
}
