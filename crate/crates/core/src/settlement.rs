//! Token ledger and the two settlement-contract models.
//!
//! `transfer_with_authorization` follows EIP-3009: anyone holding a signed
//! authorization may submit it, and the caller is never checked.
//! `permit2_settle` follows the Permit2 proxy pattern, where the signed
//! witness may name a facilitator and the contract may require
//! `caller == witness.facilitator`.
//!
//! State changes apply at submission and the transaction is broadcast to the
//! chain. If the chain later drops the transaction, [`TokenLedger::revert`]
//! restores balances and releases the nonce; reverted transactions do not
//! re-enter the mempool.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::Chain;
use crate::model::{Address, Millis, Nonce, PayId, PaymentPayload, SignatureProvider, TxHash};

/// Default on-chain `validBefore` offset from the payload timestamp (300 s).
pub const DEFAULT_VALIDITY_WINDOW_MS: Millis = 300_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum SettlementError {
    #[error("authorization nonce already consumed")]
    NonceConsumed,
    #[error("authorization expired")]
    Expired,
    #[error("authorization signature invalid")]
    BadSignature,
    #[error("caller is not the facilitator named in the witness")]
    CallerMismatch,
    #[error("payer balance too low")]
    InsufficientFunds,
    #[error("authorization targets a different chain")]
    WrongChain,
    #[error("transaction was reorged out")]
    Reverted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Permit2Config {
    pub witness_has_facilitator: bool,
    pub enforce_caller: bool,
}

impl Permit2Config {
    pub const UNBOUND: Permit2Config = Permit2Config {
        witness_has_facilitator: false,
        enforce_caller: false,
    };
    pub const CALLER_BOUND: Permit2Config = Permit2Config {
        witness_has_facilitator: true,
        enforce_caller: true,
    };

    pub fn validate(&self) -> Result<(), String> {
        if self.enforce_caller && !self.witness_has_facilitator {
            return Err("enforce_caller requires a facilitator in the witness".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContractKind {
    #[default]
    Eip3009,
    Permit2(Permit2Config),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Applied,
    Reverted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementRecord {
    pub tx_hash: TxHash,
    pub pay_id: PayId,
    pub caller: Address,
    pub authorizer: Address,
    pub receiver: Address,
    pub nonce: Nonce,
    pub amount: u64,
    pub submitted_at: Millis,
    pub status: RecordStatus,
}

#[derive(Debug, Clone)]
pub struct TokenLedger {
    provider: Arc<SignatureProvider>,
    chain_id: u64,
    validity_window_ms: Millis,
    balances: BTreeMap<Address, u128>,
    used_nonces: BTreeMap<(Address, Nonce), TxHash>,
    records: BTreeMap<TxHash, SettlementRecord>,
    submissions: u64,
    total_supply: u128,
}

impl TokenLedger {
    pub fn new(provider: Arc<SignatureProvider>, chain_id: u64) -> Self {
        TokenLedger {
            provider,
            chain_id,
            validity_window_ms: DEFAULT_VALIDITY_WINDOW_MS,
            balances: BTreeMap::new(),
            used_nonces: BTreeMap::new(),
            records: BTreeMap::new(),
            submissions: 0,
            total_supply: 0,
        }
    }

    pub fn with_validity_window(mut self, window: Millis) -> Self {
        self.validity_window_ms = window;
        self
    }

    /// Genesis allocation.
    pub fn mint(&mut self, to: Address, amount: u128) {
        *self.balances.entry(to).or_default() += amount;
        self.total_supply += amount;
    }

    pub fn balance_of(&self, addr: &Address) -> u128 {
        self.balances.get(addr).copied().unwrap_or(0)
    }

    pub fn total_supply(&self) -> u128 {
        self.total_supply
    }

    pub fn sum_of_balances(&self) -> u128 {
        self.balances.values().sum()
    }

    pub fn nonce_used(&self, authorizer: &Address, nonce: &Nonce) -> bool {
        self.used_nonces.contains_key(&(*authorizer, *nonce))
    }

    pub fn record(&self, tx: &TxHash) -> Option<&SettlementRecord> {
        self.records.get(tx)
    }

    pub fn records(&self) -> impl Iterator<Item = &SettlementRecord> {
        self.records.values()
    }

    /// EIP-3009 `transferWithAuthorization`. The caller is recorded but not
    /// checked.
    pub fn transfer_with_authorization(
        &mut self,
        chain: &mut Chain,
        auth: &PaymentPayload,
        caller: Address,
        now: Millis,
    ) -> Result<SettlementRecord, SettlementError> {
        self.check_authorization(auth, now)?;
        self.apply(chain, auth, caller, now)
    }

    /// Permit2-style `settle`. The witness facilitator is the payload's
    /// signed `facilitator` field.
    pub fn permit2_settle(
        &mut self,
        chain: &mut Chain,
        permit: &PaymentPayload,
        caller: Address,
        cfg: Permit2Config,
        now: Millis,
    ) -> Result<SettlementRecord, SettlementError> {
        debug_assert!(cfg.validate().is_ok());
        self.check_signature(permit)?;
        if cfg.witness_has_facilitator && cfg.enforce_caller && permit.fields.facilitator != Some(caller) {
            return Err(SettlementError::CallerMismatch);
        }
        self.check_authorization(permit, now)?;
        self.apply(chain, permit, caller, now)
    }

    pub fn settle(
        &mut self,
        kind: ContractKind,
        chain: &mut Chain,
        pp: &PaymentPayload,
        caller: Address,
        now: Millis,
    ) -> Result<SettlementRecord, SettlementError> {
        match kind {
            ContractKind::Eip3009 => self.transfer_with_authorization(chain, pp, caller, now),
            ContractKind::Permit2(cfg) => self.permit2_settle(chain, pp, caller, cfg, now),
        }
    }

    fn check_signature(&self, auth: &PaymentPayload) -> Result<(), SettlementError> {
        self.provider
            .verify_payload(auth)
            .map_err(|_| SettlementError::BadSignature)
    }

    fn check_authorization(&self, auth: &PaymentPayload, now: Millis) -> Result<(), SettlementError> {
        self.check_signature(auth)?;
        if auth.fields.chain_id != self.chain_id {
            return Err(SettlementError::WrongChain);
        }
        if now > auth.fields.ts.saturating_add(self.validity_window_ms) {
            return Err(SettlementError::Expired);
        }
        if self.nonce_used(&auth.fields.payer_addr, &auth.fields.nonce) {
            return Err(SettlementError::NonceConsumed);
        }
        if self.balance_of(&auth.fields.payer_addr) < auth.fields.amount as u128 {
            return Err(SettlementError::InsufficientFunds);
        }
        Ok(())
    }

    fn apply(
        &mut self,
        chain: &mut Chain,
        auth: &PaymentPayload,
        caller: Address,
        now: Millis,
    ) -> Result<SettlementRecord, SettlementError> {
        let f = &auth.fields;
        let tx_hash = self.next_tx_hash(auth.payment_id, caller);
        chain.broadcast(tx_hash, now).expect("tx hashes are unique per submission");
        *self.balances.entry(f.payer_addr).or_default() -= f.amount as u128;
        *self.balances.entry(f.receiver).or_default() += f.amount as u128;
        self.used_nonces.insert((f.payer_addr, f.nonce), tx_hash);
        let record = SettlementRecord {
            tx_hash,
            pay_id: auth.payment_id,
            caller,
            authorizer: f.payer_addr,
            receiver: f.receiver,
            nonce: f.nonce,
            amount: f.amount,
            submitted_at: now,
            status: RecordStatus::Applied,
        };
        self.records.insert(tx_hash, record.clone());
        Ok(record)
    }

    fn next_tx_hash(&mut self, pay_id: PayId, caller: Address) -> TxHash {
        let mut h = Sha256::new();
        h.update(b"x402-testbed/tx\n");
        h.update(pay_id.0);
        h.update(caller.0);
        h.update(self.submissions.to_be_bytes());
        self.submissions += 1;
        TxHash(h.finalize().into())
    }

    /// Undoes a settlement whose transaction left the canonical chain.
    /// Returns `false` for unknown or already reverted transactions.
    pub fn revert(&mut self, tx: &TxHash) -> bool {
        let Some(rec) = self.records.get_mut(tx) else {
            return false;
        };
        if rec.status == RecordStatus::Reverted {
            return false;
        }
        rec.status = RecordStatus::Reverted;
        let amount = rec.amount as u128;
        *self.balances.entry(rec.receiver).or_default() -= amount;
        *self.balances.entry(rec.authorizer).or_default() += amount;
        self.used_nonces.remove(&(rec.authorizer, rec.nonce));
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ChainParams, InclusionModel};
    use crate::model::{PaymentFields, SignatureMode, SigningKey};
    use proptest::prelude::*;

    struct Fixture {
        chain: Chain,
        ledger: TokenLedger,
        payer: SigningKey,
        provider: Arc<SignatureProvider>,
        merchant: Address,
        facilitator: Address,
        attacker: Address,
    }

    fn fixture() -> Fixture {
        let mut provider = SignatureProvider::new(SignatureMode::WellFormed);
        let (payer_addr, payer) = provider.register_label("payer");
        let provider = Arc::new(provider);
        let mut ledger = TokenLedger::new(provider.clone(), 84532);
        ledger.mint(payer_addr, 1_000_000);
        let chain = Chain::new(ChainParams {
            inclusion: InclusionModel::Fixed { delay_ms: 1000 },
            ..ChainParams::default()
        })
        .unwrap();
        Fixture {
            chain,
            ledger,
            payer,
            provider,
            merchant: SigningKey::derive("merchant").address(),
            facilitator: SigningKey::derive("facilitator").address(),
            attacker: SigningKey::derive("attacker").address(),
        }
    }

    fn payload(fx: &Fixture, nonce: u64, facilitator: Option<Address>) -> PaymentPayload {
        let fields = PaymentFields {
            payer_addr: fx.payer.address(),
            receiver: fx.merchant,
            amount: 1000,
            chain_id: 84532,
            nonce: Nonce::from_u64(nonce),
            ts: 10_000,
            resource_id: None,
            facilitator,
        };
        fx.provider.sign_payload(fields, &fx.payer).unwrap()
    }

    #[test]
    fn honest_first_attacker_second() {
        let mut fx = fixture();
        let pp = payload(&fx, 1, None);
        let (fac, att) = (fx.facilitator, fx.attacker);
        fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, fac, 10_100).unwrap();
        assert_eq!(
            fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, att, 10_200),
            Err(SettlementError::NonceConsumed)
        );
    }

    #[test]
    fn attacker_first_consumes_nonce_and_charges_payer() {
        let mut fx = fixture();
        let pp = payload(&fx, 1, None);
        let (fac, att) = (fx.facilitator, fx.attacker);
        let rec = fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, att, 10_100).unwrap();
        assert_eq!(rec.caller, att);
        assert_eq!(fx.ledger.balance_of(&fx.payer.address()), 999_000);
        assert_eq!(fx.ledger.balance_of(&fx.merchant), 1000);
        assert_eq!(
            fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, fac, 10_200),
            Err(SettlementError::NonceConsumed)
        );
    }

    #[test]
    fn expired_authorization_changes_nothing() {
        let mut fx = fixture();
        let pp = payload(&fx, 1, None);
        let fac = fx.facilitator;
        let late = 10_000 + DEFAULT_VALIDITY_WINDOW_MS + 1;
        assert_eq!(
            fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, fac, late),
            Err(SettlementError::Expired)
        );
        assert_eq!(fx.ledger.balance_of(&fx.payer.address()), 1_000_000);
        assert!(!fx.ledger.nonce_used(&fx.payer.address(), &pp.fields.nonce));
    }

    #[test]
    fn bad_signature_rejected() {
        let mut fx = fixture();
        let mut pp = payload(&fx, 1, None);
        pp.sigma[0] ^= 1;
        let fac = fx.facilitator;
        assert_eq!(
            fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, fac, 10_100),
            Err(SettlementError::BadSignature)
        );
    }

    #[test]
    fn permit2_unbound_lets_attacker_settle() {
        let mut fx = fixture();
        let pp = payload(&fx, 1, Some(fx.facilitator));
        let (fac, att) = (fx.facilitator, fx.attacker);
        fx.ledger
            .permit2_settle(&mut fx.chain, &pp, att, Permit2Config::UNBOUND, 10_100)
            .unwrap();
        assert_eq!(
            fx.ledger.permit2_settle(&mut fx.chain, &pp, fac, Permit2Config::UNBOUND, 10_200),
            Err(SettlementError::NonceConsumed)
        );
    }

    #[test]
    fn permit2_caller_bound() {
        let mut fx = fixture();
        let pp = payload(&fx, 1, Some(fx.facilitator));
        let (fac, att) = (fx.facilitator, fx.attacker);
        assert_eq!(
            fx.ledger.permit2_settle(&mut fx.chain, &pp, att, Permit2Config::CALLER_BOUND, 10_100),
            Err(SettlementError::CallerMismatch)
        );
        assert!(!fx.ledger.nonce_used(&fx.payer.address(), &pp.fields.nonce));
        fx.ledger
            .permit2_settle(&mut fx.chain, &pp, fac, Permit2Config::CALLER_BOUND, 10_200)
            .unwrap();
    }

    #[test]
    fn nonce_shared_across_contract_models() {
        let mut fx = fixture();
        let pp = payload(&fx, 1, Some(fx.facilitator));
        let fac = fx.facilitator;
        fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, fac, 10_100).unwrap();
        assert_eq!(
            fx.ledger.permit2_settle(&mut fx.chain, &pp, fac, Permit2Config::CALLER_BOUND, 10_200),
            Err(SettlementError::NonceConsumed)
        );
    }

    #[test]
    fn replays_move_balance_once() {
        let mut fx = fixture();
        let pp = payload(&fx, 1, None);
        let fac = fx.facilitator;
        let ok = (0..20)
            .filter(|i| {
                fx.ledger
                    .transfer_with_authorization(&mut fx.chain, &pp, fac, 10_100 + i)
                    .is_ok()
            })
            .count();
        assert_eq!(ok, 1);
        assert_eq!(fx.ledger.balance_of(&fx.merchant), 1000);
    }

    #[test]
    fn revert_after_reorg_restores_state() {
        let mut fx = fixture();
        fx.chain.set_watch_depth(2);
        let pp = payload(&fx, 1, None);
        let fac = fx.facilitator;
        let rec = fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, fac, 10_100).unwrap();
        fx.chain.advance_to(11_100);
        let dropped = fx.chain.inject_reorg(1);
        assert_eq!(dropped, vec![rec.tx_hash]);
        for tx in &dropped {
            assert!(fx.ledger.revert(tx));
        }
        assert!(!fx.ledger.revert(&rec.tx_hash));
        assert_eq!(fx.ledger.balance_of(&fx.payer.address()), 1_000_000);
        assert_eq!(fx.ledger.balance_of(&fx.merchant), 0);
        assert!(!fx.ledger.nonce_used(&fx.payer.address(), &pp.fields.nonce));
        assert!(fx
            .ledger
            .records()
            .all(|r| r.status == RecordStatus::Reverted));
    }

    #[test]
    fn insufficient_funds() {
        let mut fx = fixture();
        let fields = PaymentFields {
            amount: 2_000_000,
            ..payload(&fx, 1, None).fields
        };
        let pp = fx.provider.sign_payload(fields, &fx.payer).unwrap();
        let fac = fx.facilitator;
        assert_eq!(
            fx.ledger.transfer_with_authorization(&mut fx.chain, &pp, fac, 10_100),
            Err(SettlementError::InsufficientFunds)
        );
    }

    proptest! {
        #[test]
        fn conservation_and_single_settlement(
            seed in any::<u64>(),
            ops in prop::collection::vec((0u64..6, 0u8..3, any::<bool>()), 1..60),
        ) {
            let mut fx = fixture();
            fx.chain = Chain::new(ChainParams { p_reorg: 0.3, seed, ..ChainParams::default() }).unwrap();
            fx.chain.set_watch_depth(3);
            let supply = fx.ledger.total_supply();
            let payloads: Vec<_> = (0..6).map(|n| payload(&fx, n, Some(fx.facilitator))).collect();
            let mut t = 10_000;
            for (which, caller, permit) in ops {
                t += 137;
                for ev in fx.chain.advance_to(t) {
                    if let crate::chain::ChainEvent::TxDropped { tx, .. } = ev {
                        fx.ledger.revert(&tx);
                    }
                }
                let caller = [fx.facilitator, fx.attacker, fx.merchant][caller as usize];
                let pp = &payloads[which as usize];
                let kind = if permit { ContractKind::Permit2(Permit2Config::UNBOUND) } else { ContractKind::Eip3009 };
                let _ = fx.ledger.settle(kind, &mut fx.chain, pp, caller, t);
                prop_assert_eq!(fx.ledger.sum_of_balances(), supply);
                for pp in &payloads {
                    let live = fx.ledger.records()
                        .filter(|r| r.pay_id == pp.payment_id && r.status == RecordStatus::Applied)
                        .count();
                    prop_assert!(live <= 1);
                }
            }
        }
    }
}
