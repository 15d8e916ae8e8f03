//! A deterministic single-writer ledger hosting channel contracts.
//!
//! The contract can only check signatures, hashlocks and timelocks. Every
//! state change emits one event that carries the operation's inputs, so the
//! event log alone rebuilds the ledger.

mod access;
mod settlement;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use access::*;
pub use settlement::*;

use crate::crypto::{hash_commit, verify, Canonical, Digest, SecretPreimage, Signature, SignatureSchemeId};
use crate::protocol::{AccountId, Amount, ChannelId, ChannelMode, ChannelParams, CloseRecord, LedgerId, Party, Promise, Receipt, Tick};

pub const DEFAULT_PENALTY_BPS: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LedgerError {
    #[error("channel {0} already exists")]
    AlreadyExists(ChannelId),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("insufficient funds: balance {balance}, need {needed}")]
    InsufficientFunds { balance: Amount, needed: Amount },
    #[error("operation not allowed in status {0:?}")]
    BadStatus(ContractStatus),
    #[error("promise expired")]
    Expired,
    #[error("preimage does not match hashlock")]
    BadPreimage,
    #[error("bad signature")]
    BadSignature,
    #[error("hashlock already claimed")]
    AlreadyClaimed,
    #[error("promise is covered by a recorded receipt; inclusion proof missing or invalid")]
    ProofRequired,
    #[error("balances {got} do not sum to deposits {expected}")]
    ConservationViolation { expected: Amount, got: Amount },
    #[error("dispute window closed")]
    WindowClosed,
    #[error("dispute window still open")]
    WindowOpen,
    #[error("receipt does not supersede the recorded one")]
    StaleReceipt,
    #[error("message belongs to another channel or direction")]
    WrongChannel,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("amount must be positive")]
    InvalidAmount,
    #[error("time must advance by at least one tick")]
    InvalidTime,
    #[error("{0}")]
    Remote(String),
}

impl LedgerError {
    pub fn code(&self) -> &'static str {
        match self {
            LedgerError::AlreadyExists(_) => "AlreadyExists",
            LedgerError::NotFound(_) => "NotFound",
            LedgerError::InsufficientFunds { .. } => "InsufficientFunds",
            LedgerError::BadStatus(_) => "BadStatus",
            LedgerError::Expired => "Expired",
            LedgerError::BadPreimage => "BadPreimage",
            LedgerError::BadSignature => "BadSignature",
            LedgerError::AlreadyClaimed => "AlreadyClaimed",
            LedgerError::ProofRequired => "ProofRequired",
            LedgerError::ConservationViolation { .. } => "ConservationViolation",
            LedgerError::WindowClosed => "WindowClosed",
            LedgerError::WindowOpen => "WindowOpen",
            LedgerError::StaleReceipt => "StaleReceipt",
            LedgerError::WrongChannel => "WrongChannel",
            LedgerError::InvalidParams(_) => "InvalidParams",
            LedgerError::InvalidAmount => "InvalidAmount",
            LedgerError::InvalidTime => "InvalidTime",
            LedgerError::Remote(_) => "Remote",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerConfig {
    pub ledger_id: LedgerId,
    pub scheme: SignatureSchemeId,
    pub genesis_balances: BTreeMap<AccountId, Amount>,
    #[serde(default = "default_penalty_bps")]
    pub penalty_bps: u64,
}

fn default_penalty_bps() -> u64 {
    DEFAULT_PENALTY_BPS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContractStatus {
    Open,
    Closing,
    Closed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmittedReceipt {
    pub receipt: Receipt,
    pub submitted_by: Party,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispute {
    pub opened_at: Tick,
    pub opened_by: Party,
    /// Highest receipt recorded per issuer.
    pub receipts: BTreeMap<Party, SubmittedReceipt>,
    /// Parties caught submitting a stale receipt of their own.
    pub misbehaving: BTreeSet<Party>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Penalty {
    pub offender: Party,
    pub amount: Amount,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractInstance {
    pub channel_id: ChannelId,
    pub params: ChannelParams,
    pub deposits: Balances,
    pub claimed: BTreeMap<Digest, ClaimRecord>,
    pub dispute: Option<Dispute>,
    pub status: ContractStatus,
    pub settlement: Option<Balances>,
}

impl ContractInstance {
    pub fn recorded_receipt(&self, issuer: Party) -> Option<&Receipt> {
        self.dispute.as_ref()?.receipts.get(&issuer).map(|s| &s.receipt)
    }

    pub fn window_end(&self) -> Option<Tick> {
        self.dispute.as_ref().map(|d| d.opened_at + self.params.dispute_window)
    }

    /// Claims are accepted while open and during the dispute window.
    fn check_claimable(&self, now: Tick) -> Result<(), LedgerError> {
        match self.status {
            ContractStatus::Open => Ok(()),
            ContractStatus::Closing if self.window_end().is_some_and(|end| now < end) => Ok(()),
            ContractStatus::Closing => Err(LedgerError::WindowClosed),
            ContractStatus::Closed => Err(LedgerError::BadStatus(self.status)),
        }
    }

    /// Settlement the contract would pay out if finalized now.
    pub fn projected_settlement(&self, penalty_bps: u64) -> (Balances, Vec<Penalty>) {
        let mut balances = compute_settlement(
            self.params.mode,
            self.deposits,
            self.recorded_receipt(Party::Client),
            self.recorded_receipt(Party::Hub),
            self.claimed.values(),
        );
        let mut penalties = Vec::new();
        if let Some(d) = &self.dispute {
            for &offender in &d.misbehaving {
                let amount = apply_penalty(&mut balances, offender, penalty_bps);
                penalties.push(Penalty { offender, amount });
            }
        }
        (balances, penalties)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "how", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CloseKind {
    Cooperative { record: CloseRecord, client_sig: Signature, hub_sig: Signature },
    Dispute,
}

/// A state-changing ledger operation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LedgerOp {
    Deploy { params: ChannelParams, deployer: AccountId },
    Deposit { channel_id: ChannelId, party: Party, amount: Amount },
    Claim { channel_id: ChannelId, claimant: Party, promise: Promise, preimage: SecretPreimage, proof: Option<InclusionProof> },
    SubmitProof { channel_id: ChannelId, hashlock: Digest, proof: InclusionProof },
    CooperativeClose { record: CloseRecord, client_sig: Signature, hub_sig: Signature },
    InitiateDispute { channel_id: ChannelId, party: Party, receipt: Option<Receipt> },
    RespondDispute { channel_id: ChannelId, party: Party, receipt: Receipt },
    Finalize { channel_id: ChannelId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventPayload {
    Deployed { params: ChannelParams, deployer: AccountId },
    Deposited { channel_id: ChannelId, party: Party, amount: Amount },
    Claimed { channel_id: ChannelId, claimant: Party, promise: Promise, preimage: SecretPreimage, proof: Option<InclusionProof> },
    ProofSubmitted { channel_id: ChannelId, hashlock: Digest, proof: InclusionProof },
    DisputeOpened { channel_id: ChannelId, party: Party, receipt: Option<Receipt> },
    ReceiptSubmitted { channel_id: ChannelId, party: Party, receipt: Receipt },
    Closed { channel_id: ChannelId, close: CloseKind, settlement: Balances, penalties: Vec<Penalty> },
}

impl EventPayload {
    pub fn channel_id(&self) -> &ChannelId {
        match self {
            EventPayload::Deployed { params, .. } => &params.channel_id,
            EventPayload::Deposited { channel_id, .. }
            | EventPayload::Claimed { channel_id, .. }
            | EventPayload::ProofSubmitted { channel_id, .. }
            | EventPayload::DisputeOpened { channel_id, .. }
            | EventPayload::ReceiptSubmitted { channel_id, .. }
            | EventPayload::Closed { channel_id, .. } => channel_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::Deployed { .. } => "DEPLOYED",
            EventPayload::Deposited { .. } => "DEPOSITED",
            EventPayload::Claimed { .. } => "CLAIMED",
            EventPayload::ProofSubmitted { .. } => "PROOF_SUBMITTED",
            EventPayload::DisputeOpened { .. } => "DISPUTE_OPENED",
            EventPayload::ReceiptSubmitted { .. } => "RECEIPT_SUBMITTED",
            EventPayload::Closed { .. } => "CLOSED",
        }
    }

    /// The operation that produced this event.
    pub fn to_op(&self) -> LedgerOp {
        match self.clone() {
            EventPayload::Deployed { params, deployer } => LedgerOp::Deploy { params, deployer },
            EventPayload::Deposited { channel_id, party, amount } => LedgerOp::Deposit { channel_id, party, amount },
            EventPayload::Claimed { channel_id, claimant, promise, preimage, proof } => {
                LedgerOp::Claim { channel_id, claimant, promise, preimage, proof }
            }
            EventPayload::ProofSubmitted { channel_id, hashlock, proof } => LedgerOp::SubmitProof { channel_id, hashlock, proof },
            EventPayload::DisputeOpened { channel_id, party, receipt } => LedgerOp::InitiateDispute { channel_id, party, receipt },
            EventPayload::ReceiptSubmitted { channel_id, party, receipt } => LedgerOp::RespondDispute { channel_id, party, receipt },
            EventPayload::Closed { channel_id, close, .. } => match close {
                CloseKind::Cooperative { record, client_sig, hub_sig } => {
                    LedgerOp::CooperativeClose { record, client_sig, hub_sig }
                }
                CloseKind::Dispute => LedgerOp::Finalize { channel_id },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    pub at: Tick,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// Everything a reader can see about one contract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractView {
    pub now: Tick,
    pub contract: ContractInstance,
    pub events: Vec<LedgerEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub config: LedgerConfig,
    pub now: Tick,
    pub accounts: BTreeMap<AccountId, Amount>,
    pub contracts: BTreeMap<ChannelId, ContractInstance>,
    pub events: Vec<LedgerEvent>,
}

impl Ledger {
    pub fn new(config: LedgerConfig) -> Self {
        let accounts = config.genesis_balances.clone();
        Ledger { config, now: 0, accounts, contracts: BTreeMap::new(), events: Vec::new() }
    }

    pub fn id(&self) -> &LedgerId {
        &self.config.ledger_id
    }

    pub fn balance(&self, account: &AccountId) -> Amount {
        self.accounts.get(account).copied().unwrap_or(0)
    }

    pub fn contract(&self, channel_id: &ChannelId) -> Result<&ContractInstance, LedgerError> {
        self.contracts.get(channel_id).ok_or_else(|| LedgerError::NotFound(channel_id.to_string()))
    }

    fn contract_mut(&mut self, channel_id: &ChannelId) -> Result<&mut ContractInstance, LedgerError> {
        self.contracts.get_mut(channel_id).ok_or_else(|| LedgerError::NotFound(channel_id.to_string()))
    }

    fn emit(&mut self, payload: EventPayload) -> LedgerEvent {
        let event = LedgerEvent { seq: self.events.len() as u64 + 1, at: self.now, payload };
        self.events.push(event.clone());
        event
    }

    pub fn read_state(&self, channel_id: &ChannelId) -> Result<ContractView, LedgerError> {
        let contract = self.contract(channel_id)?.clone();
        let events = self.events.iter().filter(|e| e.payload.channel_id() == channel_id).cloned().collect();
        Ok(ContractView { now: self.now, contract, events })
    }

    pub fn events_since(&self, seq: u64) -> &[LedgerEvent] {
        let start = (seq as usize).min(self.events.len());
        &self.events[start..]
    }

    /// Sum of account balances and funds locked in unsettled contracts.
    pub fn total_value(&self) -> Amount {
        let locked: Amount = self
            .contracts
            .values()
            .filter(|c| c.status != ContractStatus::Closed)
            .map(|c| c.deposits.total())
            .sum();
        self.accounts.values().sum::<Amount>() + locked
    }

    /// Advances the clock and returns contracts whose dispute window has just elapsed.
    pub fn advance_time(&mut self, ticks: Tick) -> Result<Vec<ChannelId>, LedgerError> {
        if ticks == 0 {
            return Err(LedgerError::InvalidTime);
        }
        let before = self.now;
        self.now += ticks;
        Ok(self
            .contracts
            .values()
            .filter(|c| c.status == ContractStatus::Closing)
            .filter(|c| c.window_end().is_some_and(|end| before < end && end <= self.now))
            .map(|c| c.channel_id.clone())
            .collect())
    }

    pub fn apply(&mut self, op: LedgerOp) -> Result<LedgerEvent, LedgerError> {
        match op {
            LedgerOp::Deploy { params, deployer } => self.deploy_contract(params, deployer),
            LedgerOp::Deposit { channel_id, party, amount } => self.deposit(&channel_id, party, amount),
            LedgerOp::Claim { channel_id, claimant, promise, preimage, proof } => {
                self.claim_promise(&channel_id, claimant, promise, preimage, proof)
            }
            LedgerOp::SubmitProof { channel_id, hashlock, proof } => self.submit_inclusion_proof(&channel_id, hashlock, proof),
            LedgerOp::CooperativeClose { record, client_sig, hub_sig } => self.cooperative_close(record, client_sig, hub_sig),
            LedgerOp::InitiateDispute { channel_id, party, receipt } => self.initiate_dispute(&channel_id, party, receipt),
            LedgerOp::RespondDispute { channel_id, party, receipt } => self.respond_dispute(&channel_id, party, receipt),
            LedgerOp::Finalize { channel_id } => self.finalize_settlement(&channel_id),
        }
    }

    pub fn deploy_contract(&mut self, params: ChannelParams, deployer: AccountId) -> Result<LedgerEvent, LedgerError> {
        if self.contracts.contains_key(&params.channel_id) {
            return Err(LedgerError::AlreadyExists(params.channel_id));
        }
        if deployer != params.hub_id {
            return Err(LedgerError::InvalidParams("only the hub deploys channel contracts".into()));
        }
        if params.ledger_id != self.config.ledger_id || params.scheme != self.config.scheme {
            return Err(LedgerError::InvalidParams(format!(
                "ledger {} uses scheme {}",
                self.config.ledger_id, self.config.scheme
            )));
        }
        params.validate().map_err(LedgerError::InvalidParams)?;
        let contract = ContractInstance {
            channel_id: params.channel_id.clone(),
            params: params.clone(),
            deposits: Balances::default(),
            claimed: BTreeMap::new(),
            dispute: None,
            status: ContractStatus::Open,
            settlement: None,
        };
        self.contracts.insert(params.channel_id.clone(), contract);
        Ok(self.emit(EventPayload::Deployed { params, deployer }))
    }

    pub fn deposit(&mut self, channel_id: &ChannelId, party: Party, amount: Amount) -> Result<LedgerEvent, LedgerError> {
        if amount == 0 {
            return Err(LedgerError::InvalidAmount);
        }
        let contract = self.contract(channel_id)?;
        if contract.status != ContractStatus::Open {
            return Err(LedgerError::BadStatus(contract.status));
        }
        let account = contract.params.account_of(party);
        let balance = self.balance(&account);
        if balance < amount {
            return Err(LedgerError::InsufficientFunds { balance, needed: amount });
        }
        self.accounts.insert(account, balance - amount);
        *self.contract_mut(channel_id)?.deposits.get_mut(party) += amount;
        Ok(self.emit(EventPayload::Deposited { channel_id: channel_id.clone(), party, amount }))
    }

    pub fn claim_promise(
        &mut self,
        channel_id: &ChannelId,
        claimant: Party,
        promise: Promise,
        preimage: SecretPreimage,
        proof: Option<InclusionProof>,
    ) -> Result<LedgerEvent, LedgerError> {
        let now = self.now;
        let contract = self.contract(channel_id)?;
        contract.check_claimable(now)?;
        if promise.body.channel_id != *channel_id || promise.body.from != claimant.other() {
            return Err(LedgerError::WrongChannel);
        }
        let sender_pk = contract.params.key_of(promise.body.from);
        if !promise.verify_sig(sender_pk) {
            return Err(LedgerError::BadSignature);
        }
        if now >= promise.body.expiry {
            return Err(LedgerError::Expired);
        }
        if hash_commit(&preimage) != promise.hashlock() {
            return Err(LedgerError::BadPreimage);
        }
        if contract.claimed.contains_key(&promise.hashlock()) {
            return Err(LedgerError::AlreadyClaimed);
        }
        let mode = contract.params.mode;
        if let Some(p) = &proof {
            if mode == ChannelMode::Concurrent && !p.verify(&promise, sender_pk) {
                return Err(LedgerError::ProofRequired);
            }
        }
        let proven_against = match (mode, &proof) {
            (ChannelMode::Concurrent, Some(p)) => Some(p.receipt.digest()),
            _ => None,
        };
        if let Some(recorded) = contract.recorded_receipt(promise.body.from) {
            if promise.body.index <= recorded.body.index && proven_against != Some(recorded.digest()) {
                return Err(LedgerError::ProofRequired);
            }
        }
        let record = ClaimRecord {
            claimant,
            amount: promise.body.amount,
            promise: promise.clone(),
            preimage,
            at: now,
            proven_against,
        };
        self.contract_mut(channel_id)?.claimed.insert(promise.hashlock(), record);
        Ok(self.emit(EventPayload::Claimed { channel_id: channel_id.clone(), claimant, promise, preimage, proof }))
    }

    /// Re-proves an existing claim against a receipt recorded after it.
    pub fn submit_inclusion_proof(
        &mut self,
        channel_id: &ChannelId,
        hashlock: Digest,
        proof: InclusionProof,
    ) -> Result<LedgerEvent, LedgerError> {
        let contract = self.contract(channel_id)?;
        contract.check_claimable(self.now)?;
        if contract.params.mode != ChannelMode::Concurrent {
            return Err(LedgerError::InvalidParams("inclusion proofs need a concurrent channel".into()));
        }
        let claim = contract.claimed.get(&hashlock).ok_or_else(|| LedgerError::NotFound(hashlock.to_hex()))?;
        if !proof.verify(&claim.promise, contract.params.key_of(claim.promise.body.from)) {
            return Err(LedgerError::ProofRequired);
        }
        let digest = proof.receipt.digest();
        self.contract_mut(channel_id)?.claimed.get_mut(&hashlock).expect("checked above").proven_against = Some(digest);
        Ok(self.emit(EventPayload::ProofSubmitted { channel_id: channel_id.clone(), hashlock, proof }))
    }

    pub fn cooperative_close(
        &mut self,
        record: CloseRecord,
        client_sig: Signature,
        hub_sig: Signature,
    ) -> Result<LedgerEvent, LedgerError> {
        let contract = self.contract(&record.channel_id)?;
        if contract.status != ContractStatus::Open {
            return Err(LedgerError::BadStatus(contract.status));
        }
        let bytes = record.canonical_bytes();
        if !verify(&contract.params.client_pk, &bytes, &client_sig) || !verify(&contract.params.hub_pk, &bytes, &hub_sig) {
            return Err(LedgerError::BadSignature);
        }
        let expected = contract.deposits.total();
        let got = record.client_balance as u128 + record.hub_balance as u128;
        if got != expected as u128 {
            return Err(LedgerError::ConservationViolation { expected, got: got.min(Amount::MAX as u128) as Amount });
        }
        let settlement = Balances { client: record.client_balance, hub: record.hub_balance };
        let channel_id = record.channel_id.clone();
        self.pay_out(&channel_id, settlement)?;
        Ok(self.emit(EventPayload::Closed {
            channel_id,
            close: CloseKind::Cooperative { record, client_sig, hub_sig },
            settlement,
            penalties: Vec::new(),
        }))
    }

    pub fn initiate_dispute(
        &mut self,
        channel_id: &ChannelId,
        party: Party,
        receipt: Option<Receipt>,
    ) -> Result<LedgerEvent, LedgerError> {
        let now = self.now;
        let contract = self.contract(channel_id)?;
        if contract.status != ContractStatus::Open {
            return Err(LedgerError::BadStatus(contract.status));
        }
        let mut receipts = BTreeMap::new();
        if let Some(r) = &receipt {
            let issuer = party.other();
            if r.body.channel_id != *channel_id || r.body.from != issuer || !r.verify_sig(contract.params.key_of(issuer)) {
                return Err(LedgerError::BadSignature);
            }
            receipts.insert(issuer, SubmittedReceipt { receipt: r.clone(), submitted_by: party });
        }
        let contract = self.contract_mut(channel_id)?;
        contract.status = ContractStatus::Closing;
        contract.dispute = Some(Dispute { opened_at: now, opened_by: party, receipts, misbehaving: BTreeSet::new() });
        Ok(self.emit(EventPayload::DisputeOpened { channel_id: channel_id.clone(), party, receipt }))
    }

    /// Records a higher receipt for its issuer's direction. A party whose own
    /// receipt is superseded by its counterparty is marked as misbehaving.
    pub fn respond_dispute(&mut self, channel_id: &ChannelId, party: Party, receipt: Receipt) -> Result<LedgerEvent, LedgerError> {
        let now = self.now;
        let contract = self.contract(channel_id)?;
        if contract.status != ContractStatus::Closing {
            return Err(LedgerError::BadStatus(contract.status));
        }
        if now >= contract.window_end().expect("closing contracts have a dispute") {
            return Err(LedgerError::WindowClosed);
        }
        let issuer = receipt.body.from;
        if receipt.body.channel_id != *channel_id || !receipt.verify_sig(contract.params.key_of(issuer)) {
            return Err(LedgerError::BadSignature);
        }
        let dispute = self.contract_mut(channel_id)?.dispute.as_mut().expect("closing contracts have a dispute");
        if let Some(existing) = dispute.receipts.get(&issuer) {
            let old = &existing.receipt.body;
            if receipt.body.index <= old.index || receipt.body.cumulative_credit <= old.cumulative_credit {
                return Err(LedgerError::StaleReceipt);
            }
            if existing.submitted_by == issuer && party != issuer {
                dispute.misbehaving.insert(issuer);
            }
        }
        dispute.receipts.insert(issuer, SubmittedReceipt { receipt: receipt.clone(), submitted_by: party });
        Ok(self.emit(EventPayload::ReceiptSubmitted { channel_id: channel_id.clone(), party, receipt }))
    }

    pub fn finalize_settlement(&mut self, channel_id: &ChannelId) -> Result<LedgerEvent, LedgerError> {
        let contract = self.contract(channel_id)?;
        if contract.status != ContractStatus::Closing {
            return Err(LedgerError::BadStatus(contract.status));
        }
        if self.now < contract.window_end().expect("closing contracts have a dispute") {
            return Err(LedgerError::WindowOpen);
        }
        let (settlement, penalties) = contract.projected_settlement(self.config.penalty_bps);
        self.pay_out(channel_id, settlement)?;
        Ok(self.emit(EventPayload::Closed { channel_id: channel_id.clone(), close: CloseKind::Dispute, settlement, penalties }))
    }

    fn pay_out(&mut self, channel_id: &ChannelId, settlement: Balances) -> Result<(), LedgerError> {
        let contract = self.contract_mut(channel_id)?;
        contract.status = ContractStatus::Closed;
        contract.settlement = Some(settlement);
        let params = contract.params.clone();
        for party in [Party::Client, Party::Hub] {
            *self.accounts.entry(params.account_of(party)).or_insert(0) += settlement.get(party);
        }
        Ok(())
    }

    /// Rebuilds a ledger by re-executing `events` from genesis. Fails if any
    /// event does not reproduce exactly.
    pub fn replay(config: LedgerConfig, events: &[LedgerEvent], now: Tick) -> Result<Ledger, LedgerError> {
        let mut ledger = Ledger::new(config);
        for event in events {
            ledger.now = event.at;
            let produced = ledger.apply(event.payload.to_op())?;
            if produced != *event {
                return Err(LedgerError::InvalidParams(format!("event {} did not replay identically", event.seq)));
            }
        }
        ledger.now = now;
        Ok(ledger)
    }

    /// The event log as JSON lines with sorted keys.
    pub fn export_events(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            let value = serde_json::to_value(event).expect("events serialize");
            out.push_str(&value.to_string());
            out.push('\n');
        }
        out
    }

    pub fn import_events(jsonl: &str) -> Result<Vec<LedgerEvent>, serde_json::Error> {
        jsonl.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
    }

    pub fn snapshot(&self) -> String {
        serde_json::to_value(self).expect("ledger serializes").to_string()
    }

    pub fn from_snapshot(json: &str) -> Result<Ledger, serde_json::Error> {
        serde_json::from_str(json)
    }
}
