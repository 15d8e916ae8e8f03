//! The wallet: one client's end of its channel with the hub, the payment
//! flows on both sides, and the background handler that claims, disputes
//! and reconciles on-chain.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{verify, Canonical, Digest, Keypair};
use crate::hub::{prove_against, FeePolicy};
use crate::ledger::{
    compute_settlement, Balances, ContractStatus, ContractView, EventPayload, InclusionProof, LedgerAccess, LedgerError,
    LedgerEvent, LedgerOp,
};
use crate::protocol::{
    Amount, ChannelError, ChannelId, ChannelMode, ChannelParams, ChannelState, ClientId, CloseRecord, LedgerId, Party,
    PaymentProposal, Promise, Receipt, Tick,
};
use crate::wire::WireMessage;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalletConfig {
    /// Claim on-chain once `expiry - now <= claim_threshold`.
    pub claim_threshold: Tick,
    pub poll_interval: Tick,
    /// Ticks between repeats of an unacknowledged secret or close request.
    pub resend_after: Tick,
    /// Ticks after a cooperative close attempt before disputing.
    pub close_timeout: Tick,
    /// Wait before retrying a payment refused as busy.
    pub retry_after: Tick,
    /// Lifetime of an invoice's payee leg; zero means `2 * delta + 20`.
    pub invoice_ttl: Tick,
    /// How long a payment intent waits for its invoice.
    pub intent_ttl: Tick,
}

impl Default for WalletConfig {
    fn default() -> Self {
        WalletConfig {
            claim_threshold: 5,
            poll_interval: 1,
            resend_after: 3,
            close_timeout: 20,
            retry_after: 2,
            invoice_ttl: 0,
            intent_ttl: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum WalletError {
    #[error("wallet has no channel")]
    NoChannel,
    #[error("channel contract not verified")]
    NotVerified,
    #[error("deployed contract does not match: {0}")]
    ParamsMismatch(String),
    #[error("contract not found")]
    NotFound,
    #[error("fee policy leaves nothing for the payee")]
    FeeTooHigh,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
}

impl WalletError {
    pub fn code(&self) -> &'static str {
        match self {
            WalletError::NoChannel => "NoChannel",
            WalletError::NotVerified => "NotVerified",
            WalletError::ParamsMismatch(_) => "ParamsMismatch",
            WalletError::NotFound => "NotFound",
            WalletError::FeeTooHigh => "FeeTooHigh",
            WalletError::Channel(e) => e.code(),
            WalletError::Ledger(e) => e.code(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Sent,
    Received,
    Settlement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Paid,
    Received,
    Failed,
    ClaimOnChain,
    Settled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentRecord {
    pub payment_id: String,
    pub direction: Direction,
    pub amount: Amount,
    pub outcome: Outcome,
    pub detail: Option<String>,
    pub at: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnownContract {
    pub channel_id: ChannelId,
    pub verified: bool,
}

/// An invoice we issued and are waiting to be paid on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invoice {
    pub proposal: PaymentProposal,
    pub payer: ClientId,
    pub promise: Option<Promise>,
    pub revealed_at: Option<Tick>,
    pub last_sent: Tick,
}

/// A payment we are making.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutPayment {
    pub proposal: PaymentProposal,
    pub gross: Amount,
    pub promise: Option<Promise>,
    pub retry_at: Option<Tick>,
}

/// A request to pay `payee`, waiting for the matching invoice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayIntent {
    pub intent_id: String,
    pub payee: ClientId,
    pub amount: Amount,
    pub created: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseAttempt {
    pub started: Tick,
    pub last_sent: Option<Tick>,
    pub accepted: bool,
    pub disputed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ClientAction {
    Claimed { hashlock: Digest, amount: Amount },
    DisputeOpened,
    ReceiptSubmitted { issuer: Party },
    ProofSubmitted { hashlock: Digest },
    Finalized,
    Failed { step: String, error: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClientTick {
    pub messages: Vec<WireMessage>,
    pub actions: Vec<ClientAction>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wallet {
    pub client_id: ClientId,
    pub keypair: Keypair,
    pub ledger_id: LedgerId,
    pub mode: ChannelMode,
    pub config: WalletConfig,
    pub fee_bps: u64,
    pub channel: Option<ChannelState>,
    pub known_contract: Option<KnownContract>,
    pub status: Option<ContractStatus>,
    pub window_end: Option<Tick>,
    pub settlement: Option<Balances>,
    pub payment_log: Vec<PaymentRecord>,
    pub invoices: BTreeMap<Digest, Invoice>,
    pub payments: BTreeMap<Digest, OutPayment>,
    pub intents: Vec<PayIntent>,
    pub close: Option<CloseAttempt>,
    /// Last ledger event sequence number processed.
    pub cursor: u64,
    pub intent_counter: u64,
    pub last_poll: Option<Tick>,
}

impl Wallet {
    pub fn new(client_id: ClientId, keypair: Keypair, ledger_id: LedgerId, mode: ChannelMode, config: WalletConfig) -> Self {
        Wallet {
            client_id,
            keypair,
            ledger_id,
            mode,
            config,
            fee_bps: 0,
            channel: None,
            known_contract: None,
            status: None,
            window_end: None,
            settlement: None,
            payment_log: Vec::new(),
            invoices: BTreeMap::new(),
            payments: BTreeMap::new(),
            intents: Vec::new(),
            close: None,
            cursor: 0,
            intent_counter: 0,
            last_poll: None,
        }
    }

    pub fn register_message(&self) -> WireMessage {
        WireMessage::Register {
            client_id: self.client_id.clone(),
            client_pk: self.keypair.public.clone(),
            ledger_id: self.ledger_id.clone(),
            mode: self.mode,
        }
    }

    pub fn channel(&self) -> Result<&ChannelState, WalletError> {
        self.channel.as_ref().ok_or(WalletError::NoChannel)
    }

    fn channel_mut(&mut self) -> Result<&mut ChannelState, WalletError> {
        self.channel.as_mut().ok_or(WalletError::NoChannel)
    }

    pub fn is_open(&self) -> bool {
        self.status == Some(ContractStatus::Open)
    }

    /// Nothing in flight: no open invoices, payments, intents or close.
    pub fn is_idle(&self) -> bool {
        self.invoices.is_empty()
            && self.payments.is_empty()
            && self.intents.is_empty()
            && (self.close.is_none() || self.status == Some(ContractStatus::Closed))
            && self.status != Some(ContractStatus::Closing)
    }

    fn log(&mut self, payment_id: &str, direction: Direction, amount: Amount, outcome: Outcome, detail: Option<String>, at: Tick) {
        self.payment_log.push(PaymentRecord { payment_id: payment_id.into(), direction, amount, outcome, detail, at });
    }

    /// Checks that the hub deployed exactly the contract it reported.
    pub fn verify_deployment(&self, params: &ChannelParams, ledger: &mut dyn LedgerAccess) -> Result<ContractView, WalletError> {
        let view = match ledger.read_state(&params.ledger_id, &params.channel_id) {
            Ok(v) => v,
            Err(LedgerError::NotFound(_)) => return Err(WalletError::NotFound),
            Err(e) => return Err(e.into()),
        };
        let deployed = &view.contract.params;
        let mismatch = |what: &str| Err(WalletError::ParamsMismatch(what.into()));
        if deployed.client_pk != self.keypair.public {
            return mismatch("client_pk");
        }
        if deployed.client_id != self.client_id {
            return mismatch("client_id");
        }
        if deployed.ledger_id != self.ledger_id {
            return mismatch("ledger_id");
        }
        if deployed.mode != self.mode {
            return mismatch("mode");
        }
        if deployed != params {
            return mismatch("reported params");
        }
        if view.contract.status != ContractStatus::Open {
            return mismatch("status");
        }
        Ok(view)
    }

    /// Adopts the channel the hub reported once the deployment checks out.
    pub fn on_registered(
        &mut self,
        params: ChannelParams,
        fee_bps: u64,
        ledger: &mut dyn LedgerAccess,
    ) -> Result<(), WalletError> {
        self.known_contract = Some(KnownContract { channel_id: params.channel_id.clone(), verified: false });
        let view = self.verify_deployment(&params, ledger)?;
        let mut ch = ChannelState::new(params.clone(), Party::Client);
        ch.peer_deposit = view.contract.deposits.hub;
        ch.my_deposit = view.contract.deposits.client;
        self.cursor = view.events.iter().map(|e| e.seq).max().unwrap_or(0);
        self.channel = Some(ch);
        self.fee_bps = fee_bps;
        self.status = Some(ContractStatus::Open);
        self.window_end = None;
        self.settlement = None;
        self.close = None;
        self.known_contract = Some(KnownContract { channel_id: params.channel_id, verified: true });
        Ok(())
    }

    pub fn deposit(&mut self, amount: Amount, ledger: &mut dyn LedgerAccess) -> Result<LedgerEvent, WalletError> {
        if !self.known_contract.as_ref().is_some_and(|k| k.verified) {
            return Err(WalletError::NotVerified);
        }
        let ch = self.channel()?;
        let op = LedgerOp::Deposit { channel_id: ch.channel_id().clone(), party: Party::Client, amount };
        let event = ledger.submit(&self.ledger_id, op)?;
        self.channel_mut()?.my_deposit += amount;
        Ok(event)
    }

    fn delta(&self) -> Tick {
        self.channel.as_ref().map_or(50, |c| c.params.claim_margin_delta)
    }

    /// Step 0: issue an invoice to `payer`, relayed through the hub.
    pub fn invoice(&mut self, amount: Amount, payer: ClientId, now: Tick, rng: &mut dyn RngCore) -> Result<WireMessage, WalletError> {
        if !self.is_open() {
            return Err(ChannelError::ChannelClosing.into());
        }
        let ttl = if self.config.invoice_ttl > 0 { self.config.invoice_ttl } else { 2 * self.delta() + 20 };
        let me = self.client_id.clone();
        let proposal = self.channel_mut()?.make_proposal(amount, now + ttl, now, me, rng)?;
        self.invoices.insert(
            proposal.hashlock,
            Invoice { proposal: proposal.clone(), payer: payer.clone(), promise: None, revealed_at: None, last_sent: now },
        );
        Ok(WireMessage::ProposalRelay { proposal, payer })
    }

    /// Registers the wish to pay `payee`; the payment starts when its invoice arrives.
    pub fn expect_invoice(&mut self, payee: ClientId, amount: Amount, now: Tick) -> String {
        self.intent_counter += 1;
        let intent_id = format!("intent-{}", self.intent_counter);
        self.intents.push(PayIntent { intent_id: intent_id.clone(), payee, amount, created: now });
        intent_id
    }

    /// Step 1 for an invoice: a promise to the hub, grossed up for the fee,
    /// expiring `delta` after the payee's leg.
    pub fn send_payment(&mut self, proposal: PaymentProposal, now: Tick) -> Result<Option<WireMessage>, WalletError> {
        let gross = FeePolicy { fee_bps: self.fee_bps }.gross_up(proposal.amount).ok_or(WalletError::FeeTooHigh)?;
        let h = proposal.hashlock;
        self.payments.insert(h, OutPayment { proposal, gross, promise: None, retry_at: None });
        self.attempt_payment(&h, now)
    }

    fn attempt_payment(&mut self, h: &Digest, now: Tick) -> Result<Option<WireMessage>, WalletError> {
        let delta = self.delta();
        let pay = self.payments.get(h).expect("caller inserted").clone();
        // The hub needs 2 * delta of room on our leg after one tick of delivery.
        if pay.proposal.expiry + delta <= now + 2 * delta + 1 {
            self.fail_payment(h, "Timeout", now);
            return Ok(None);
        }
        let leg = PaymentProposal { amount: pay.gross, expiry: pay.proposal.expiry + delta, ..pay.proposal.clone() };
        let key = self.keypair.private.clone();
        match self.channel_mut()?.make_promise(&leg, &key, now) {
            Ok(promise) => {
                let entry = self.payments.get_mut(h).expect("present");
                entry.promise = Some(promise.clone());
                entry.retry_at = None;
                Ok(Some(WireMessage::Promise { promise, payee: Some(pay.proposal.payee_route.clone()) }))
            }
            Err(ChannelError::ChannelBusy) => {
                self.payments.get_mut(h).expect("present").retry_at = Some(now + self.config.retry_after);
                Ok(None)
            }
            Err(e) => {
                self.fail_payment(h, e.code(), now);
                Err(e.into())
            }
        }
    }

    fn fail_payment(&mut self, h: &Digest, why: &str, now: Tick) {
        if let Some(p) = self.payments.remove(h) {
            if p.promise.is_some() {
                if let Some(ch) = self.channel.as_mut() {
                    ch.cancel_promise(h);
                }
            }
            self.log(&p.proposal.proposal_id, Direction::Sent, p.proposal.amount, Outcome::Failed, Some(why.into()), now);
        }
    }

    fn fail_invoice(&mut self, h: &Digest, why: &str, now: Tick) {
        if let Some(inv) = self.invoices.remove(h) {
            self.log(&inv.proposal.proposal_id, Direction::Received, inv.proposal.amount, Outcome::Failed, Some(why.into()), now);
        }
    }

    /// Handles one message from the hub and returns the replies.
    pub fn handle(&mut self, msg: WireMessage, now: Tick, ledger: &mut dyn LedgerAccess) -> Vec<WireMessage> {
        let result = match msg {
            WireMessage::Registered { params, fee_bps, .. } => self.on_registered(params, fee_bps, ledger).map(|_| Vec::new()),
            WireMessage::ProposalRelay { proposal, .. } => self.on_invoice(proposal, now),
            WireMessage::Promise { promise, .. } => Ok(self.on_promise(promise, now)),
            WireMessage::Secret { secret } => {
                let key = self.keypair.private.clone();
                match self.channel_mut().and_then(|ch| Ok(ch.accept_secret(&secret, &key, now)?)) {
                    Ok(receipt) => {
                        if let Some(p) = self.payments.remove(&secret.hashlock) {
                            self.log(&p.proposal.proposal_id, Direction::Sent, p.proposal.amount, Outcome::Paid, None, now);
                        }
                        Ok(vec![WireMessage::Receipt { receipt }])
                    }
                    Err(e) => {
                        log::debug!("{}: secret refused: {e}", self.client_id);
                        Ok(Vec::new())
                    }
                }
            }
            WireMessage::Receipt { receipt } => Ok(self.on_receipt(receipt, now)),
            WireMessage::Error { code, hashlock: Some(h), .. } => {
                self.on_refused(&h, &code, now);
                Ok(Vec::new())
            }
            WireMessage::CloseAccept { record, hub_sig } => {
                if let (Some(ch), Some(close)) = (self.channel.as_ref(), self.close.as_mut()) {
                    if verify(&ch.params.hub_pk, &record.canonical_bytes(), &hub_sig) {
                        close.accepted = true;
                    }
                }
                Ok(Vec::new())
            }
            _ => Ok(Vec::new()),
        };
        result.unwrap_or_else(|e| {
            log::debug!("{}: {e}", self.client_id);
            Vec::new()
        })
    }

    fn on_invoice(&mut self, proposal: PaymentProposal, now: Tick) -> Result<Vec<WireMessage>, WalletError> {
        let Some(pos) =
            self.intents.iter().position(|i| i.payee == proposal.payee_route && i.amount == proposal.amount)
        else {
            return Ok(Vec::new());
        };
        self.intents.remove(pos);
        if self.payments.contains_key(&proposal.hashlock) {
            return Ok(Vec::new());
        }
        Ok(self.send_payment(proposal, now).unwrap_or(None).into_iter().collect())
    }

    /// Steps 2 to 3 on the payee side: verify the hub's promise against our
    /// invoice, then reveal the secret.
    fn on_promise(&mut self, promise: Promise, now: Tick) -> Vec<WireMessage> {
        let h = promise.hashlock();
        let refuse = |code: &str| vec![WireMessage::error(code, "promise refused", Some(h))];
        let Some(inv) = self.invoices.get(&h) else { return refuse("UnknownPromise") };
        if inv.promise.is_some() {
            return Vec::new();
        }
        let wanted = inv.proposal.amount;
        let threshold = self.config.claim_threshold;
        let Some(ch) = self.channel.as_mut() else { return refuse("NoChannel") };
        if let Err(reason) = ch.accept_promise(promise.clone(), now) {
            return refuse(&format!("{reason:?}"));
        }
        if promise.body.amount < wanted || promise.body.expiry <= now + threshold {
            ch.drop_incoming(&h);
            return refuse("InvalidPromise");
        }
        let Ok(secret) = ch.reveal_secret(&h) else { return refuse("NoSecret") };
        let inv = self.invoices.get_mut(&h).expect("checked above");
        inv.promise = Some(promise);
        inv.revealed_at = Some(now);
        inv.last_sent = now;
        vec![WireMessage::Secret { secret }]
    }

    fn on_receipt(&mut self, receipt: Receipt, now: Tick) -> Vec<WireMessage> {
        let Some(ch) = self.channel.as_mut() else { return Vec::new() };
        match ch.accept_receipt(receipt, now) {
            Ok(resolved) => {
                for p in resolved {
                    if let Some(inv) = self.invoices.remove(&p.hashlock()) {
                        self.log(&inv.proposal.proposal_id, Direction::Received, p.body.amount, Outcome::Received, None, now);
                    }
                }
            }
            Err(reason) => log::debug!("{}: receipt refused: {reason:?}", self.client_id),
        }
        Vec::new()
    }

    /// The hub refused our promise or could not route it.
    fn on_refused(&mut self, h: &Digest, code: &str, now: Tick) {
        let Some(pay) = self.payments.get(h) else { return };
        if pay.promise.is_none() {
            return;
        }
        if let Some(ch) = self.channel.as_mut() {
            ch.cancel_promise(h);
        }
        if code == "ChannelBusy" {
            let entry = self.payments.get_mut(h).expect("present");
            entry.promise = None;
            entry.retry_at = Some(now + self.config.retry_after);
        } else {
            self.fail_payment(h, code, now);
        }
    }

    /// Starts closing the channel: cooperative first, dispute after `close_timeout`.
    pub fn close_channel(&mut self, now: Tick) {
        if self.close.is_none() && self.status == Some(ContractStatus::Open) {
            self.close = Some(CloseAttempt { started: now, last_sent: None, accepted: false, disputed: false });
        }
    }

    /// Final balances as this wallet computes them from its receipts and the
    /// contract's claims.
    pub fn close_record(&self, ledger: &mut dyn LedgerAccess) -> Result<CloseRecord, WalletError> {
        let ch = self.channel()?;
        let view = ledger.read_state(&self.ledger_id, ch.channel_id())?;
        let b = compute_settlement(
            ch.mode(),
            view.contract.deposits,
            ch.last_receipt_sent.as_ref(),
            ch.last_receipt_received.as_ref(),
            view.contract.claimed.values(),
        );
        Ok(CloseRecord { channel_id: ch.channel_id().clone(), client_balance: b.client, hub_balance: b.hub })
    }

    /// The background handler, run once per tick.
    pub fn client_tick(&mut self, now: Tick, ledger: &mut dyn LedgerAccess) -> ClientTick {
        let mut out = ClientTick::default();
        if self.channel.is_none() {
            self.expire_intents(now);
            return out;
        }
        let due = self.last_poll.is_none_or(|t| now >= t + self.config.poll_interval.max(1));
        if due {
            self.last_poll = Some(now);
            self.observe(now, ledger, &mut out);
        }
        if self.status == Some(ContractStatus::Closed) {
            return out;
        }
        self.expire(now);
        self.claim_due(now, ledger, &mut out);
        self.resend_secrets(now, &mut out);
        self.retry_payments(now, &mut out);
        self.expire_intents(now);
        match self.status {
            Some(ContractStatus::Open) => self.advance_cooperative_close(now, ledger, &mut out),
            Some(ContractStatus::Closing) => self.advance_dispute(now, ledger, &mut out),
            _ => {}
        }
        out
    }

    fn observe(&mut self, now: Tick, ledger: &mut dyn LedgerAccess, out: &mut ClientTick) {
        let events = match ledger.events_since(&self.ledger_id, self.cursor) {
            Ok(e) => e,
            Err(e) => {
                out.actions.push(failed("events_since", &e));
                return;
            }
        };
        let Some(last) = events.last() else { return };
        self.cursor = last.seq;
        let Some(channel_id) = self.channel.as_ref().map(|c| c.channel_id().clone()) else { return };
        for event in events.iter().filter(|e| *e.payload.channel_id() == channel_id) {
            self.observe_event(event, now);
        }
    }

    fn observe_event(&mut self, event: &LedgerEvent, now: Tick) {
        let Some(ch) = self.channel.as_mut() else { return };
        match &event.payload {
            EventPayload::Deposited { party: Party::Hub, amount, .. } => ch.peer_deposit += amount,
            EventPayload::Claimed { claimant: Party::Hub, promise, preimage, .. } => {
                let h = promise.hashlock();
                ch.learn_secret(*preimage);
                if ch.claimed_out.contains_key(&h) {
                    return;
                }
                if ch.note_claimed_out(&h).is_some() {
                    let serialized = ch.mode() == ChannelMode::Serialized;
                    if let Some(p) = self.payments.remove(&h) {
                        self.log(&p.proposal.proposal_id, Direction::Sent, p.proposal.amount, Outcome::Paid, Some("claimed on-chain".into()), now);
                    }
                    if serialized {
                        self.close_channel(now);
                    }
                } else {
                    // Our receipt already covers it: get that receipt on record.
                    self.close_channel(now);
                }
            }
            EventPayload::DisputeOpened { receipt, .. } => {
                self.status = Some(ContractStatus::Closing);
                self.window_end = Some(event.at + ch.params.dispute_window);
                ch.closing = true;
                if let Some(r) = receipt {
                    self.adopt_receipt(r, now);
                }
            }
            EventPayload::ReceiptSubmitted { receipt, .. } => self.adopt_receipt(receipt, now),
            EventPayload::Closed { settlement, .. } => {
                self.status = Some(ContractStatus::Closed);
                self.settlement = Some(*settlement);
                ch.closing = true;
                let id = ch.channel_id().to_string();
                for h in self.payments.keys().copied().collect::<Vec<_>>() {
                    self.fail_payment(&h, "ChannelClosed", now);
                }
                for h in self.invoices.keys().copied().collect::<Vec<_>>() {
                    self.fail_invoice(&h, "ChannelClosed", now);
                }
                for i in std::mem::take(&mut self.intents) {
                    self.log(&i.intent_id, Direction::Sent, i.amount, Outcome::Failed, Some("ChannelClosed".into()), now);
                }
                self.log(&format!("settlement:{id}"), Direction::Settlement, settlement.client, Outcome::Settled, None, now);
            }
            _ => {}
        }
    }

    /// A hub-issued receipt seen on-chain resolves our incoming promises just
    /// as if it had been delivered.
    fn adopt_receipt(&mut self, r: &Receipt, now: Tick) {
        let Some(ch) = self.channel.as_ref() else { return };
        let newer = ch.last_receipt_received.as_ref().is_none_or(|mine| r.body.index > mine.body.index);
        if r.body.from == Party::Hub && newer {
            self.on_receipt(r.clone(), now);
        }
    }

    fn expire(&mut self, now: Tick) {
        let Some(ch) = self.channel.as_mut() else { return };
        let expired = ch.expire_pending(now);
        for p in expired {
            let h = p.hashlock();
            if p.body.from == Party::Client {
                self.fail_payment(&h, "Timeout", now);
            } else {
                self.fail_invoice(&h, "Expired", now);
            }
        }
        let stale: Vec<Digest> = self
            .invoices
            .iter()
            .filter(|(_, inv)| inv.promise.is_none() && inv.proposal.expiry <= now)
            .map(|(h, _)| *h)
            .collect();
        for h in stale {
            self.fail_invoice(&h, "NoPromise", now);
        }
    }

    fn expire_intents(&mut self, now: Tick) {
        let ttl = self.config.intent_ttl;
        let (dead, live): (Vec<PayIntent>, Vec<PayIntent>) = std::mem::take(&mut self.intents).into_iter().partition(|i| now >= i.created + ttl);
        self.intents = live;
        for i in dead {
            self.log(&i.intent_id, Direction::Sent, i.amount, Outcome::Failed, Some("NoInvoice".into()), now);
        }
    }

    /// Claims revealed but unreceipted promises near expiry, or all of them
    /// once the channel is closing.
    fn claim_due(&mut self, now: Tick, ledger: &mut dyn LedgerAccess, out: &mut ClientTick) {
        let Some(ch) = self.channel.as_ref() else { return };
        let closing = self.status == Some(ContractStatus::Closing);
        if closing && self.window_end.is_some_and(|end| now >= end) {
            return;
        }
        let threshold = self.config.claim_threshold;
        let due: Vec<Promise> = ch
            .revealed_unreceipted()
            .filter(|p| now < p.body.expiry && (closing || p.body.expiry <= now + threshold))
            .cloned()
            .collect();
        for p in due {
            let h = p.hashlock();
            let ch = self.channel.as_ref().expect("checked above");
            let Some(preimage) = ch.secrets.get(&h).copied() else { continue };
            let proof = match ch.mode() {
                ChannelMode::Concurrent => ch.inclusion_proof(&h).map(|(receipt, proof)| InclusionProof { receipt, proof }),
                ChannelMode::Serialized => None,
            };
            let op = LedgerOp::Claim { channel_id: ch.channel_id().clone(), claimant: Party::Client, promise: p.clone(), preimage, proof };
            match ledger.submit(&self.ledger_id, op) {
                Ok(_) => {
                    let ch = self.channel.as_mut().expect("checked above");
                    ch.mark_claimed_in(&h);
                    let serialized = ch.mode() == ChannelMode::Serialized;
                    out.actions.push(ClientAction::Claimed { hashlock: h, amount: p.body.amount });
                    if let Some(inv) = self.invoices.remove(&h) {
                        self.log(&inv.proposal.proposal_id, Direction::Received, p.body.amount, Outcome::ClaimOnChain, None, now);
                    }
                    if serialized {
                        self.close_channel(now);
                    }
                }
                Err(e) => out.actions.push(failed("claim", &e)),
            }
        }
    }

    fn resend_secrets(&mut self, now: Tick, out: &mut ClientTick) {
        let threshold = self.config.claim_threshold;
        let every = self.config.resend_after.max(1);
        let Some(ch) = self.channel.as_mut() else { return };
        for inv in self.invoices.values_mut() {
            let Some(p) = &inv.promise else { continue };
            if inv.revealed_at.is_none() || now < inv.last_sent + every || p.body.expiry <= now + threshold {
                continue;
            }
            if let Ok(secret) = ch.reveal_secret(&p.hashlock()) {
                inv.last_sent = now;
                out.messages.push(WireMessage::Secret { secret });
            }
        }
    }

    fn retry_payments(&mut self, now: Tick, out: &mut ClientTick) {
        let due: Vec<Digest> =
            self.payments.iter().filter(|(_, p)| p.retry_at.is_some_and(|t| now >= t)).map(|(h, _)| *h).collect();
        for h in due {
            if let Ok(Some(msg)) = self.attempt_payment(&h, now) {
                out.messages.push(msg);
            }
        }
    }

    fn advance_cooperative_close(&mut self, now: Tick, ledger: &mut dyn LedgerAccess, out: &mut ClientTick) {
        let Some(close) = self.close.clone() else { return };
        if close.accepted && now < close.started + self.config.close_timeout {
            return;
        }
        if now >= close.started + self.config.close_timeout {
            let ch = self.channel.as_ref().expect("open wallets have a channel");
            let op = LedgerOp::InitiateDispute {
                channel_id: ch.channel_id().clone(),
                party: Party::Client,
                receipt: ch.last_receipt_received.clone(),
            };
            match ledger.submit(&self.ledger_id, op) {
                Ok(event) => {
                    out.actions.push(ClientAction::DisputeOpened);
                    self.close.as_mut().expect("present").disputed = true;
                    self.observe_event(&event, now);
                    self.advance_dispute(now, ledger, out);
                }
                Err(e) => out.actions.push(failed("initiate_dispute", &e)),
            }
            return;
        }
        let ch = self.channel.as_ref().expect("open wallets have a channel");
        let live = |p: &Promise| p.body.expiry > now;
        if ch.pending_out.values().any(live) || ch.pending_in.values().any(live) {
            return;
        }
        if close.last_sent.is_some_and(|t| now < t + self.config.resend_after.max(1)) {
            return;
        }
        match self.close_record(ledger) {
            Ok(record) => {
                let Ok(client_sig) = self.keypair.private.sign_raw(&record.canonical_bytes()) else { return };
                self.close.as_mut().expect("present").last_sent = Some(now);
                out.messages.push(WireMessage::CloseRequest { record, client_sig });
            }
            Err(e) => out.actions.push(ClientAction::Failed { step: "close_record".into(), error: e.code().into() }),
        }
    }

    /// In a dispute: put our best receipts on record, re-prove our claims,
    /// and finalize once the window has elapsed.
    fn advance_dispute(&mut self, now: Tick, ledger: &mut dyn LedgerAccess, out: &mut ClientTick) {
        let Some(ch) = self.channel.as_ref() else { return };
        let channel_id = ch.channel_id().clone();
        let view = match ledger.read_state(&self.ledger_id, &channel_id) {
            Ok(v) => v,
            Err(e) => {
                out.actions.push(failed("read_state", &e));
                return;
            }
        };
        let contract = view.contract;
        let Some(end) = contract.window_end() else { return };
        if now >= end {
            match ledger.submit(&self.ledger_id, LedgerOp::Finalize { channel_id }) {
                Ok(event) => {
                    out.actions.push(ClientAction::Finalized);
                    self.observe_event(&event, now);
                }
                Err(LedgerError::BadStatus(ContractStatus::Closed)) => {}
                Err(e) => out.actions.push(failed("finalize", &e)),
            }
            return;
        }
        for (issuer, best) in [(Party::Hub, &ch.last_receipt_received), (Party::Client, &ch.last_receipt_sent)] {
            let Some(best) = best else { continue };
            let higher = contract.recorded_receipt(issuer).is_none_or(|r| {
                best.body.index > r.body.index && best.body.cumulative_credit > r.body.cumulative_credit
            });
            if !higher {
                continue;
            }
            let op = LedgerOp::RespondDispute { channel_id: channel_id.clone(), party: Party::Client, receipt: best.clone() };
            match ledger.submit(&self.ledger_id, op) {
                Ok(_) => out.actions.push(ClientAction::ReceiptSubmitted { issuer }),
                Err(e) => out.actions.push(failed("respond_dispute", &e)),
            }
        }
        if ch.mode() != ChannelMode::Concurrent {
            return;
        }
        let Ok(view) = ledger.read_state(&self.ledger_id, &channel_id) else { return };
        let Some(recorded) = view.contract.recorded_receipt(Party::Hub) else { return };
        let digest = recorded.digest();
        for (h, claim) in &view.contract.claimed {
            if claim.claimant != Party::Client || claim.proven_against == Some(digest) || claim.promise.body.index >= recorded.body.index {
                continue;
            }
            let Some(proof) = prove_against(ch, recorded, h) else { continue };
            let op = LedgerOp::SubmitProof { channel_id: channel_id.clone(), hashlock: *h, proof };
            match ledger.submit(&self.ledger_id, op) {
                Ok(_) => out.actions.push(ClientAction::ProofSubmitted { hashlock: *h }),
                Err(e) => out.actions.push(failed("submit_inclusion_proof", &e)),
            }
        }
    }

    /// Credit this client can count on: its deposit plus receipted credit
    /// from the hub, minus everything whose secret has been revealed.
    pub fn guaranteed_balance(&self) -> Option<Amount> {
        let ch = self.channel.as_ref()?;
        let claimed_out: Amount = ch.claimed_out.values().map(|p| p.body.amount).sum();
        let received = ch.last_receipt_received.as_ref().map_or(0, |r| r.body.cumulative_credit);
        Some((ch.my_deposit + received).saturating_sub(ch.credit_sent + claimed_out))
    }
}

fn failed(step: &str, e: &LedgerError) -> ClientAction {
    ClientAction::Failed { step: step.into(), error: e.code().into() }
}
