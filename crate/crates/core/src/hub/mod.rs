//! The hub: client registry, promise routing between client channels, and
//! the background handler that goes on-chain when a peer stops cooperating.
//!
//! Off-chain message handling never touches a ledger, so it can be replayed
//! from a journal. Registration, cooperative close and `hub_tick` do touch
//! ledgers and are followed by a full snapshot.

mod persist;

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use persist::{HubService, HubStore, JournalEntry};

use crate::crypto::{Canonical, Digest, Keypair, PrivateKey, PublicKey, SignatureSchemeId};
use crate::ledger::{
    compute_settlement, Balances, ContractStatus, EventPayload, InclusionProof, LedgerAccess, LedgerError, LedgerEvent,
    LedgerOp,
};
use crate::protocol::{
    proof_against, reconstruct_leaves, AccountId, Amount, ChannelError, ChannelId, ChannelMode, ChannelParams, ChannelState,
    ClientId, CloseRecord, LedgerId, Party, PaymentProposal, Promise, PromiseReject, Receipt, ReceiptReject, SecretMessage,
    Tick,
};
use crate::wire::{AdminCommand, WireMessage};

fn default_delta() -> Tick {
    50
}
fn default_window() -> Tick {
    100
}
fn default_float() -> Amount {
    1_000_000
}
fn default_modes() -> Vec<ChannelMode> {
    vec![ChannelMode::Serialized, ChannelMode::Concurrent]
}
fn default_compact() -> usize {
    4096
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubConfig {
    pub hub_id: AccountId,
    #[serde(default)]
    pub fee_bps: u64,
    #[serde(default = "default_delta")]
    pub claim_margin_delta: Tick,
    #[serde(default = "default_window")]
    pub dispute_window: Tick,
    /// Deposited by the hub into every new channel.
    #[serde(default = "default_float")]
    pub hub_float: Amount,
    /// Channel modes the hub accepts at registration.
    #[serde(default = "default_modes")]
    pub modes: Vec<ChannelMode>,
    /// Journal length that triggers a fresh snapshot.
    #[serde(default = "default_compact")]
    pub compact_after: usize,
}

impl HubConfig {
    pub fn new(hub_id: impl Into<String>) -> Self {
        HubConfig {
            hub_id: AccountId(hub_id.into()),
            fee_bps: 0,
            claim_margin_delta: default_delta(),
            dispute_window: default_window(),
            hub_float: default_float(),
            modes: default_modes(),
            compact_after: default_compact(),
        }
    }

    pub fn fees(&self) -> FeePolicy {
        FeePolicy { fee_bps: self.fee_bps }
    }
}

/// Basis-point fee taken from each routed payment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeePolicy {
    pub fee_bps: u64,
}

impl FeePolicy {
    pub fn fee(&self, incoming: Amount) -> Amount {
        (incoming as u128 * self.fee_bps.min(10_000) as u128 / 10_000) as Amount
    }

    pub fn outgoing(&self, incoming: Amount) -> Amount {
        incoming - self.fee(incoming)
    }

    /// Smallest incoming amount whose outgoing amount covers `net`.
    pub fn gross_up(&self, net: Amount) -> Option<Amount> {
        if self.fee_bps >= 10_000 {
            return None;
        }
        let keep = 10_000 - self.fee_bps as u128;
        let mut gross = ((net as u128 * 10_000).div_ceil(keep)) as Amount;
        while gross > net && self.outgoing(gross - 1) >= net {
            gross -= 1;
        }
        while self.outgoing(gross) < net {
            gross += 1;
        }
        Some(gross)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum HubError {
    #[error("client is already registered")]
    AlreadyRegistered,
    #[error("key scheme {key} does not match ledger scheme {ledger}")]
    SchemeError { key: SignatureSchemeId, ledger: SignatureSchemeId },
    #[error("unknown ledger {0}")]
    NoSuchLedger(LedgerId),
    #[error("channel mode {0:?} is not offered")]
    ModeRefused(ChannelMode),
    #[error("client has no open channel")]
    NotRegistered,
    #[error("no route to the payee")]
    NoRoute,
    #[error("hub capacity on the payee channel is short: needed {needed}, available {available}")]
    HubLiquidityExhausted { needed: Amount, available: Amount },
    #[error("incoming expiry leaves too little margin")]
    ExpiryTooSoon,
    #[error("promise rejected: {0:?}")]
    Promise(PromiseReject),
    #[error("receipt rejected: {0:?}")]
    Receipt(ReceiptReject),
    #[error("no routed promise for this hashlock")]
    UnknownPromise,
    #[error("outgoing promise has expired")]
    Expired,
    #[error("preimage does not match the hashlock")]
    BadPreimage,
    #[error("a promise is already in flight on a serialized channel")]
    ChannelBusy,
    #[error("channel is closing")]
    ChannelClosing,
    #[error("close record does not match the hub's books: expected {expected:?}")]
    CloseMismatch { expected: Balances },
    #[error("bad signature")]
    BadSignature,
    #[error("unsupported message {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("recovery failed: {0}")]
    RecoveryError(String),
}

impl HubError {
    pub fn code(&self) -> &'static str {
        match self {
            HubError::AlreadyRegistered => "AlreadyRegistered",
            HubError::SchemeError { .. } => "SchemeError",
            HubError::NoSuchLedger(_) => "NoSuchLedger",
            HubError::ModeRefused(_) => "ModeRefused",
            HubError::NotRegistered => "NotRegistered",
            HubError::NoRoute => "NoRoute",
            HubError::HubLiquidityExhausted { .. } => "HubLiquidityExhausted",
            HubError::ExpiryTooSoon | HubError::Promise(PromiseReject::ExpiryTooSoon) => "ExpiryTooSoon",
            HubError::Promise(PromiseReject::ChannelBusy) | HubError::ChannelBusy => "ChannelBusy",
            HubError::Promise(PromiseReject::DuplicateHashlock) => "DuplicateHashlock",
            HubError::Promise(PromiseReject::InsufficientCapacity) => "InsufficientCapacity",
            HubError::Promise(PromiseReject::StaleIndex) => "StaleIndex",
            HubError::Promise(PromiseReject::BadSignature) => "BadSignature",
            HubError::Promise(_) => "InvalidPromise",
            HubError::Receipt(_) => "InvalidReceipt",
            HubError::UnknownPromise => "UnknownPromise",
            HubError::Expired => "Expired",
            HubError::BadPreimage => "BadPreimage",
            HubError::ChannelClosing => "ChannelClosing",
            HubError::CloseMismatch { .. } => "CloseMismatch",
            HubError::BadSignature => "BadSignature",
            HubError::Unsupported(_) => "Unsupported",
            HubError::Channel(e) => e.code(),
            HubError::Ledger(e) => e.code(),
            HubError::RecoveryError(_) => "RecoveryError",
        }
    }

    fn to_wire(&self, hashlock: Option<Digest>) -> WireMessage {
        WireMessage::error(self.code(), self.to_string(), hashlock)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub client_id: ClientId,
    pub client_pk: PublicKey,
    pub ledger_id: LedgerId,
    pub mode: ChannelMode,
    /// The active channel, absent until deployed and after it closes.
    pub channel_id: Option<ChannelId>,
    pub closed_channels: Vec<ChannelId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RouteState {
    AwaitSecret,
    SecretHeld,
    /// The incoming leg was claimed on-chain.
    SettledOut,
    /// The sender's receipt covers the incoming leg.
    SettledIn,
    Expired,
}

/// One payment relayed from `payer`'s channel to `payee`'s channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteContext {
    pub payment_id: String,
    pub hashlock: Digest,
    pub payer: ClientId,
    pub payee: ClientId,
    pub incoming: Promise,
    pub outgoing: Promise,
    pub fee: Amount,
    pub state: RouteState,
}

/// The hub's end of one client channel plus what it knows of the contract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubChannel {
    pub client_id: ClientId,
    pub state: ChannelState,
    pub status: ContractStatus,
    pub window_end: Option<Tick>,
    /// Set when the client misbehaved or an operator asked for a close.
    pub wants_dispute: bool,
    pub settlement: Option<Balances>,
}

impl HubChannel {
    fn ledger_id(&self) -> &LedgerId {
        &self.state.params.ledger_id
    }

    fn open_for_payments(&self) -> bool {
        self.status == ContractStatus::Open && !self.state.closing && !self.wants_dispute
    }
}

/// An on-chain step taken by the background handler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum HubAction {
    Claimed { channel_id: ChannelId, hashlock: Digest, amount: Amount },
    DisputeOpened { channel_id: ChannelId },
    ReceiptSubmitted { channel_id: ChannelId, issuer: Party },
    ProofSubmitted { channel_id: ChannelId, hashlock: Digest },
    Finalized { channel_id: ChannelId },
    Failed { channel_id: ChannelId, step: String, error: String },
}

pub type Outgoing = (ClientId, WireMessage);

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TickOutcome {
    pub actions: Vec<HubAction>,
    pub messages: Vec<Outgoing>,
    /// Ledger state was read or written in a way that must be snapshotted.
    pub onchain_changed: bool,
    /// The off-chain expiry sweep removed something.
    pub expired: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hub {
    pub config: HubConfig,
    pub keys: BTreeMap<SignatureSchemeId, Keypair>,
    pub registrations: BTreeMap<ClientId, Registration>,
    pub channels: BTreeMap<ChannelId, HubChannel>,
    pub routes: BTreeMap<Digest, RouteContext>,
    /// Last ledger event sequence number processed, per ledger.
    pub cursors: BTreeMap<LedgerId, u64>,
    pub fees_earned: Amount,
    pub channel_counter: u64,
}

impl Hub {
    pub fn new<R: RngCore + ?Sized>(config: HubConfig, rng: &mut R) -> Self {
        let keys = [SignatureSchemeId::SCHEME_A, SignatureSchemeId::SCHEME_B]
            .into_iter()
            .map(|s| (s, Keypair::generate(s, rng)))
            .collect();
        Hub {
            config,
            keys,
            registrations: BTreeMap::new(),
            channels: BTreeMap::new(),
            routes: BTreeMap::new(),
            cursors: BTreeMap::new(),
            fees_earned: 0,
            channel_counter: 0,
        }
    }

    pub fn public_key(&self, scheme: SignatureSchemeId) -> &PublicKey {
        &self.keys[&scheme].public
    }

    pub fn private_key(&self, scheme: SignatureSchemeId) -> &PrivateKey {
        &self.keys[&scheme].private
    }

    pub fn active_channel_id(&self, client: &ClientId) -> Option<&ChannelId> {
        self.registrations.get(client)?.channel_id.as_ref()
    }

    pub fn channel_of(&self, client: &ClientId) -> Option<&HubChannel> {
        self.channels.get(self.active_channel_id(client)?)
    }

    fn channel_of_mut(&mut self, client: &ClientId) -> Result<&mut HubChannel, HubError> {
        let id = self.active_channel_id(client).ok_or(HubError::NotRegistered)?.clone();
        self.channels.get_mut(&id).ok_or(HubError::NotRegistered)
    }

    /// Deploys a channel contract for the client and funds the hub's side.
    pub fn register_client(
        &mut self,
        client_id: ClientId,
        client_pk: PublicKey,
        ledger_id: LedgerId,
        mode: ChannelMode,
        ledger: &mut dyn LedgerAccess,
    ) -> Result<ChannelParams, HubError> {
        if self.active_channel_id(&client_id).is_some() {
            return Err(HubError::AlreadyRegistered);
        }
        if !self.config.modes.contains(&mode) {
            return Err(HubError::ModeRefused(mode));
        }
        let ledger_cfg = ledger.config(&ledger_id).map_err(|_| HubError::NoSuchLedger(ledger_id.clone()))?;
        if client_pk.scheme != ledger_cfg.scheme {
            return Err(HubError::SchemeError { key: client_pk.scheme, ledger: ledger_cfg.scheme });
        }
        let float = self.config.hub_float;
        let available = ledger.balance(&ledger_id, &self.config.hub_id)?;
        if available < float {
            return Err(HubError::HubLiquidityExhausted { needed: float, available });
        }
        self.channel_counter += 1;
        let params = ChannelParams {
            channel_id: ChannelId(format!("{}/{}/{}", ledger_id, client_id, self.channel_counter)),
            ledger_id: ledger_id.clone(),
            client_id: client_id.clone(),
            hub_id: self.config.hub_id.clone(),
            client_pk: client_pk.clone(),
            hub_pk: self.public_key(ledger_cfg.scheme).clone(),
            scheme: ledger_cfg.scheme,
            mode,
            claim_margin_delta: self.config.claim_margin_delta,
            dispute_window: self.config.dispute_window,
        };
        ledger.submit(&ledger_id, LedgerOp::Deploy { params: params.clone(), deployer: self.config.hub_id.clone() })?;
        if float > 0 {
            let op = LedgerOp::Deposit { channel_id: params.channel_id.clone(), party: Party::Hub, amount: float };
            ledger.submit(&ledger_id, op)?;
        }
        let mut state = ChannelState::new(params.clone(), Party::Hub);
        state.my_deposit = float;
        self.channels.insert(
            params.channel_id.clone(),
            HubChannel {
                client_id: client_id.clone(),
                state,
                status: ContractStatus::Open,
                window_end: None,
                wants_dispute: false,
                settlement: None,
            },
        );
        self.cursors.entry(ledger_id.clone()).or_insert(0);
        let reg = self.registrations.entry(client_id.clone()).or_insert_with(|| Registration {
            client_id: client_id.clone(),
            client_pk: client_pk.clone(),
            ledger_id: ledger_id.clone(),
            mode,
            channel_id: None,
            closed_channels: Vec::new(),
        });
        reg.client_pk = client_pk;
        reg.ledger_id = ledger_id;
        reg.mode = mode;
        reg.channel_id = Some(params.channel_id.clone());
        Ok(params)
    }

    /// Steps 1 to 2: accepts the payer's promise and issues the matching one
    /// to the payee, `claim_margin_delta` ticks earlier and minus the fee.
    pub fn route_promise(&mut self, payer: &ClientId, incoming: Promise, payee: &ClientId, now: Tick) -> Result<Promise, HubError> {
        let delta = self.config.claim_margin_delta;
        let fees = self.config.fees();
        let payer_ch = self.channel_of(payer).ok_or(HubError::NotRegistered)?;
        if !payer_ch.open_for_payments() {
            return Err(HubError::ChannelClosing);
        }
        payer_ch.state.verify_promise(&incoming, now).map_err(HubError::Promise)?;
        let hashlock = incoming.hashlock();
        if self.routes.contains_key(&hashlock) {
            return Err(HubError::Promise(PromiseReject::DuplicateHashlock));
        }
        let payee_ch = match self.channel_of(payee) {
            Some(ch) if payee != payer && ch.open_for_payments() && ch.state.peer_deposit + ch.state.my_deposit > 0 => ch,
            _ => return Err(HubError::NoRoute),
        };
        let fee = fees.fee(incoming.body.amount);
        let out_amount = incoming.body.amount - fee;
        if out_amount == 0 {
            return Err(HubError::Promise(PromiseReject::InvalidAmount));
        }
        let available = payee_ch.state.available_balance();
        if out_amount > available {
            return Err(HubError::HubLiquidityExhausted { needed: out_amount, available });
        }
        if incoming.body.expiry <= now + 2 * delta {
            return Err(HubError::ExpiryTooSoon);
        }
        if payee_ch.mode() == ChannelMode::Serialized && !payee_ch.state.pending_out.is_empty() {
            return Err(HubError::ChannelBusy);
        }

        let payment_id = hashlock.to_hex()[..16].to_string();
        let proposal = PaymentProposal {
            proposal_id: payment_id.clone(),
            amount: out_amount,
            hashlock,
            expiry: incoming.body.expiry - delta,
            payee_route: payee.clone(),
        };
        let scheme = payee_ch.state.params.scheme;
        let key = self.private_key(scheme).clone();
        let payee_id = self.active_channel_id(payee).cloned().ok_or(HubError::NoRoute)?;
        let outgoing = self.channels.get_mut(&payee_id).expect("checked above").state.make_promise(&proposal, &key, now)?;
        let accepted = self.channel_of_mut(payer)?.state.accept_promise(incoming.clone(), now);
        if let Err(reason) = accepted {
            self.channels.get_mut(&payee_id).expect("checked above").state.cancel_promise(&hashlock);
            return Err(HubError::Promise(reason));
        }
        self.routes.insert(
            hashlock,
            RouteContext {
                payment_id,
                hashlock,
                payer: payer.clone(),
                payee: payee.clone(),
                incoming,
                outgoing: outgoing.clone(),
                fee,
                state: RouteState::AwaitSecret,
            },
        );
        Ok(outgoing)
    }

    /// Steps 3 to 5: acknowledges the payee's secret with a receipt and
    /// forwards the secret to the payer.
    pub fn handle_secret(&mut self, from: &ClientId, s: &SecretMessage, now: Tick) -> Result<Vec<Outgoing>, HubError> {
        let route = match self.routes.get(&s.hashlock) {
            Some(r) if r.payee == *from => r.clone(),
            _ => return self.resend_receipt(from, &s.hashlock),
        };
        if route.state != RouteState::AwaitSecret {
            return self.resend_receipt(from, &s.hashlock);
        }
        let payee_id = route.outgoing.body.channel_id.clone();
        let payer_id = route.incoming.body.channel_id.clone();
        let payee_ch = self.channels.get_mut(&payee_id).ok_or(HubError::UnknownPromise)?;
        let key = self.keys[&payee_ch.state.params.scheme].private.clone();
        let receipt = payee_ch.state.accept_secret(s, &key, now).map_err(|e| match e {
            ChannelError::UnknownPromise => HubError::UnknownPromise,
            ChannelError::BadPreimage => HubError::BadPreimage,
            ChannelError::Expired => HubError::Expired,
            other => HubError::Channel(other),
        })?;
        let mut out = vec![(from.clone(), WireMessage::Receipt { receipt })];
        if let Some(payer_ch) = self.channels.get_mut(&payer_id) {
            payer_ch.state.learn_secret(s.preimage);
            if let Ok(secret) = payer_ch.state.reveal_secret(&s.hashlock) {
                out.push((route.payer.clone(), WireMessage::Secret { secret }));
            }
        }
        self.routes.get_mut(&s.hashlock).expect("route exists").state = RouteState::SecretHeld;
        Ok(out)
    }

    /// A payee repeating a secret the hub already acknowledged gets the latest receipt again.
    fn resend_receipt(&self, from: &ClientId, hashlock: &Digest) -> Result<Vec<Outgoing>, HubError> {
        let ch = self.channel_of(from).ok_or(HubError::UnknownPromise)?;
        let settled = ch.state.secrets.contains_key(hashlock) && !ch.state.pending_out.contains_key(hashlock);
        match &ch.state.last_receipt_sent {
            Some(r) if settled => Ok(vec![(from.clone(), WireMessage::Receipt { receipt: r.clone() })]),
            _ => Err(HubError::UnknownPromise),
        }
    }

    /// Step 6: the payer's receipt settles the incoming leg.
    pub fn handle_receipt(&mut self, from: &ClientId, r: Receipt, now: Tick) -> Result<Vec<Digest>, HubError> {
        let ch = self.channel_of_mut(from)?;
        let resolved = ch.state.accept_receipt(r, now).map_err(HubError::Receipt)?;
        let mut settled = Vec::new();
        for p in resolved {
            let h = p.hashlock();
            if let Some(route) = self.routes.get_mut(&h) {
                if route.state == RouteState::SecretHeld {
                    route.state = RouteState::SettledIn;
                    self.fees_earned += route.fee;
                }
            }
            settled.push(h);
        }
        Ok(settled)
    }

    /// The payee refused our promise: unwind the route and tell the payer.
    fn fail_route(&mut self, from: &ClientId, hashlock: &Digest, code: &str, detail: &str) -> Vec<Outgoing> {
        let Some(route) = self.routes.get(hashlock) else { return Vec::new() };
        if route.payee != *from || route.state != RouteState::AwaitSecret {
            return Vec::new();
        }
        let route = self.routes.remove(hashlock).expect("present");
        if let Some(ch) = self.channels.get_mut(&route.outgoing.body.channel_id) {
            ch.state.cancel_promise(hashlock);
        }
        if let Some(ch) = self.channels.get_mut(&route.incoming.body.channel_id) {
            ch.state.drop_incoming(hashlock);
        }
        vec![(route.payer, WireMessage::error(code, format!("payee refused: {detail}"), Some(*hashlock)))]
    }

    /// Messages that change only off-chain state. Replayable from the journal.
    pub fn handle_offchain(&mut self, from: &ClientId, msg: WireMessage, now: Tick) -> Vec<Outgoing> {
        let reply = |e: HubError, h: Option<Digest>| vec![(from.clone(), e.to_wire(h))];
        match msg {
            WireMessage::ProposalRelay { proposal, payer } => {
                if proposal.payee_route != *from {
                    return reply(HubError::NoRoute, Some(proposal.hashlock));
                }
                match self.channel_of(&payer) {
                    Some(ch) if ch.open_for_payments() => vec![(payer, WireMessage::ProposalRelay { proposal, payer: ch.client_id.clone() })],
                    _ => reply(HubError::NoRoute, Some(proposal.hashlock)),
                }
            }
            WireMessage::Promise { promise, payee } => {
                let h = promise.hashlock();
                let Some(payee) = payee else { return reply(HubError::NoRoute, Some(h)) };
                match self.route_promise(from, promise, &payee, now) {
                    Ok(outgoing) => vec![(payee, WireMessage::Promise { promise: outgoing, payee: None })],
                    Err(e) => reply(e, Some(h)),
                }
            }
            WireMessage::Secret { secret } => match self.handle_secret(from, &secret, now) {
                Ok(out) => out,
                Err(e) => reply(e, Some(secret.hashlock)),
            },
            WireMessage::Receipt { receipt } => match self.handle_receipt(from, receipt, now) {
                Ok(_) => Vec::new(),
                Err(e) => reply(e, None),
            },
            WireMessage::Error { code, detail, hashlock: Some(h) } => self.fail_route(from, &h, &code, &detail),
            WireMessage::Error { .. } => Vec::new(),
            other => reply(HubError::Unsupported(other.kind()), None),
        }
    }

    /// Signs and submits a cooperative close if the client's record matches
    /// the hub's own settlement computation.
    pub fn handle_close_request(
        &mut self,
        from: &ClientId,
        record: CloseRecord,
        client_sig: crate::crypto::Signature,
        now: Tick,
        ledger: &mut dyn LedgerAccess,
    ) -> Result<WireMessage, HubError> {
        let ch = self.channel_of(from).ok_or(HubError::NotRegistered)?;
        if ch.status != ContractStatus::Open || record.channel_id != *ch.state.channel_id() {
            return Err(HubError::ChannelClosing);
        }
        let live = |p: &Promise| p.body.expiry > now;
        if ch.state.pending_out.values().any(live) || ch.state.pending_in.values().any(live) {
            return Err(HubError::ChannelBusy);
        }
        let params = &ch.state.params;
        let view = ledger.read_state(&params.ledger_id, &params.channel_id)?;
        let expected = compute_settlement(
            params.mode,
            view.contract.deposits,
            ch.state.last_receipt_received.as_ref(),
            ch.state.last_receipt_sent.as_ref(),
            view.contract.claimed.values(),
        );
        if record.client_balance != expected.client || record.hub_balance != expected.hub {
            return Err(HubError::CloseMismatch { expected });
        }
        let bytes = record.canonical_bytes();
        if !crate::crypto::verify(&params.client_pk, &bytes, &client_sig) {
            return Err(HubError::BadSignature);
        }
        let hub_sig = self.private_key(params.scheme).sign_raw(&bytes).map_err(ChannelError::from)?;
        let ledger_id = params.ledger_id.clone();
        let op = LedgerOp::CooperativeClose { record: record.clone(), client_sig, hub_sig: hub_sig.clone() };
        let event = ledger.submit(&ledger_id, op)?;
        self.observe(&event, &mut TickOutcome::default());
        Ok(WireMessage::CloseAccept { record, hub_sig })
    }

    /// Handles any client message. Returns the replies and whether the hub
    /// touched a ledger, which calls for a snapshot rather than a journal entry.
    pub fn handle_message(&mut self, from: &ClientId, msg: WireMessage, now: Tick, ledger: &mut dyn LedgerAccess) -> (Vec<Outgoing>, bool) {
        match msg {
            WireMessage::Register { client_id, client_pk, ledger_id, mode } => {
                if client_id != *from {
                    return (vec![(from.clone(), HubError::NotRegistered.to_wire(None))], false);
                }
                let reply = match self.register_client(client_id, client_pk, ledger_id, mode, ledger) {
                    Ok(params) => WireMessage::Registered { params, fee_bps: self.config.fee_bps, hub_deposit: self.config.hub_float },
                    Err(e) => e.to_wire(None),
                };
                (vec![(from.clone(), reply)], true)
            }
            WireMessage::CloseRequest { record, client_sig } => {
                let reply = match self.handle_close_request(from, record, client_sig, now, ledger) {
                    Ok(m) => m,
                    Err(e) => e.to_wire(None),
                };
                (vec![(from.clone(), reply)], true)
            }
            WireMessage::Hello { .. } => (Vec::new(), false),
            other => (self.handle_offchain(from, other, now), false),
        }
    }

    pub fn is_offchain(msg: &WireMessage) -> bool {
        !matches!(msg, WireMessage::Register { .. } | WireMessage::CloseRequest { .. } | WireMessage::Hello { .. })
    }

    /// Deletes expired promises and dead routes. Replayable from the journal.
    pub fn expire(&mut self, now: Tick) -> bool {
        let mut changed = false;
        for ch in self.channels.values_mut().filter(|c| c.status != ContractStatus::Closed) {
            changed |= !ch.state.expire_pending(now).is_empty();
        }
        let before = self.routes.len();
        self.routes.retain(|_, r| match r.state {
            RouteState::AwaitSecret => r.outgoing.body.expiry > now,
            _ => r.incoming.body.expiry > now,
        });
        changed || self.routes.len() != before
    }

    /// The background handler: observe the ledgers, sweep expired promises,
    /// then claim, dispute and finalize as needed.
    pub fn hub_tick(&mut self, now: Tick, ledger: &mut dyn LedgerAccess) -> TickOutcome {
        let mut out = TickOutcome::default();
        self.observe_ledgers(ledger, &mut out);
        out.expired = self.expire(now);
        self.settle_onchain(now, ledger, &mut out);
        out
    }

    pub(crate) fn observe_ledgers(&mut self, ledger: &mut dyn LedgerAccess, out: &mut TickOutcome) {
        let ledgers: Vec<LedgerId> = self.cursors.keys().cloned().collect();
        for ledger_id in ledgers {
            let cursor = self.cursors[&ledger_id];
            let events = match ledger.events_since(&ledger_id, cursor) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("reading ledger {ledger_id}: {e}");
                    continue;
                }
            };
            for event in &events {
                self.observe(event, out);
            }
            if let Some(last) = events.last() {
                self.cursors.insert(ledger_id, last.seq);
                out.onchain_changed = true;
            }
        }
    }

    fn observe(&mut self, event: &LedgerEvent, out: &mut TickOutcome) {
        let Some(ch) = self.channels.get_mut(event.payload.channel_id()) else { return };
        match &event.payload {
            EventPayload::Deposited { party: Party::Client, amount, .. } => ch.state.peer_deposit += amount,
            EventPayload::Claimed { claimant: Party::Client, promise, preimage, .. } => {
                let h = promise.hashlock();
                ch.state.learn_secret(*preimage);
                if ch.state.claimed_out.contains_key(&h) {
                    return;
                }
                if ch.state.note_claimed_out(&h).is_none() {
                    // Claimed although a receipt already covers it.
                    ch.wants_dispute = true;
                    return;
                }
                let Some(route) = self.routes.get_mut(&h) else { return };
                if matches!(route.state, RouteState::AwaitSecret | RouteState::Expired) {
                    route.state = RouteState::SecretHeld;
                    let payer = route.payer.clone();
                    if let Some(payer_ch) = self.channels.get_mut(&route.incoming.body.channel_id) {
                        payer_ch.state.learn_secret(*preimage);
                        if let Ok(secret) = payer_ch.state.reveal_secret(&h) {
                            out.messages.push((payer, WireMessage::Secret { secret }));
                        }
                    }
                }
            }
            EventPayload::DisputeOpened { .. } => {
                ch.status = ContractStatus::Closing;
                ch.window_end = Some(event.at + ch.state.params.dispute_window);
                ch.state.closing = true;
            }
            EventPayload::Closed { settlement, .. } => {
                ch.status = ContractStatus::Closed;
                ch.settlement = Some(*settlement);
                ch.state.closing = true;
                let client = ch.client_id.clone();
                let channel_id = ch.state.channel_id().clone();
                if let Some(reg) = self.registrations.get_mut(&client) {
                    if reg.channel_id.as_ref() == Some(&channel_id) {
                        reg.channel_id = None;
                        reg.closed_channels.push(channel_id);
                    }
                }
            }
            _ => {}
        }
    }

    pub(crate) fn settle_onchain(&mut self, now: Tick, ledger: &mut dyn LedgerAccess, out: &mut TickOutcome) {
        let delta = self.config.claim_margin_delta;
        // Claim incoming legs whose receipt has not arrived in time.
        let due: Vec<Digest> = self
            .routes
            .values()
            .filter(|r| r.state == RouteState::SecretHeld)
            .filter(|r| r.incoming.body.expiry <= now + delta && now < r.incoming.body.expiry)
            .map(|r| r.hashlock)
            .collect();
        for h in due {
            let channel_id = self.routes[&h].incoming.body.channel_id.clone();
            if self.claim_incoming(&channel_id, &h, now, ledger, out) {
                let route = self.routes.get_mut(&h).expect("present");
                route.state = RouteState::SettledOut;
                self.fees_earned += route.fee;
                let ch = self.channels.get_mut(&channel_id).expect("present");
                if ch.mode() == ChannelMode::Serialized {
                    ch.wants_dispute = true;
                }
            }
        }

        let busy: Vec<ChannelId> = self
            .channels
            .iter()
            .filter(|(_, c)| c.status == ContractStatus::Closing || (c.status == ContractStatus::Open && c.wants_dispute))
            .map(|(id, _)| id.clone())
            .collect();
        for channel_id in busy {
            self.advance_close(&channel_id, now, ledger, out);
        }
    }

    fn claim_incoming(
        &mut self,
        channel_id: &ChannelId,
        hashlock: &Digest,
        now: Tick,
        ledger: &mut dyn LedgerAccess,
        out: &mut TickOutcome,
    ) -> bool {
        let Some(ch) = self.channels.get_mut(channel_id) else { return false };
        let (Some(promise), Some(preimage)) = (ch.state.pending_in.get(hashlock).cloned(), ch.state.secrets.get(hashlock).copied())
        else {
            return false;
        };
        if promise.body.expiry <= now {
            return false;
        }
        let proof = match ch.mode() {
            ChannelMode::Concurrent => ch.state.inclusion_proof(hashlock).map(|(receipt, proof)| InclusionProof { receipt, proof }),
            ChannelMode::Serialized => None,
        };
        let ledger_id = ch.ledger_id().clone();
        let amount = promise.body.amount;
        let op = LedgerOp::Claim { channel_id: channel_id.clone(), claimant: Party::Hub, promise, preimage, proof };
        out.onchain_changed = true;
        match ledger.submit(&ledger_id, op) {
            Ok(_) => {
                ch.state.mark_claimed_in(hashlock);
                out.actions.push(HubAction::Claimed { channel_id: channel_id.clone(), hashlock: *hashlock, amount });
                true
            }
            Err(e) => {
                out.actions.push(failed(channel_id, "claim", &e));
                false
            }
        }
    }

    /// Drives one channel through the dispute: open it if asked, claim what
    /// we can, put our best receipts on record, re-prove claims, finalize.
    fn advance_close(&mut self, channel_id: &ChannelId, now: Tick, ledger: &mut dyn LedgerAccess, out: &mut TickOutcome) {
        let ch = &self.channels[channel_id];
        let ledger_id = ch.ledger_id().clone();
        out.onchain_changed = true;
        if ch.status == ContractStatus::Open {
            let op = LedgerOp::InitiateDispute {
                channel_id: channel_id.clone(),
                party: Party::Hub,
                receipt: ch.state.last_receipt_received.clone(),
            };
            match ledger.submit(&ledger_id, op) {
                Ok(event) => {
                    out.actions.push(HubAction::DisputeOpened { channel_id: channel_id.clone() });
                    self.observe(&event, out);
                }
                Err(e) => {
                    out.actions.push(failed(channel_id, "initiate_dispute", &e));
                    if matches!(e, LedgerError::BadStatus(_)) {
                        self.channels.get_mut(channel_id).expect("present").wants_dispute = false;
                    }
                    return;
                }
            }
        }

        let view = match ledger.read_state(&ledger_id, channel_id) {
            Ok(v) => v,
            Err(e) => {
                out.actions.push(failed(channel_id, "read_state", &e));
                return;
            }
        };
        let contract = view.contract;
        if contract.status == ContractStatus::Closed {
            for event in view.events.iter().filter(|e| e.payload.kind() == "CLOSED") {
                self.observe(event, out);
            }
            return;
        }
        let window_end = contract.window_end().unwrap_or(now);
        if now < window_end {
            let claimable: Vec<Digest> = {
                let ch = &self.channels[channel_id];
                ch.state
                    .pending_in
                    .iter()
                    .filter(|(h, p)| p.body.expiry > now && ch.state.secrets.contains_key(*h) && !contract.claimed.contains_key(*h))
                    .map(|(h, _)| *h)
                    .collect()
            };
            for h in claimable {
                if self.claim_incoming(channel_id, &h, now, ledger, out) {
                    if let Some(route) = self.routes.get_mut(&h) {
                        if route.state == RouteState::SecretHeld {
                            route.state = RouteState::SettledOut;
                            self.fees_earned += route.fee;
                        }
                    }
                }
            }

            let ch = &self.channels[channel_id];
            for (issuer, best) in [(Party::Client, &ch.state.last_receipt_received), (Party::Hub, &ch.state.last_receipt_sent)] {
                let Some(best) = best else { continue };
                let higher = contract.recorded_receipt(issuer).is_none_or(|r| {
                    best.body.index > r.body.index && best.body.cumulative_credit > r.body.cumulative_credit
                });
                if !higher {
                    continue;
                }
                let op = LedgerOp::RespondDispute { channel_id: channel_id.clone(), party: Party::Hub, receipt: best.clone() };
                match ledger.submit(&ledger_id, op) {
                    Ok(_) => out.actions.push(HubAction::ReceiptSubmitted { channel_id: channel_id.clone(), issuer }),
                    Err(e) => out.actions.push(failed(channel_id, "respond_dispute", &e)),
                }
            }

            if ch.mode() == ChannelMode::Concurrent {
                let view = match ledger.read_state(&ledger_id, channel_id) {
                    Ok(v) => v,
                    Err(_) => return,
                };
                if let Some(recorded) = view.contract.recorded_receipt(Party::Client) {
                    let digest = recorded.digest();
                    let stale: Vec<Digest> = view
                        .contract
                        .claimed
                        .iter()
                        .filter(|(_, c)| c.claimant == Party::Hub && c.proven_against != Some(digest))
                        .filter(|(_, c)| c.promise.body.index < recorded.body.index)
                        .map(|(h, _)| *h)
                        .collect();
                    for h in stale {
                        let Some(proof) = prove_against(&ch.state, recorded, &h) else { continue };
                        let op = LedgerOp::SubmitProof { channel_id: channel_id.clone(), hashlock: h, proof };
                        match ledger.submit(&ledger_id, op) {
                            Ok(_) => out.actions.push(HubAction::ProofSubmitted { channel_id: channel_id.clone(), hashlock: h }),
                            Err(e) => out.actions.push(failed(channel_id, "submit_inclusion_proof", &e)),
                        }
                    }
                }
            }
        } else {
            match ledger.submit(&ledger_id, LedgerOp::Finalize { channel_id: channel_id.clone() }) {
                Ok(event) => {
                    out.actions.push(HubAction::Finalized { channel_id: channel_id.clone() });
                    self.observe(&event, out);
                }
                Err(e) => out.actions.push(failed(channel_id, "finalize", &e)),
            }
        }
    }

    /// Operator request to close a channel unilaterally.
    pub fn request_close(&mut self, channel_id: &ChannelId) -> Result<(), HubError> {
        let ch = self.channels.get_mut(channel_id).ok_or(HubError::NotRegistered)?;
        if ch.status != ContractStatus::Open {
            return Err(HubError::ChannelClosing);
        }
        ch.wants_dispute = true;
        Ok(())
    }

    pub fn admin(&mut self, command: &AdminCommand) -> (bool, serde_json::Value) {
        match command {
            AdminCommand::ChannelsList => (true, serde_json::to_value(self.channel_summaries()).expect("summaries serialize")),
            AdminCommand::Close { channel_id } => match self.request_close(channel_id) {
                Ok(()) => (true, serde_json::json!({ "channel_id": channel_id, "closing": true })),
                Err(e) => (false, serde_json::json!({ "error": e.code(), "detail": e.to_string() })),
            },
            AdminCommand::Status | AdminCommand::Snapshot => (
                true,
                serde_json::json!({
                    "hub_id": self.config.hub_id,
                    "clients": self.registrations.len(),
                    "channels": self.channels.len(),
                    "routes": self.routes.len(),
                    "fees_earned": self.fees_earned,
                }),
            ),
        }
    }

    pub fn channel_summaries(&self) -> Vec<ChannelSummary> {
        self.channels
            .values()
            .map(|c| ChannelSummary {
                channel_id: c.state.channel_id().clone(),
                client_id: c.client_id.clone(),
                ledger_id: c.ledger_id().clone(),
                mode: c.mode(),
                status: c.status,
                hub_deposit: c.state.my_deposit,
                client_deposit: c.state.peer_deposit,
                credit_sent: c.state.credit_sent,
                credit_received: c.state.credit_received,
                hub_available: c.state.available_balance(),
            })
            .collect()
    }

    /// Canonical snapshot bytes.
    pub fn persist_state(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("hub state serializes")
    }

    pub fn recover_state(snapshot: &[u8]) -> Result<Hub, HubError> {
        serde_json::from_slice(snapshot).map_err(|e| HubError::RecoveryError(e.to_string()))
    }

    /// Hashlocks of every route whose incoming and outgoing legs differ in hashlock
    /// or violate the expiry margin. Empty for a consistent hub.
    pub fn route_violations(&self) -> Vec<Digest> {
        self.routes
            .values()
            .filter(|r| {
                r.incoming.hashlock() != r.outgoing.hashlock()
                    || r.incoming.body.expiry < r.outgoing.body.expiry + self.config.claim_margin_delta
            })
            .map(|r| r.hashlock)
            .collect()
    }

    pub fn ledgers(&self) -> BTreeSet<LedgerId> {
        self.cursors.keys().cloned().collect()
    }
}

impl HubChannel {
    fn mode(&self) -> ChannelMode {
        self.state.mode()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub channel_id: ChannelId,
    pub client_id: ClientId,
    pub ledger_id: LedgerId,
    pub mode: ChannelMode,
    pub status: ContractStatus,
    pub hub_deposit: Amount,
    pub client_deposit: Amount,
    pub credit_sent: Amount,
    pub credit_received: Amount,
    pub hub_available: Amount,
}

fn failed(channel_id: &ChannelId, step: &str, e: &LedgerError) -> HubAction {
    log::warn!("{channel_id}: {step} failed: {e}");
    HubAction::Failed { channel_id: channel_id.clone(), step: step.into(), error: e.code().into() }
}

/// An inclusion proof for one of our incoming promises against a receipt
/// recorded on-chain, which need not be the latest one we hold.
pub fn prove_against(state: &ChannelState, recorded: &Receipt, hashlock: &Digest) -> Option<InclusionProof> {
    let (receipt, proof) = if state.last_receipt_received.as_ref() == Some(recorded) {
        state.inclusion_proof(hashlock)?
    } else {
        let leaves = reconstruct_leaves(&state.proof_candidates(), &recorded.body.pending_root)?;
        proof_against(recorded, &leaves, hashlock)?
    };
    Some(InclusionProof { receipt, proof })
}

#[cfg(test)]
mod tests;
