//! Scripted deviations from the honest state machines. Each behavior either
//! filters the actor's outgoing traffic, takes a one-off step when it is
//! activated, or acts on every tick while active.

use serde::{Deserialize, Serialize};

use super::Sim;
use crate::crypto::{hash_commit, Digest, SecretPreimage};
use crate::ledger::{ContractStatus, LedgerAccess, LedgerOp};
use crate::protocol::{ChannelId, ClientId, LedgerId, Party, Promise, PromiseBody, Receipt, Tick};
use crate::wire::WireMessage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Behavior {
    WithholdSecret,
    WithholdReceipt,
    StaleReceiptDispute,
    DoubleClaim,
    OverspendPromise,
    ReplayPromise,
    Crash,
}

impl Behavior {
    pub const ALL: [Behavior; 7] = [
        Behavior::WithholdSecret,
        Behavior::WithholdReceipt,
        Behavior::StaleReceiptDispute,
        Behavior::DoubleClaim,
        Behavior::OverspendPromise,
        Behavior::ReplayPromise,
        Behavior::Crash,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(super) struct Directive {
    pub actor: String,
    pub behavior: Behavior,
    pub at: Tick,
    pub until: Option<Tick>,
}

impl Directive {
    fn active(&self, now: Tick) -> bool {
        self.at <= now && self.until.is_none_or(|u| now < u)
    }
}

impl Sim<'_> {
    fn has(&self, actor: &str, behavior: Behavior, now: Tick) -> bool {
        self.directives.iter().any(|d| d.actor == actor && d.behavior == behavior && d.active(now))
    }

    /// Whether the sender's adversary swallows this message.
    pub(super) fn intercepts(&self, from: &str, _to: &str, msg: &WireMessage, now: Tick) -> bool {
        match msg {
            WireMessage::Secret { .. } => self.has(from, Behavior::WithholdSecret, now),
            WireMessage::Receipt { .. } => self.has(from, Behavior::WithholdReceipt, now),
            _ => false,
        }
    }

    /// An actor running a stale dispute leaves its channels to the attack
    /// instead of defending them.
    pub(super) fn suppressed(&self, actor: &str, now: Tick) -> bool {
        self.has(actor, Behavior::StaleReceiptDispute, now)
    }

    pub(super) fn activate(&mut self, actor: &str, behavior: Behavior, now: Tick) {
        let hub = actor == self.hub_actor;
        match behavior {
            Behavior::WithholdSecret if !hub => {
                // The payee keeps the secret to itself and claims at the last moment.
                let w = self.wallets.get_mut(actor).expect("validated");
                w.config.claim_threshold = 1;
                w.config.resend_after = Tick::MAX / 4;
            }
            Behavior::StaleReceiptDispute => self.stale_dispute(actor, now),
            Behavior::OverspendPromise => self.overspend(actor, now),
            Behavior::ReplayPromise => self.replay(actor, now),
            Behavior::Crash => {
                let until = self.directives.last().and_then(|d| d.until);
                self.crash(actor, until, now);
            }
            _ => {}
        }
    }

    pub(super) fn adversary_tick(&mut self, now: Tick) {
        let claimers: Vec<String> = self
            .directives
            .iter()
            .filter(|d| d.behavior == Behavior::DoubleClaim && d.active(now))
            .map(|d| d.actor.clone())
            .collect();
        for actor in claimers {
            self.double_claim(&actor, now);
        }
    }

    /// Channels the actor can attack: all of the hub's, or the client's own.
    fn targets(&self, actor: &str) -> Vec<(LedgerId, ChannelId, ClientId)> {
        let Some(hub) = self.hub.as_ref() else { return Vec::new() };
        hub.hub
            .channels
            .iter()
            .filter(|(_, c)| c.status == ContractStatus::Open)
            .filter(|(_, c)| actor == self.hub_actor || c.client_id.as_str() == actor)
            .map(|(id, c)| (c.state.params.ledger_id.clone(), id.clone(), c.client_id.clone()))
            .collect()
    }

    fn party(&self, actor: &str) -> Party {
        if actor == self.hub_actor {
            Party::Hub
        } else {
            Party::Client
        }
    }

    /// Opens a dispute, then puts the attacker's own oldest receipt on record.
    fn stale_dispute(&mut self, actor: &str, now: Tick) {
        let party = self.party(actor);
        for (ledger, channel_id, _) in self.targets(actor) {
            let oldest: Option<Receipt> = self
                .observed
                .receipts
                .get(&channel_id)
                .and_then(|rs| rs.iter().find(|r| r.body.from == party))
                .cloned();
            let open = LedgerOp::InitiateDispute { channel_id: channel_id.clone(), party, receipt: None };
            let opened = self.ledgers.submit(&ledger, open);
            self.trace_action(now, actor, serde_json::json!({"action": "stale_dispute", "channel_id": channel_id, "ok": opened.is_ok()}));
            if let (Ok(_), Some(receipt)) = (opened, oldest) {
                let _ = self.ledgers.submit(&ledger, LedgerOp::RespondDispute { channel_id, party, receipt });
            }
        }
    }

    /// Claims promises whose amounts a receipt has already settled.
    fn double_claim(&mut self, actor: &str, now: Tick) {
        let hub = actor == self.hub_actor;
        let candidates: Vec<(ClientId, Promise)> =
            if hub { self.observed.to_hub.clone() } else { self.observed.from_hub.clone() };
        for (client, p) in candidates {
            if !hub && client.as_str() != actor {
                continue;
            }
            let h = p.hashlock();
            let Some(preimage) = self.observed.preimages.get(&h).copied() else { continue };
            if p.body.expiry <= now || !self.settled_off_chain(actor, &p) {
                continue;
            }
            let Some(ledger) = self.ledger_of(&p.body.channel_id) else { continue };
            let claimant = self.party(actor);
            let op = LedgerOp::Claim { channel_id: p.body.channel_id.clone(), claimant, promise: p.clone(), preimage, proof: None };
            if self.ledgers.submit(&ledger, op).is_ok() {
                self.trace_action(now, actor, serde_json::json!({"action": "double_claim", "hashlock": h}));
            }
        }
    }

    /// The receiver of `p` holds a receipt covering it and has not claimed it.
    fn settled_off_chain(&self, actor: &str, p: &Promise) -> bool {
        let h = p.hashlock();
        let state = if actor == self.hub_actor {
            self.hub.as_ref().and_then(|hub| hub.hub.channels.get(&p.body.channel_id)).map(|c| &c.state)
        } else {
            self.wallets.get(actor).and_then(|w| w.channel.as_ref())
        };
        state.is_some_and(|s| {
            s.channel_id() == &p.body.channel_id
                && !s.pending_in.contains_key(&h)
                && !s.claimed_in.contains_key(&h)
                && s.last_receipt_received.as_ref().is_some_and(|r| r.body.index >= p.body.index)
        })
    }

    fn ledger_of(&self, channel_id: &ChannelId) -> Option<LedgerId> {
        self.ledgers.0.iter().find(|(_, l)| l.contracts.contains_key(channel_id)).map(|(id, _)| id.clone())
    }

    /// Sends a signed promise for more than the channel can carry.
    fn overspend(&mut self, actor: &str, now: Tick) {
        let mut preimage = [0u8; 32];
        rand::RngCore::fill_bytes(&mut self.rng, &mut preimage);
        let hashlock: Digest = hash_commit(&SecretPreimage(preimage));
        if actor == self.hub_actor {
            let Some(service) = self.hub.as_ref() else { return };
            let mut out = Vec::new();
            for c in service.hub.channels.values().filter(|c| c.status == ContractStatus::Open) {
                let st = &c.state;
                let body = PromiseBody {
                    channel_id: st.channel_id().clone(),
                    from: Party::Hub,
                    index: st.next_promise_index(),
                    amount: st.my_deposit + st.credit_received + 1,
                    hashlock,
                    expiry: now + 3 * st.params.claim_margin_delta,
                };
                let key = service.hub.private_key(st.params.scheme);
                if let Ok(p) = Promise::sign(body, st.params.scheme, key) {
                    out.push((c.client_id.clone(), WireMessage::Promise { promise: p, payee: None }));
                }
            }
            let from = self.hub_actor.clone();
            for (to, msg) in out {
                self.send(&from, to.as_str(), msg, now);
            }
        } else {
            let Some(w) = self.wallets.get(actor) else { return };
            let Some(st) = w.channel.as_ref() else { return };
            let body = PromiseBody {
                channel_id: st.channel_id().clone(),
                from: Party::Client,
                index: st.next_promise_index(),
                amount: st.my_deposit + st.credit_received + 1,
                hashlock,
                expiry: now + 3 * st.params.claim_margin_delta,
            };
            let payee = self.wallets.keys().find(|k| k.as_str() != actor).cloned();
            if let Ok(p) = Promise::sign(body, st.params.scheme, &w.keypair.private) {
                let msg = WireMessage::Promise { promise: p, payee: payee.map(|k| ClientId::from(k.as_str())) };
                self.send(actor, &self.hub_actor.clone(), msg, now);
            }
        }
        self.trace_action(now, actor, serde_json::json!({"action": "overspend_promise"}));
    }

    /// Resends the most recent promise the actor has sent.
    fn replay(&mut self, actor: &str, now: Tick) {
        let hub = actor == self.hub_actor;
        let mut out: Vec<(String, String, WireMessage)> = Vec::new();
        if hub {
            let mut latest: std::collections::BTreeMap<&ClientId, &Promise> = Default::default();
            for (client, p) in &self.observed.from_hub {
                latest.insert(client, p);
            }
            for (client, p) in latest {
                out.push((actor.into(), client.to_string(), WireMessage::Promise { promise: p.clone(), payee: None }));
            }
        } else if let Some((_, p)) = self.observed.to_hub.iter().rev().find(|(c, _)| c.as_str() == actor) {
            let payee = self.wallets.keys().find(|k| k.as_str() != actor).map(|k| ClientId::from(k.as_str()));
            out.push((actor.into(), self.hub_actor.clone(), WireMessage::Promise { promise: p.clone(), payee }));
        }
        for (from, to, msg) in out {
            self.send(&from, &to, msg, now);
        }
        self.trace_action(now, actor, serde_json::json!({"action": "replay_promise"}));
    }
}
