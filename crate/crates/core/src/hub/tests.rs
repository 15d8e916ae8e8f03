use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::ledger::{LedgerConfig, Ledgers};

const A: SignatureSchemeId = SignatureSchemeId::SCHEME_A;
const B: SignatureSchemeId = SignatureSchemeId::SCHEME_B;

struct Client {
    kp: Keypair,
    ch: Option<ChannelState>,
}

struct Fx {
    ledgers: Ledgers,
    hub: Hub,
    clients: BTreeMap<String, Client>,
    rng: ChaCha20Rng,
}

fn ledger(id: &str, scheme: SignatureSchemeId) -> LedgerConfig {
    let genesis = [("alice", 1_000), ("bob", 1_000), ("carol", 1_000), ("hub", 10_000_000)];
    LedgerConfig {
        ledger_id: id.into(),
        scheme,
        genesis_balances: genesis.iter().map(|(a, b)| (AccountId::from(*a), *b)).collect(),
        penalty_bps: 1000,
    }
}

fn fx(config: HubConfig) -> Fx {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let hub = Hub::new(config, &mut rng);
    let ledgers = Ledgers::new([ledger("A", A), ledger("B", B)]);
    Fx { ledgers, hub, clients: BTreeMap::new(), rng }
}

fn config() -> HubConfig {
    HubConfig::new("hub")
}

impl Fx {
    fn now(&self) -> Tick {
        self.ledgers.get(&"A".into()).unwrap().now
    }

    fn advance(&mut self, ticks: Tick) {
        self.ledgers.advance_time(ticks).unwrap();
    }

    fn join(&mut self, name: &str, deposit: Amount, mode: ChannelMode) {
        let kp = Keypair::generate(A, &mut self.rng);
        let params = self.hub.register_client(name.into(), kp.public.clone(), "A".into(), mode, &mut self.ledgers).unwrap();
        let mut ch = ChannelState::new(params.clone(), Party::Client);
        ch.peer_deposit = self.hub.config.hub_float;
        if deposit > 0 {
            self.ledgers.submit(&"A".into(), LedgerOp::Deposit { channel_id: params.channel_id, party: Party::Client, amount: deposit }).unwrap();
            ch.my_deposit = deposit;
        }
        self.clients.insert(name.into(), Client { kp, ch: Some(ch) });
        let now = self.now();
        self.hub.hub_tick(now, &mut self.ledgers);
    }

    fn ch(&mut self, name: &str) -> &mut ChannelState {
        self.clients.get_mut(name).unwrap().ch.as_mut().unwrap()
    }

    fn key(&self, name: &str) -> PrivateKey {
        self.clients[name].kp.private.clone()
    }

    /// Payee invoice plus the payer's promise with the given expiry.
    fn promise(&mut self, payer: &str, payee: &str, amount: Amount, expiry: Tick) -> Promise {
        let now = self.now();
        let mut rng = self.rng.clone();
        let proposal = self.ch(payee).make_proposal(amount, expiry, now, payee.into(), &mut rng).unwrap();
        self.rng = rng;
        let key = self.key(payer);
        self.ch(payer).make_promise(&proposal, &key, now).unwrap()
    }

    fn route(&mut self, payer: &str, payee: &str, amount: Amount, expiry: Tick) -> Result<Promise, HubError> {
        let p = self.promise(payer, payee, amount, expiry);
        let now = self.now();
        self.hub.route_promise(&payer.into(), p, &payee.into(), now)
    }

    /// Runs steps 2 to 6 for a routed promise; returns the payee's receipt.
    fn complete(&mut self, payer: &str, payee: &str, outgoing: Promise, send_receipt: bool) -> Receipt {
        let now = self.now();
        let h = outgoing.hashlock();
        self.ch(payee).accept_promise(outgoing, now).unwrap();
        let secret = self.ch(payee).reveal_secret(&h).unwrap();
        let out = self.hub.handle_secret(&payee.into(), &secret, now).unwrap();
        let WireMessage::Receipt { receipt } = &out[0].1 else { panic!("{out:?}") };
        self.ch(payee).accept_receipt(receipt.clone(), now).unwrap();
        let WireMessage::Secret { secret: fwd } = &out[1].1 else { panic!("{out:?}") };
        assert_eq!(out[1].0, ClientId::from(payer));
        let key = self.key(payer);
        let r = self.ch(payer).accept_secret(fwd, &key, now).unwrap();
        if send_receipt {
            self.hub.handle_receipt(&payer.into(), r, now).unwrap();
        }
        receipt.clone()
    }
}

#[test]
fn registration_deploys_and_funds_a_contract() {
    let mut f = fx(config());
    f.join("alice", 100, ChannelMode::Serialized);
    let ch_id = f.hub.active_channel_id(&"alice".into()).unwrap().clone();
    let c = f.ledgers.get(&"A".into()).unwrap().contract(&ch_id).unwrap();
    assert_eq!(c.status, ContractStatus::Open);
    assert_eq!(c.deposits, Balances { client: 100, hub: 1_000_000 });
    assert_eq!(f.hub.channels[&ch_id].state.peer_deposit, 100);
}

#[test]
fn registration_errors() {
    let mut f = fx(config());
    f.join("alice", 0, ChannelMode::Serialized);
    let pk = f.clients["alice"].kp.public.clone();
    let again = f.hub.register_client("alice".into(), pk.clone(), "A".into(), ChannelMode::Serialized, &mut f.ledgers);
    assert_eq!(again.unwrap_err(), HubError::AlreadyRegistered);

    let err = f.hub.register_client("bob".into(), pk, "B".into(), ChannelMode::Serialized, &mut f.ledgers).unwrap_err();
    assert_eq!(err.code(), "SchemeError");
}

#[test]
fn outgoing_leg_keeps_the_margin() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Serialized);
    f.join("bob", 0, ChannelMode::Serialized);
    let out = f.route("alice", "bob", 100, 1000).unwrap();
    assert_eq!((out.body.amount, out.body.expiry), (100, 950));
    let route = &f.hub.routes[&out.hashlock()];
    assert_eq!(route.state, RouteState::AwaitSecret);
    assert_eq!(route.incoming.hashlock(), out.hashlock());
    assert!(f.hub.route_violations().is_empty());
}

#[test]
fn fee_comes_off_the_outgoing_amount() {
    let mut cfg = config();
    cfg.fee_bps = 100;
    let mut f = fx(cfg);
    f.join("alice", 500, ChannelMode::Serialized);
    f.join("bob", 0, ChannelMode::Serialized);
    assert_eq!(f.route("alice", "bob", 100, 1000).unwrap().body.amount, 99);
}

#[test]
fn short_payee_capacity_is_refused() {
    let mut cfg = config();
    cfg.hub_float = 40;
    let mut f = fx(cfg);
    f.join("alice", 500, ChannelMode::Serialized);
    f.join("bob", 0, ChannelMode::Serialized);
    // Oracle: hub capacity toward bob is its float, nothing has been paid yet.
    let bob_ch = f.hub.active_channel_id(&"bob".into()).unwrap().clone();
    assert_eq!(f.hub.channels[&bob_ch].state.available_balance(), 40);
    let err = f.route("alice", "bob", 100, 1000).unwrap_err();
    assert_eq!(err, HubError::HubLiquidityExhausted { needed: 100, available: 40 });
    assert!(f.hub.routes.is_empty());
    let alice_ch = f.hub.active_channel_id(&"alice".into()).unwrap().clone();
    assert!(f.hub.channels[&alice_ch].state.pending_in.is_empty());
}

#[test]
fn tight_expiry_and_unknown_payee_are_refused() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Concurrent);
    f.join("bob", 0, ChannelMode::Concurrent);
    assert_eq!(f.route("alice", "bob", 10, 100).unwrap_err(), HubError::ExpiryTooSoon);
    assert_eq!(f.route("alice", "bob", 10, 40).unwrap_err().code(), "ExpiryTooSoon");
    let p = f.promise("alice", "bob", 10, 500);
    assert_eq!(f.hub.route_promise(&"alice".into(), p, &"zed".into(), 0).unwrap_err(), HubError::NoRoute);
}

#[test]
fn secret_yields_receipt_forwarding_and_settlement() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Serialized);
    f.join("bob", 0, ChannelMode::Serialized);
    let out = f.route("alice", "bob", 120, 1000).unwrap();
    let h = out.hashlock();
    let receipt = f.complete("alice", "bob", out, false);
    // Oracle: bob has been paid 120 and nothing else.
    assert_eq!(receipt.body.cumulative_credit, 120);
    assert_eq!(f.hub.routes[&h].state, RouteState::SecretHeld);
    let r = f.ch("alice").last_receipt_sent.clone().unwrap();
    f.hub.handle_receipt(&"alice".into(), r, 0).unwrap();
    assert_eq!(f.hub.routes[&h].state, RouteState::SettledIn);
    assert_eq!(f.hub.channel_of(&"alice".into()).unwrap().state.credit_received, 120);
}

#[test]
fn unknown_and_late_secrets() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Serialized);
    f.join("bob", 0, ChannelMode::Serialized);
    let bogus = SecretMessage { channel_id: "x".into(), hashlock: Digest([9; 32]), preimage: crate::crypto::SecretPreimage([1; 32]) };
    assert_eq!(f.hub.handle_secret(&"bob".into(), &bogus, 0).unwrap_err(), HubError::UnknownPromise);

    let out = f.route("alice", "bob", 10, 200).unwrap();
    let h = out.hashlock();
    f.ch("bob").accept_promise(out.clone(), 0).unwrap();
    let secret = f.ch("bob").reveal_secret(&h).unwrap();
    assert_eq!(f.hub.handle_secret(&"bob".into(), &secret, out.body.expiry).unwrap_err(), HubError::Expired);
    assert!(f.ch("bob").last_receipt_received.is_none());
}

#[test]
fn withheld_receipt_leads_to_exactly_one_claim() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Concurrent);
    f.join("bob", 0, ChannelMode::Concurrent);
    let out = f.route("alice", "bob", 70, 300).unwrap();
    let h = out.hashlock();
    f.complete("alice", "bob", out, false);
    let mut claims = 0;
    for _ in 0..300 {
        f.advance(1);
        let now = f.now();
        let tick = f.hub.hub_tick(now, &mut f.ledgers);
        for a in &tick.actions {
            match a {
                HubAction::Claimed { hashlock, .. } => {
                    assert_eq!(*hashlock, h);
                    assert_eq!(now, 300 - 50);
                    claims += 1;
                }
                HubAction::Failed { .. } => panic!("{a:?}"),
                _ => {}
            }
        }
    }
    assert_eq!(claims, 1);
    let events = f.ledgers.get(&"A".into()).unwrap().events.iter().filter(|e| e.payload.kind() == "CLAIMED").count();
    assert_eq!(events, 1);
}

#[test]
fn prompt_receipts_mean_no_onchain_actions() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Serialized);
    f.join("bob", 0, ChannelMode::Serialized);
    for _ in 0..3 {
        let out = f.route("alice", "bob", 10, f.now() + 200).unwrap();
        f.complete("alice", "bob", out, true);
        f.advance(1);
    }
    for _ in 0..400 {
        f.advance(1);
        let now = f.now();
        assert!(f.hub.hub_tick(now, &mut f.ledgers).actions.is_empty());
    }
}

#[test]
fn unanswered_route_expires_and_frees_capacity() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Concurrent);
    f.join("bob", 0, ChannelMode::Concurrent);
    let bob_ch = f.hub.active_channel_id(&"bob".into()).unwrap().clone();
    let before = f.hub.channels[&bob_ch].state.available_balance();
    let out = f.route("alice", "bob", 30, 200).unwrap();
    assert_eq!(f.hub.channels[&bob_ch].state.available_balance(), before - 30);
    f.advance(out.body.expiry);
    let now = f.now();
    let tick = f.hub.hub_tick(now, &mut f.ledgers);
    assert!(tick.expired && tick.actions.is_empty());
    assert!(f.hub.routes.is_empty());
    assert_eq!(f.hub.channels[&bob_ch].state.available_balance(), before);
}

#[test]
fn payee_refusal_unwinds_the_route() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Serialized);
    f.join("bob", 0, ChannelMode::Serialized);
    let out = f.route("alice", "bob", 30, 200).unwrap();
    let h = out.hashlock();
    let replies = f.hub.handle_offchain(&"bob".into(), WireMessage::error("ChannelBusy", "", Some(h)), 0);
    assert_eq!(replies.len(), 1);
    assert_eq!(replies[0].0, ClientId::from("alice"));
    assert!(f.hub.routes.is_empty());
    assert!(f.hub.channel_of(&"alice".into()).unwrap().state.pending_in.is_empty());
    assert!(f.hub.channel_of(&"bob".into()).unwrap().state.pending_out.is_empty());
}

#[test]
fn cooperative_close_checks_the_record() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Serialized);
    f.join("bob", 0, ChannelMode::Serialized);
    let out = f.route("alice", "bob", 80, 300).unwrap();
    f.complete("alice", "bob", out, true);
    let channel_id = f.hub.active_channel_id(&"alice".into()).unwrap().clone();
    let key = f.key("alice");
    let wrong = CloseRecord { channel_id: channel_id.clone(), client_balance: 500, hub_balance: 1_000_000 };
    let sig = key.sign_raw(&wrong.canonical_bytes()).unwrap();
    let err = f.hub.handle_close_request(&"alice".into(), wrong, sig, 0, &mut f.ledgers).unwrap_err();
    assert_eq!(err.code(), "CloseMismatch");

    let right = CloseRecord { channel_id: channel_id.clone(), client_balance: 420, hub_balance: 1_000_080 };
    let sig = key.sign_raw(&right.canonical_bytes()).unwrap();
    let reply = f.hub.handle_close_request(&"alice".into(), right, sig, 0, &mut f.ledgers).unwrap();
    assert!(matches!(reply, WireMessage::CloseAccept { .. }));
    let c = f.ledgers.get(&"A".into()).unwrap().contract(&channel_id).unwrap();
    assert_eq!(c.status, ContractStatus::Closed);
    assert!(f.hub.active_channel_id(&"alice".into()).is_none());
    // A closed client may register again and gets a fresh channel.
    let pk = f.clients["alice"].kp.public.clone();
    let params = f.hub.register_client("alice".into(), pk, "A".into(), ChannelMode::Serialized, &mut f.ledgers).unwrap();
    assert_ne!(params.channel_id, channel_id);
}

#[test]
fn persist_recover_round_trip_and_corruption() {
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Concurrent);
    f.join("bob", 0, ChannelMode::Concurrent);
    f.route("alice", "bob", 30, 200).unwrap();
    let bytes = f.hub.persist_state();
    let back = Hub::recover_state(&bytes).unwrap();
    assert_eq!(back, f.hub);
    assert_eq!(back.persist_state(), bytes);

    let truncated = &bytes[..bytes.len() / 2];
    assert_eq!(Hub::recover_state(truncated).unwrap_err().code(), "RecoveryError");
}

#[test]
fn journal_replay_matches_live_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = fx(config());
    f.join("alice", 500, ChannelMode::Concurrent);
    f.join("bob", 0, ChannelMode::Concurrent);
    let mut svc = HubService::new(f.hub.clone(), HubStore::open(dir.path()).unwrap()).unwrap();
    let p = f.promise("alice", "bob", 25, 300);
    let out = svc.on_message(&"alice".into(), WireMessage::Promise { promise: p, payee: Some("bob".into()) }, 0, &mut f.ledgers).unwrap();
    let WireMessage::Promise { promise: outgoing, .. } = out[0].1.clone() else { panic!("{out:?}") };
    f.ch("bob").accept_promise(outgoing.clone(), 0).unwrap();
    let secret = f.ch("bob").reveal_secret(&outgoing.hashlock()).unwrap();
    svc.on_message(&"bob".into(), WireMessage::Secret { secret }, 1, &mut f.ledgers).unwrap();
    assert_eq!(svc.store.journal_len(), 2);

    let recovered = HubService::recover(HubStore::open(dir.path()).unwrap()).unwrap();
    assert_eq!(recovered.hub, svc.hub);

    std::fs::write(dir.path().join("hub.snapshot.json"), b"{\"config\":").unwrap();
    let err = HubService::recover(HubStore::open(dir.path()).unwrap()).unwrap_err();
    assert_eq!(err.code(), "RecoveryError");
}

proptest! {
    #[test]
    fn gross_up_is_the_smallest_sufficient_amount(net in 1u64..10_000_000, bps in 0u64..5_000) {
        let fees = FeePolicy { fee_bps: bps };
        let gross = fees.gross_up(net).unwrap();
        prop_assert!(fees.outgoing(gross) >= net);
        prop_assert!(gross == net || fees.outgoing(gross - 1) < net);
    }
}
