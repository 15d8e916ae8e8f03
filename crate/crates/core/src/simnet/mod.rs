//! Deterministic scenario harness: wallets, the hub and the ledgers on one
//! single-threaded loop over an in-memory bus, with scripted adversaries.
//!
//! Each tick runs, in order: due script actions, message delivery, the hub's
//! background handler, every wallet's background handler, then the ledger
//! clocks advance by one.

mod adversary;
mod checks;
pub mod corpus;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Direction, Outcome, PaymentRecord, Wallet, WalletConfig};
use crate::crypto::{Digest, Keypair, SecretPreimage};
use crate::hub::{Hub, HubConfig, HubService, HubStore, RouteState};
use crate::ledger::{ContractStatus, LedgerConfig, LedgerEvent, Ledgers};
use crate::protocol::{Amount, ChannelId, ChannelMode, ClientId, LedgerId, Promise, Receipt, Tick};
use crate::wire::WireMessage;

pub use adversary::Behavior;
pub use checks::{AssertionResult, Expectation, NamedExpectation};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("unknown actor {0}")]
    UnknownActor(String),
    #[error("unknown ledger {0}")]
    UnknownLedger(String),
    #[error("duplicate actor {0}")]
    DuplicateActor(String),
    #[error("malformed script entry {index}: {reason}")]
    BadScript { index: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalletSpec {
    pub id: ClientId,
    pub ledger: LedgerId,
    pub mode: ChannelMode,
    #[serde(default)]
    pub config: WalletConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    /// Every delivered message in full.
    #[default]
    Full,
    /// Message kind and hashlock only.
    Summary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Register { actor: String },
    Deposit { actor: String, amount: Amount },
    /// The payer expects the invoice; the payee issues it.
    Pay { payer: String, payee: String, amount: Amount },
    /// An invoice the payer is not expecting.
    Invoice { payee: String, payer: String, amount: Amount },
    Close { actor: String },
    /// The hub operator closes `client`'s channel.
    HubClose { client: String },
    Adversary { actor: String, behavior: Behavior, #[serde(default)] until: Option<Tick> },
    Crash { actor: String, #[serde(default)] until: Option<Tick> },
    Restart { actor: String },
    /// Keeps the run going for at least this many ticks.
    Advance { ticks: Tick },
    /// `count` payments, keeping at most `in_flight` outstanding at the payer.
    /// With `close_after`, both ends close cooperatively once it drains.
    PayStream {
        payer: String,
        payee: String,
        amount: Amount,
        count: u64,
        in_flight: u64,
        #[serde(default)]
        close_after: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub at: Tick,
    #[serde(flatten)]
    pub action: Action,
}

fn default_delay() -> Tick {
    1
}

fn default_max_ticks() -> Tick {
    5_000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub ledgers: Vec<LedgerConfig>,
    pub hub: HubConfig,
    pub wallets: Vec<WalletSpec>,
    /// Ticks between sending and delivering a message.
    #[serde(default = "default_delay")]
    pub delay: Tick,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: Tick,
    #[serde(default)]
    pub trace_level: TraceLevel,
    pub script: Vec<ScriptEntry>,
    #[serde(default)]
    pub expectations: Vec<NamedExpectation>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    fn hub_actor(&self) -> String {
        self.hub.hub_id.to_string()
    }

    /// Checks every reference before anything runs.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let ledgers: BTreeSet<&LedgerId> = self.ledgers.iter().map(|l| &l.ledger_id).collect();
        if ledgers.len() != self.ledgers.len() {
            return Err(ScenarioError::DuplicateActor("ledger".into()));
        }
        let hub = self.hub_actor();
        let mut actors = BTreeSet::new();
        for w in &self.wallets {
            if !ledgers.contains(&w.ledger) {
                return Err(ScenarioError::UnknownLedger(w.ledger.to_string()));
            }
            if w.id.as_str() == hub || !actors.insert(w.id.as_str()) {
                return Err(ScenarioError::DuplicateActor(w.id.to_string()));
            }
            if w.config.claim_threshold < 1 {
                return Err(ScenarioError::BadScript { index: 0, reason: format!("{}: claim_threshold must be at least 1", w.id) });
            }
        }
        let wallet = |name: &String| {
            if actors.contains(name.as_str()) {
                Ok(())
            } else {
                Err(ScenarioError::UnknownActor(name.clone()))
            }
        };
        let any = |name: &String| if *name == hub { Ok(()) } else { wallet(name) };
        for (index, entry) in self.script.iter().enumerate() {
            let bad = |reason: &str| Err(ScenarioError::BadScript { index, reason: reason.into() });
            match &entry.action {
                Action::Register { actor } | Action::Close { actor } => wallet(actor)?,
                Action::Deposit { actor, amount } => {
                    wallet(actor)?;
                    if *amount == 0 {
                        return bad("zero deposit");
                    }
                }
                Action::Pay { payer, payee, amount } | Action::Invoice { payee, payer, amount } => {
                    wallet(payer)?;
                    wallet(payee)?;
                    if *amount == 0 {
                        return bad("zero amount");
                    }
                    if payer == payee {
                        return bad("payer and payee are the same");
                    }
                }
                Action::HubClose { client } => wallet(client)?,
                Action::Adversary { actor, until, .. } | Action::Crash { actor, until } => {
                    any(actor)?;
                    if until.is_some_and(|u| u <= entry.at) {
                        return bad("until must be after at");
                    }
                }
                Action::Restart { actor } => any(actor)?,
                Action::Advance { .. } => {}
                Action::PayStream { payer, payee, amount, count, in_flight, .. } => {
                    wallet(payer)?;
                    wallet(payee)?;
                    if *amount == 0 || *count == 0 || *in_flight == 0 {
                        return bad("amount, count and in_flight must be positive");
                    }
                }
            }
        }
        for e in &self.expectations {
            e.check.validate(&any, &ledgers).map_err(|reason| ScenarioError::BadScript { index: self.script.len(), reason })?;
        }
        Ok(())
    }
}

/// One entry of the run's trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEntry {
    Script {
        t: Tick,
        #[serde(flatten)]
        action: Action,
    },
    Msg {
        t: Tick,
        from: String,
        to: String,
        kind: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        hashlock: Option<Digest>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        msg: Option<WireMessage>,
        /// Lost to an adversary or a crashed recipient.
        dropped: bool,
    },
    Ledger {
        t: Tick,
        ledger: LedgerId,
        event: LedgerEvent,
    },
    Action {
        t: Tick,
        actor: String,
        action: serde_json::Value,
    },
    Payment {
        t: Tick,
        actor: String,
        record: PaymentRecord,
    },
    End {
        t: Tick,
        rounds: u64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub payments_attempted: u64,
    pub payments_paid: u64,
    pub onchain_tx_count: u64,
    pub offchain_msg_count: u64,
    /// Iterations of the event loop.
    pub rounds: u64,
    /// Wall time; zeroed in [`RunReport::deterministic_bytes`].
    pub elapsed_wall_ms: u64,
}

impl Metrics {
    /// Everything but wall time, recomputed from a trace.
    pub fn from_trace(trace: &[TraceEntry]) -> Metrics {
        let mut m = Metrics::default();
        for entry in trace {
            match entry {
                TraceEntry::Script { action: Action::Pay { .. }, .. } => m.payments_attempted += 1,
                TraceEntry::Payment { record, .. } if record.direction == Direction::Sent && record.outcome == Outcome::Paid => {
                    m.payments_paid += 1
                }
                TraceEntry::Ledger { .. } => m.onchain_tx_count += 1,
                TraceEntry::Msg { dropped: false, .. } => m.offchain_msg_count += 1,
                TraceEntry::End { rounds, .. } => m.rounds = *rounds,
                _ => {}
            }
        }
        m
    }

    pub fn payments_per_sec(&self) -> f64 {
        self.payments_paid as f64 * 1000.0 / self.elapsed_wall_ms.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub trace: Vec<TraceEntry>,
    pub metrics: Metrics,
    /// Account balances summed over all ledgers.
    pub final_balances: BTreeMap<String, Amount>,
    pub assertion_results: Vec<AssertionResult>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.assertion_results.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> Vec<&AssertionResult> {
        self.assertion_results.iter().filter(|a| !a.passed).collect()
    }

    /// The report as JSON with wall time zeroed: identical for identical runs.
    pub fn deterministic_bytes(&self) -> Vec<u8> {
        let mut copy = self.clone();
        copy.metrics.elapsed_wall_ms = 0;
        serde_json::to_vec(&copy).expect("reports serialize")
    }

    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|e| serde_json::to_string(e).expect("trace serializes") + "\n").collect()
    }
}

#[derive(Clone, Debug)]
struct Envelope {
    deliver_at: Tick,
    from: String,
    to: String,
    msg: WireMessage,
}

#[derive(Clone, Debug)]
struct Stream {
    payer: String,
    payee: String,
    amount: Amount,
    remaining: u64,
    in_flight: u64,
    /// Close both channels once drained; cleared when the closes start.
    close_after: bool,
}

/// What went over the wire, kept so adversaries can replay it.
#[derive(Clone, Debug, Default)]
struct Observed {
    /// Client-to-hub promises with the sending client.
    to_hub: Vec<(ClientId, Promise)>,
    /// Hub-to-client promises with the receiving client.
    from_hub: Vec<(ClientId, Promise)>,
    /// Receipts by channel, in the order they were issued.
    receipts: BTreeMap<ChannelId, Vec<Receipt>>,
    preimages: BTreeMap<Digest, SecretPreimage>,
}

struct Sim<'a> {
    s: &'a Scenario,
    hub_actor: String,
    ledgers: Ledgers,
    hub: Option<HubService>,
    /// The crashed hub's durable store.
    hub_store: Option<HubStore>,
    wallets: BTreeMap<String, Wallet>,
    rng: ChaCha20Rng,
    bus: VecDeque<Envelope>,
    trace: Vec<TraceEntry>,
    cursors: BTreeMap<LedgerId, u64>,
    log_seen: BTreeMap<String, usize>,
    directives: Vec<adversary::Directive>,
    /// Crashed actors and when they come back.
    down: BTreeMap<String, Option<Tick>>,
    streams: Vec<Stream>,
    observed: Observed,
    hygiene: Vec<String>,
    /// Actors that deviated at some point.
    dishonest: BTreeSet<String>,
    wait_until: Tick,
    initial_hub: Amount,
}

pub fn run_scenario(s: &Scenario) -> Result<RunReport, ScenarioError> {
    s.validate()?;
    let started = Instant::now();
    let mut sim = Sim::new(s);
    let mut rounds = 0u64;
    let mut script: Vec<&ScriptEntry> = s.script.iter().collect();
    script.sort_by_key(|e| e.at);
    let mut script = script.into_iter().peekable();
    loop {
        let now = sim.now();
        if now >= s.max_ticks {
            break;
        }
        while let Some(entry) = script.next_if(|e| e.at <= now) {
            sim.run_action(&entry.action, now);
        }
        sim.step(now);
        rounds += 1;
        if script.peek().is_none() && sim.quiescent(now) {
            break;
        }
        sim.ledgers.advance_time(1).expect("one tick is valid");
    }
    let now = sim.now();
    sim.collect_ledger_events(now);
    sim.trace.push(TraceEntry::End { t: now, rounds });
    let mut metrics = Metrics::from_trace(&sim.trace);
    metrics.elapsed_wall_ms = started.elapsed().as_millis() as u64;
    let assertion_results = sim.assertions();
    Ok(RunReport {
        scenario: s.name.clone(),
        seed: s.seed,
        metrics,
        final_balances: sim.final_balances(),
        assertion_results,
        trace: sim.trace,
    })
}

/// `n` payments of one unit from a funded client to another on one ledger,
/// then both channels close cooperatively.
pub fn bench_scenario(n: u64, mode: ChannelMode, in_flight: u64) -> Scenario {
    let genesis = [("alice", n * 2 + 1_000), ("bob", n * 2 + 1_000), ("hub", 10_000_000)];
    let ledger = LedgerConfig {
        ledger_id: "A".into(),
        scheme: crate::crypto::SignatureSchemeId::SCHEME_A,
        genesis_balances: genesis.iter().map(|(a, b)| ((*a).into(), *b)).collect(),
        penalty_bps: 1000,
    };
    let wallet = |id: &str| WalletSpec { id: id.into(), ledger: "A".into(), mode, config: WalletConfig::default() };
    let entry = |at, action| ScriptEntry { at, action };
    Scenario {
        name: format!("bench-{n}-{mode:?}").to_lowercase(),
        seed: 1,
        ledgers: vec![ledger],
        hub: HubConfig::new("hub"),
        wallets: vec![wallet("alice"), wallet("bob")],
        delay: 1,
        max_ticks: 20 * n + 1_000,
        trace_level: TraceLevel::Summary,
        script: vec![
            entry(0, Action::Register { actor: "alice".into() }),
            entry(0, Action::Register { actor: "bob".into() }),
            entry(3, Action::Deposit { actor: "alice".into(), amount: n + 500 }),
            entry(3, Action::Deposit { actor: "bob".into(), amount: 500 }),
            entry(
                4,
                Action::PayStream { payer: "alice".into(), payee: "bob".into(), amount: 1, count: n, in_flight, close_after: true },
            ),
        ],
        expectations: Vec::new(),
    }
}

/// Runs [`bench_scenario`] with one payment in flight in serialized mode
/// and eight in concurrent mode.
pub fn throughput_bench(n: u64, mode: ChannelMode) -> RunReport {
    let in_flight = match mode {
        ChannelMode::Serialized => 1,
        ChannelMode::Concurrent => 8,
    };
    run_scenario(&bench_scenario(n.max(1), mode, in_flight)).expect("the bench scenario is well formed")
}

fn msg_hashlock(msg: &WireMessage) -> Option<Digest> {
    match msg {
        WireMessage::ProposalRelay { proposal, .. } => Some(proposal.hashlock),
        WireMessage::Promise { promise, .. } => Some(promise.hashlock()),
        WireMessage::Secret { secret } => Some(secret.hashlock),
        WireMessage::Error { hashlock, .. } => *hashlock,
        _ => None,
    }
}

impl<'a> Sim<'a> {
    fn new(s: &'a Scenario) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(s.seed);
        let ledgers = Ledgers::new(s.ledgers.iter().cloned());
        let hub = Hub::new(s.hub.clone(), &mut rng);
        let hub = HubService::new(hub, HubStore::memory()).expect("memory stores do not fail");
        let schemes: BTreeMap<&LedgerId, _> = s.ledgers.iter().map(|l| (&l.ledger_id, l.scheme)).collect();
        let wallets = s
            .wallets
            .iter()
            .map(|w| {
                let kp = Keypair::generate(schemes[&w.ledger], &mut rng);
                (w.id.to_string(), Wallet::new(w.id.clone(), kp, w.ledger.clone(), w.mode, w.config.clone()))
            })
            .collect();
        let hub_account = s.hub.hub_id.clone();
        let initial_hub = s.ledgers.iter().map(|l| l.genesis_balances.get(&hub_account).copied().unwrap_or(0)).sum();
        Sim {
            s,
            hub_actor: s.hub_actor(),
            ledgers,
            hub: Some(hub),
            hub_store: None,
            wallets,
            rng,
            bus: VecDeque::new(),
            trace: Vec::new(),
            cursors: BTreeMap::new(),
            log_seen: BTreeMap::new(),
            directives: Vec::new(),
            down: BTreeMap::new(),
            streams: Vec::new(),
            observed: Observed::default(),
            hygiene: Vec::new(),
            dishonest: BTreeSet::new(),
            wait_until: 0,
            initial_hub,
        }
    }

    fn now(&self) -> Tick {
        self.ledgers.0.values().next().map_or(0, |l| l.now)
    }

    fn is_down(&self, actor: &str) -> bool {
        self.down.contains_key(actor)
    }

    fn trace_action(&mut self, now: Tick, actor: &str, action: impl Serialize) {
        let action = serde_json::to_value(action).expect("actions serialize");
        self.trace.push(TraceEntry::Action { t: now, actor: actor.into(), action });
    }

    fn run_action(&mut self, action: &Action, now: Tick) {
        if !matches!(action, Action::PayStream { .. }) {
            self.trace.push(TraceEntry::Script { t: now, action: action.clone() });
        }
        match action {
            Action::Register { actor } => {
                let msg = self.wallets[actor].register_message();
                self.send(actor, &self.hub_actor.clone(), msg, now);
            }
            Action::Deposit { actor, amount } => {
                let w = self.wallets.get_mut(actor).expect("validated");
                if let Err(e) = w.deposit(*amount, &mut self.ledgers) {
                    self.trace_action(now, actor, serde_json::json!({"action": "deposit_failed", "error": e.code()}));
                }
            }
            Action::Pay { payer, payee, amount } => self.pay(payer, payee, *amount, true, now),
            Action::Invoice { payee, payer, amount } => self.pay(payer, payee, *amount, false, now),
            Action::Close { actor } => self.wallets.get_mut(actor).expect("validated").close_channel(now),
            Action::HubClose { client } => {
                if let Some(hub) = self.hub.as_mut() {
                    let id = hub.hub.active_channel_id(&client.as_str().into()).cloned();
                    if let Some(id) = id {
                        let _ = hub.admin(&crate::wire::AdminCommand::Close { channel_id: id });
                    }
                }
            }
            Action::Adversary { actor, behavior, until } => {
                self.dishonest.insert(actor.clone());
                self.directives.push(adversary::Directive { actor: actor.clone(), behavior: *behavior, at: now, until: *until });
                self.wait_until = self.wait_until.max(until.unwrap_or(now));
                self.activate(actor, *behavior, now);
            }
            Action::Crash { actor, until } => self.crash(actor, *until, now),
            Action::Restart { actor } => self.restart(actor, now),
            Action::Advance { ticks } => self.wait_until = self.wait_until.max(now + ticks),
            Action::PayStream { payer, payee, amount, count, in_flight, close_after } => self.streams.push(Stream {
                payer: payer.clone(),
                payee: payee.clone(),
                amount: *amount,
                remaining: *count,
                in_flight: *in_flight,
                close_after: *close_after,
            }),
        }
    }

    fn pay(&mut self, payer: &str, payee: &str, amount: Amount, expect: bool, now: Tick) {
        let w = self.wallets.get_mut(payee).expect("validated");
        match w.invoice(amount, payer.into(), now, &mut self.rng) {
            Ok(msg) => {
                if expect {
                    self.wallets.get_mut(payer).expect("validated").expect_invoice(payee.into(), amount, now);
                }
                self.send(payee, &self.hub_actor.clone(), msg, now);
            }
            Err(e) => self.trace_action(now, payee, serde_json::json!({"action": "invoice_failed", "error": e.code()})),
        }
    }

    fn crash(&mut self, actor: &str, until: Option<Tick>, now: Tick) {
        self.down.insert(actor.into(), until);
        if let Some(u) = until {
            self.wait_until = self.wait_until.max(u);
        }
        if actor == self.hub_actor {
            if let Some(service) = self.hub.take() {
                self.hub_store = Some(service.store);
            }
        }
        self.trace_action(now, actor, serde_json::json!({"action": "crashed"}));
    }

    fn restart(&mut self, actor: &str, now: Tick) {
        if self.down.remove(actor).is_none() {
            return;
        }
        if actor == self.hub_actor {
            let store = self.hub_store.take().expect("a crashed hub keeps its store");
            match HubService::recover(store) {
                Ok(service) => self.hub = Some(service),
                Err(e) => {
                    self.trace_action(now, actor, serde_json::json!({"action": "recovery_failed", "error": e.to_string()}));
                    return;
                }
            }
        }
        self.trace_action(now, actor, serde_json::json!({"action": "restarted"}));
    }

    fn send(&mut self, from: &str, to: &str, msg: WireMessage, now: Tick) {
        if self.intercepts(from, to, &msg, now) {
            self.trace.push(TraceEntry::Msg {
                t: now,
                from: from.into(),
                to: to.into(),
                kind: msg.kind().into(),
                hashlock: msg_hashlock(&msg),
                msg: None,
                dropped: true,
            });
            return;
        }
        self.bus.push_back(Envelope { deliver_at: now + self.s.delay, from: from.into(), to: to.into(), msg });
    }

    /// Records what adversaries may later replay and checks secret hygiene.
    fn observe_send(&mut self, from: &str, to: &str, msg: &WireMessage) {
        match msg {
            WireMessage::Promise { promise, .. } if to == self.hub_actor => {
                self.observed.to_hub.push((from.into(), promise.clone()));
            }
            WireMessage::Promise { promise, .. } => self.observed.from_hub.push((to.into(), promise.clone())),
            WireMessage::Receipt { receipt } => {
                self.observed.receipts.entry(receipt.body.channel_id.clone()).or_default().push(receipt.clone());
            }
            WireMessage::Secret { secret } => {
                self.observed.preimages.insert(secret.hashlock, secret.preimage);
                if let Some(w) = self.wallets.get(from) {
                    let covered = w.invoices.get(&secret.hashlock).is_some_and(|inv| {
                        inv.promise.as_ref().is_some_and(|p| p.body.amount >= inv.proposal.amount)
                    });
                    if !covered && !self.dishonest.contains(from) {
                        self.hygiene.push(format!("{from} revealed {} without a covering promise", secret.hashlock));
                    }
                }
            }
            _ => {}
        }
    }

    fn step(&mut self, now: Tick) {
        self.restart_due(now);
        self.feed_streams(now);
        self.deliver(now);
        self.hub_tick(now);
        self.wallet_ticks(now);
        self.adversary_tick(now);
        self.collect_ledger_events(now);
        self.collect_payments(now);
    }

    fn restart_due(&mut self, now: Tick) {
        let due: Vec<String> = self.down.iter().filter(|(_, u)| u.is_some_and(|u| u <= now)).map(|(a, _)| a.clone()).collect();
        for actor in due {
            self.restart(&actor, now);
        }
    }

    fn feed_streams(&mut self, now: Tick) {
        for i in 0..self.streams.len() {
            let st = self.streams[i].clone();
            let w = &self.wallets[&st.payer];
            if !w.is_open() || self.is_down(&st.payer) {
                continue;
            }
            let outstanding = (w.payments.len() + w.intents.len()) as u64;
            if st.remaining == 0 {
                if st.close_after && outstanding == 0 && self.wallets[&st.payee].invoices.is_empty() {
                    self.streams[i].close_after = false;
                    for actor in [&st.payer, &st.payee] {
                        self.trace.push(TraceEntry::Script { t: now, action: Action::Close { actor: actor.clone() } });
                        self.wallets.get_mut(actor).expect("validated").close_channel(now);
                    }
                }
                continue;
            }
            let issue = st.in_flight.saturating_sub(outstanding).min(st.remaining);
            for _ in 0..issue {
                let action = Action::Pay { payer: st.payer.clone(), payee: st.payee.clone(), amount: st.amount };
                self.trace.push(TraceEntry::Script { t: now, action });
                self.pay(&st.payer, &st.payee, st.amount, true, now);
            }
            self.streams[i].remaining -= issue;
        }
    }

    fn deliver(&mut self, now: Tick) {
        while self.bus.front().is_some_and(|e| e.deliver_at <= now) {
            let env = self.bus.pop_front().expect("checked");
            let dropped = self.is_down(&env.to);
            self.trace.push(TraceEntry::Msg {
                t: now,
                from: env.from.clone(),
                to: env.to.clone(),
                kind: env.msg.kind().into(),
                hashlock: msg_hashlock(&env.msg),
                msg: (self.s.trace_level == TraceLevel::Full).then(|| env.msg.clone()),
                dropped,
            });
            if dropped {
                continue;
            }
            self.observe_send(&env.from, &env.to, &env.msg);
            if env.to == self.hub_actor {
                let hub = self.hub.as_mut().expect("a live hub");
                let out = match hub.on_message(&env.from.as_str().into(), env.msg, now, &mut self.ledgers) {
                    Ok(out) => out,
                    Err(e) => {
                        log::error!("hub persistence failed: {e}");
                        Vec::new()
                    }
                };
                for (to, msg) in out {
                    self.send(&self.hub_actor.clone(), to.as_str(), msg, now);
                }
            } else {
                let w = self.wallets.get_mut(&env.to).expect("messages go to known actors");
                let replies = w.handle(env.msg, now, &mut self.ledgers);
                for msg in replies {
                    self.send(&env.to, &self.hub_actor.clone(), msg, now);
                }
            }
        }
    }

    fn hub_tick(&mut self, now: Tick) {
        if self.is_down(&self.hub_actor) || self.suppressed(&self.hub_actor.clone(), now) {
            return;
        }
        let hub = self.hub.as_mut().expect("a live hub");
        let out = match hub.tick(now, &mut self.ledgers) {
            Ok(out) => out,
            Err(e) => {
                log::error!("hub persistence failed: {e}");
                return;
            }
        };
        let actor = self.hub_actor.clone();
        for a in &out.actions {
            self.trace_action(now, &actor, a);
        }
        for (to, msg) in out.messages {
            self.send(&actor, to.as_str(), msg, now);
        }
    }

    fn wallet_ticks(&mut self, now: Tick) {
        let names: Vec<String> = self.wallets.keys().cloned().collect();
        for name in names {
            if self.is_down(&name) || self.suppressed(&name, now) {
                continue;
            }
            let out = self.wallets.get_mut(&name).expect("listed").client_tick(now, &mut self.ledgers);
            for a in &out.actions {
                self.trace_action(now, &name, a);
            }
            for msg in out.messages {
                self.send(&name, &self.hub_actor.clone(), msg, now);
            }
        }
    }

    fn collect_ledger_events(&mut self, now: Tick) {
        for (id, ledger) in &self.ledgers.0 {
            let cursor = self.cursors.entry(id.clone()).or_insert(0);
            for event in ledger.events_since(*cursor) {
                self.trace.push(TraceEntry::Ledger { t: now, ledger: id.clone(), event: event.clone() });
            }
            *cursor = ledger.events.len() as u64;
        }
    }

    fn collect_payments(&mut self, now: Tick) {
        for (name, w) in &self.wallets {
            let seen = self.log_seen.entry(name.clone()).or_insert(0);
            for record in &w.payment_log[*seen..] {
                self.trace.push(TraceEntry::Payment { t: now, actor: name.clone(), record: record.clone() });
            }
            *seen = w.payment_log.len();
        }
    }

    /// Nothing left to happen: no traffic, no open work at any actor and no
    /// dispute still running.
    fn quiescent(&self, now: Tick) -> bool {
        now >= self.wait_until
            && self.bus.is_empty()
            && self.down.values().all(Option::is_none)
            && self.streams.iter().all(|s| s.remaining == 0 && !s.close_after)
            && self.wallets.iter().all(|(name, w)| self.is_down(name) || self.dishonest.contains(name) || w.is_idle())
            && self.hub.as_ref().is_none_or(|h| {
                h.hub.routes.values().all(|r| matches!(r.state, RouteState::SettledIn | RouteState::Expired))
            })
            && self.ledgers.0.values().all(|l| l.contracts.values().all(|c| c.status != ContractStatus::Closing))
    }

    fn final_balances(&self) -> BTreeMap<String, Amount> {
        let mut out = BTreeMap::new();
        for ledger in self.ledgers.0.values() {
            for (account, balance) in &ledger.accounts {
                *out.entry(account.to_string()).or_insert(0) += balance;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
