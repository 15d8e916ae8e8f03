//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Every balance expectation comes from an oracle in this file that replays
//! the run's trace (messages and ledger events) or plain arithmetic over the
//! script; none reuse the settlement code under test.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use itertools::Itertools;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use upc_core::client::Outcome;
use upc_core::crypto::{hash_commit, merkle_prove, Digest, Keypair, PrivateKey, SecretPreimage, SignatureSchemeId};
use upc_core::ledger::{Balances, EventPayload, InclusionProof, Ledger, LedgerConfig, LedgerError};
use upc_core::protocol::{
    Amount, ChannelId, ChannelMode, ChannelParams, ChannelState, Party, Promise, PromiseBody, Receipt, Tick,
};
use upc_core::simnet::corpus::{self, at, close, pay, HUB};
use upc_core::simnet::{bench_scenario, run_scenario, Action, Behavior, RunReport, Scenario, TraceEntry, TraceLevel, WalletSpec};
use upc_core::wire::WireMessage;

const MODES: [ChannelMode; 2] = [ChannelMode::Serialized, ChannelMode::Concurrent];

// Tolerances and sizes fixed by the acceptance criteria.
const BENCH_PAYMENTS: u64 = 10_000;
const MAX_ONCHAIN_TX: u64 = 10;
const MAX_WALL_MS: u64 = 60_000;
const MIN_PAYMENTS_PER_SEC: f64 = 1_000.0;
const RANDOM_SCENARIOS: u64 = 100;
const MIN_HTLC_CLAIMS: u32 = 1_000;
const DETERMINISM_RUNS: usize = 3;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn from_failures(ok: String, failures: Vec<String>) -> Self {
        match failures.first() {
            None => Verdict { passed: true, detail: ok },
            Some(first) => Verdict { passed: false, detail: format!("{} failure(s); first: {first}", failures.len()) },
        }
    }
}

/// Runs scenarios and records the conservation check for every run.
#[derive(Default)]
struct Runs {
    conservation: Mutex<Vec<(String, Option<String>)>>,
}

impl Runs {
    fn run(&self, s: &Scenario) -> RunReport {
        let r = run_scenario(s).unwrap_or_else(|e| panic!("{}: {e}", s.name));
        let verdict = conservation(s, &r).err();
        self.conservation.lock().unwrap().push((s.name.clone(), verdict));
        r
    }
}

// ---------------------------------------------------------------------------
// Trace oracles

/// Everything the trace says about one channel.
#[derive(Default)]
struct Book {
    client: String,
    ledger: String,
    scheme: Option<SignatureSchemeId>,
    deposit: BTreeMap<Party, Amount>,
    /// Promise amounts by paying party and hashlock.
    promises: BTreeMap<(Party, Digest), Amount>,
    /// Promises whose secret the payee revealed, off-chain or by claiming.
    revealed: BTreeSet<(Party, Digest)>,
    /// Secrets of the client's own promises that reached the client.
    client_learned: BTreeSet<Digest>,
    /// Highest hub-issued credit the client received.
    receipted_to_client: Amount,
    closed: Option<Balances>,
}

impl Book {
    fn deposit(&self, p: Party) -> Amount {
        self.deposit.get(&p).copied().unwrap_or(0)
    }

    fn revealed_from(&self, payer: Party) -> i128 {
        self.revealed.iter().filter(|(p, _)| *p == payer).map(|k| self.promises[k] as i128).sum()
    }

    /// Brute-force settlement: deposits moved by every revealed promise, once.
    fn oracle(&self) -> Balances {
        let client = self.deposit(Party::Client) as i128 + self.revealed_from(Party::Hub) - self.revealed_from(Party::Client);
        let total = (self.deposit(Party::Client) + self.deposit(Party::Hub)) as i128;
        Balances { client: client as Amount, hub: (total - client) as Amount }
    }

    /// The client's floor: deposit plus receipted credit minus the payments
    /// whose secrets it has seen.
    fn zero_trust_floor(&self) -> i128 {
        let sent: i128 = self
            .client_learned
            .iter()
            .filter_map(|h| self.promises.get(&(Party::Client, *h)))
            .map(|a| *a as i128)
            .sum();
        self.deposit(Party::Client) as i128 + self.receipted_to_client as i128 - sent
    }
}

fn books(r: &RunReport) -> BTreeMap<ChannelId, Book> {
    let mut books: BTreeMap<ChannelId, Book> = BTreeMap::new();
    for e in &r.trace {
        match e {
            TraceEntry::Ledger { ledger, event, .. } => {
                let b = books.entry(event.payload.channel_id().clone()).or_default();
                match &event.payload {
                    EventPayload::Deployed { params, .. } => {
                        b.client = params.client_id.to_string();
                        b.ledger = ledger.to_string();
                        b.scheme = Some(params.scheme);
                    }
                    EventPayload::Deposited { party, amount, .. } => *b.deposit.entry(*party).or_default() += amount,
                    EventPayload::Claimed { claimant, promise, .. } => {
                        let key = (claimant.other(), promise.hashlock());
                        b.promises.insert(key, promise.body.amount);
                        b.revealed.insert(key);
                        if *claimant == Party::Hub {
                            b.client_learned.insert(promise.hashlock());
                        }
                    }
                    EventPayload::DisputeOpened { receipt: Some(rc), .. } | EventPayload::ReceiptSubmitted { receipt: rc, .. } => {
                        if rc.body.from == Party::Hub {
                            b.receipted_to_client = b.receipted_to_client.max(rc.body.cumulative_credit);
                        }
                    }
                    EventPayload::Closed { settlement, .. } => b.closed = Some(*settlement),
                    _ => {}
                }
            }
            TraceEntry::Msg { from, msg: Some(msg), dropped, .. } => match msg {
                WireMessage::Promise { promise, .. } => {
                    let b = books.entry(promise.body.channel_id.clone()).or_default();
                    b.promises.insert((promise.body.from, promise.hashlock()), promise.body.amount);
                }
                WireMessage::Secret { secret } => {
                    let b = books.entry(secret.channel_id.clone()).or_default();
                    if from == HUB {
                        b.revealed.insert((Party::Client, secret.hashlock));
                        if !dropped {
                            b.client_learned.insert(secret.hashlock);
                        }
                    } else {
                        b.revealed.insert((Party::Hub, secret.hashlock));
                    }
                }
                WireMessage::Receipt { receipt } if from == HUB && !dropped && receipt.body.from == Party::Hub => {
                    let b = books.entry(receipt.body.channel_id.clone()).or_default();
                    b.receipted_to_client = b.receipted_to_client.max(receipt.body.cumulative_credit);
                }
                _ => {}
            },
            _ => {}
        }
    }
    books
}

fn genesis(s: &Scenario) -> BTreeMap<String, Amount> {
    let mut out = BTreeMap::new();
    for l in &s.ledgers {
        for (a, v) in &l.genesis_balances {
            *out.entry(a.to_string()).or_default() += v;
        }
    }
    out
}

/// Account balances plus funds still held by contracts equal genesis.
fn conservation(s: &Scenario, r: &RunReport) -> Result<(), String> {
    let mut held: i128 = 0;
    for e in &r.trace {
        if let TraceEntry::Ledger { event, .. } = e {
            match &event.payload {
                EventPayload::Deposited { amount, .. } => held += *amount as i128,
                EventPayload::Closed { settlement, .. } => held -= settlement.total() as i128,
                _ => {}
            }
        }
    }
    let accounts: i128 = r.final_balances.values().map(|v| *v as i128).sum();
    let start: i128 = genesis(s).values().map(|v| *v as i128).sum();
    if accounts + held == start {
        Ok(())
    } else {
        Err(format!("{}: accounts {accounts} + contracts {held} != genesis {start}", s.name))
    }
}

/// Contract settlements match the brute-force replay, and each client's
/// final balance is genesis minus deposit plus its payout.
fn settlement_matches(s: &Scenario, r: &RunReport) -> Result<usize, String> {
    let g = genesis(s);
    let books = books(r);
    for (id, b) in &books {
        let closed = b.closed.ok_or_else(|| format!("{}: channel {id} never closed", s.name))?;
        if closed != b.oracle() {
            return Err(format!("{}: channel {id} settled {closed:?}, oracle {:?}", s.name, b.oracle()));
        }
        let expected = g[&b.client] - b.deposit(Party::Client) + closed.client;
        if r.final_balances[&b.client] != expected {
            return Err(format!("{}: {} holds {}, expected {expected}", s.name, b.client, r.final_balances[&b.client]));
        }
    }
    Ok(books.len())
}

fn honest(s: &Scenario, actor: &str) -> bool {
    !s.script.iter().any(|e| matches!(&e.action, Action::Adversary { actor: a, .. } if a == actor))
}

fn zero_trust(s: &Scenario, r: &RunReport) -> Result<(), String> {
    for b in books(r).values().filter(|b| honest(s, &b.client)) {
        let closed = b.closed.ok_or_else(|| format!("{}: {} never closed", s.name, b.client))?;
        if (closed.client as i128) < b.zero_trust_floor() {
            return Err(format!("{}: {} settled {} < floor {}", s.name, b.client, closed.client, b.zero_trust_floor()));
        }
    }
    Ok(())
}

/// Fees the hub earned: incoming minus outgoing amount of every route
/// whose two legs were both revealed.
fn hub_fees(r: &RunReport) -> i128 {
    let books = books(r);
    let incoming: BTreeMap<Digest, Amount> = books
        .values()
        .flat_map(|b| b.revealed.iter().filter(|(p, _)| *p == Party::Client).map(move |k| (k.1, b.promises[k])))
        .collect();
    let outgoing: BTreeMap<Digest, Amount> = books
        .values()
        .flat_map(|b| b.revealed.iter().filter(|(p, _)| *p == Party::Hub).map(move |k| (k.1, b.promises[k])))
        .collect();
    incoming.iter().filter_map(|(h, i)| outgoing.get(h).map(|o| *i as i128 - *o as i128)).sum()
}

fn hub_safety(s: &Scenario, r: &RunReport) -> Result<i128, String> {
    let start = genesis(s)[HUB] as i128;
    let fees = hub_fees(r);
    let end = r.final_balances[HUB] as i128;
    if end >= start + fees {
        Ok(fees)
    } else {
        Err(format!("{}: hub ends with {end} < {start} + fees {fees}", s.name))
    }
}

// ---------------------------------------------------------------------------
// Criteria

fn amortization(runs: &Runs) -> Verdict {
    let mut failures = Vec::new();
    let mut detail = Vec::new();
    for (mode, in_flight) in [(ChannelMode::Serialized, 1), (ChannelMode::Concurrent, 8)] {
        let s = bench_scenario(BENCH_PAYMENTS, mode, in_flight);
        let r = runs.run(&s);
        let m = &r.metrics;
        let pps = m.payments_per_sec();
        let g = genesis(&s);
        let moved = BENCH_PAYMENTS as Amount;
        let balances_ok = r.final_balances["alice"] == g["alice"] - moved && r.final_balances["bob"] == g["bob"] + moved;
        detail.push(format!("{mode:?}: {} paid, {} on-chain tx, {} ms, {pps:.0}/s", m.payments_paid, m.onchain_tx_count, m.elapsed_wall_ms));
        if m.payments_paid != BENCH_PAYMENTS
            || m.onchain_tx_count > MAX_ONCHAIN_TX
            || m.elapsed_wall_ms >= MAX_WALL_MS
            || pps < MIN_PAYMENTS_PER_SEC
            || !balances_ok
            || !r.passed()
        {
            failures.push(detail.last().unwrap().clone());
        }
    }
    Verdict::from_failures(detail.join("; "), failures)
}

/// A random topology, payment schedule and close schedule.
fn random_scenario(i: u64) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(0xACCE_0000 + i);
    let names = ["alice", "bob", "carol", "dave"];
    let clients = &names[..rng.gen_range(2..=4)];
    let two_ledgers = rng.gen_bool(0.5);
    let (first, second) = if rng.gen_bool(0.5) {
        (SignatureSchemeId::SCHEME_A, SignatureSchemeId::SCHEME_B)
    } else {
        (SignatureSchemeId::SCHEME_B, SignatureSchemeId::SCHEME_A)
    };
    let home: Vec<&str> = clients.iter().map(|_| if two_ledgers && rng.gen_bool(0.5) { "B" } else { "A" }).collect();
    let on = |l: &str| clients.iter().zip(&home).filter(|(_, h)| **h == l).map(|(c, _)| *c).collect::<Vec<_>>();
    let mut ledgers = vec![corpus::ledger("A", first, &on("A"))];
    if two_ledgers {
        ledgers.push(corpus::ledger("B", second, &on("B")));
    }
    let mut hub = upc_core::hub::HubConfig::new(HUB);
    hub.fee_bps = [0, 0, 25, 100][rng.gen_range(0..4)];
    let wallets = clients
        .iter()
        .zip(&home)
        .map(|(c, h)| WalletSpec {
            id: (*c).into(),
            ledger: (*h).into(),
            mode: MODES[rng.gen_range(0..2)],
            config: Default::default(),
        })
        .collect();
    let mut script = Vec::new();
    for c in clients {
        script.push(at(0, Action::Register { actor: (*c).into() }));
        if rng.gen_bool(0.85) {
            script.push(at(3, Action::Deposit { actor: (*c).into(), amount: rng.gen_range(50..=600) }));
        }
    }
    for _ in 0..rng.gen_range(1..=10) {
        let payer = clients[rng.gen_range(0..clients.len())];
        let payee = *clients.iter().filter(|c| **c != payer).nth(rng.gen_range(0..clients.len() - 1)).unwrap();
        script.push(at(rng.gen_range(5..=120), pay(payer, payee, rng.gen_range(1..=200))));
    }
    for c in clients {
        script.push(at(rng.gen_range(130..=260), close(c)));
    }
    script.sort_by_key(|e| e.at);
    Scenario {
        name: format!("random-{i}"),
        seed: i,
        ledgers,
        hub,
        wallets,
        delay: 1,
        max_ticks: 3_000,
        trace_level: TraceLevel::Full,
        script,
        expectations: Vec::new(),
    }
}

fn settlement_formula(runs: &Runs) -> Verdict {
    let mut failures = Vec::new();
    let (mut channels, mut paid) = (0, 0);
    for i in 0..RANDOM_SCENARIOS {
        let s = random_scenario(i);
        let r = runs.run(&s);
        paid += r.metrics.payments_paid;
        match settlement_matches(&s, &r) {
            Ok(n) => channels += n,
            Err(e) => failures.push(e),
        }
        if !r.passed() {
            failures.push(format!("{}: {:?}", s.name, r.failures()));
        }
    }
    Verdict::from_failures(
        format!("{RANDOM_SCENARIOS} scenarios, {channels} channel settlements equal the replay exactly ({paid} payments)"),
        failures,
    )
}

fn adversary_runs(runs: &Runs, actors: &[&str], fee_bps: u64) -> Vec<(Scenario, RunReport)> {
    let mut out = Vec::new();
    for mode in MODES {
        for actor in actors {
            for (i, b) in Behavior::ALL.iter().enumerate() {
                let mut s = corpus::adversary(actor, *b, mode, 300 + i as u64);
                s.hub.fee_bps = fee_bps;
                let r = runs.run(&s);
                out.push((s, r));
            }
        }
    }
    out
}

fn zero_trust_hub(runs: &Runs) -> Verdict {
    let results = adversary_runs(runs, &[HUB], 0);
    let failures = results
        .iter()
        .filter_map(|(s, r)| zero_trust(s, r).err().or_else(|| (!r.passed()).then(|| format!("{}: {:?}", s.name, r.failures()))))
        .collect();
    Verdict::from_failures(format!("{} hub-directive runs (7 directives x 2 modes), every honest client above its floor", results.len()), failures)
}

fn hub_safety_clients(runs: &Runs) -> Verdict {
    let mut failures = Vec::new();
    let mut fees = 0;
    let mut count = 0;
    for fee_bps in [0, 100] {
        for (s, r) in adversary_runs(runs, &["alice", "bob"], fee_bps) {
            count += 1;
            match hub_safety(&s, &r) {
                Ok(f) => fees += f,
                Err(e) => failures.push(e),
            }
            if !r.passed() {
                failures.push(format!("{}: {:?}", s.name, r.failures()));
            }
        }
    }
    Verdict::from_failures(format!("{count} client-directive runs at 0 and 100 bps, hub never below initial + fees ({fees} earned)"), failures)
}

#[derive(Debug)]
struct ClaimCase {
    seed: u64,
    concurrent: bool,
    scheme_b: bool,
    hub_pays: bool,
    expiry_offset: i64,
    preimage_ok: bool,
    /// 0 valid, 1 signed by a stranger, 2 body altered after signing.
    signature: u8,
    again: bool,
}

fn claim_case() -> impl Strategy<Value = ClaimCase> {
    (any::<u64>(), any::<bool>(), any::<bool>(), any::<bool>(), -4i64..=4, prop::bool::weighted(0.75), prop::sample::select(vec![0u8, 0, 0, 1, 2]), any::<bool>())
        .prop_map(|(seed, concurrent, scheme_b, hub_pays, expiry_offset, preimage_ok, signature, again)| ClaimCase {
            seed,
            concurrent,
            scheme_b,
            hub_pays,
            expiry_offset,
            preimage_ok,
            signature,
            again,
        })
}

#[derive(Default)]
struct ClaimTally {
    accepted: Cell<u32>,
    expired: Cell<u32>,
    bad_preimage: Cell<u32>,
    bad_signature: Cell<u32>,
    repeated: Cell<u32>,
}

fn bump(c: &Cell<u32>) {
    c.set(c.get() + 1);
}

const CLAIM_NOW: Tick = 20;

fn claim_once(c: &ClaimCase, tally: &ClaimTally) -> Result<(), TestCaseError> {
    let mut rng = ChaCha20Rng::seed_from_u64(c.seed);
    let scheme = if c.scheme_b { SignatureSchemeId::SCHEME_B } else { SignatureSchemeId::SCHEME_A };
    let client = Keypair::generate(scheme, &mut rng);
    let hub = Keypair::generate(scheme, &mut rng);
    let stranger = Keypair::generate(scheme, &mut rng);
    let mode = if c.concurrent { ChannelMode::Concurrent } else { ChannelMode::Serialized };
    let params = params(scheme, mode, &client, &hub);
    let id = params.channel_id.clone();
    let mut ledger = Ledger::new(ledger_config(scheme));
    ledger.deploy_contract(params, HUB.into()).unwrap();
    ledger.deposit(&id, Party::Client, 500).unwrap();
    ledger.deposit(&id, Party::Hub, 500).unwrap();
    ledger.advance_time(CLAIM_NOW).unwrap();

    let payer = if c.hub_pays { Party::Hub } else { Party::Client };
    let payer_key = if c.hub_pays { &hub.private } else { &client.private };
    let preimage = SecretPreimage(rng.gen());
    let expiry = (CLAIM_NOW as i64 + c.expiry_offset) as Tick;
    let body = PromiseBody { channel_id: id.clone(), from: payer, index: 1, amount: rng.gen_range(1..=500), hashlock: hash_commit(&preimage), expiry };
    let promise = match c.signature {
        0 => Promise::sign(body, scheme, payer_key).unwrap(),
        1 => Promise::sign(body, scheme, &stranger.private).unwrap(),
        _ => {
            let mut p = Promise::sign(body, scheme, payer_key).unwrap();
            p.body.amount += 1;
            p
        }
    };
    let mut presented = preimage;
    if !c.preimage_ok {
        presented.0[rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8);
    }

    // Oracle: a claim succeeds exactly when all three conditions hold.
    let live = CLAIM_NOW < expiry;
    let signed = c.signature == 0;
    let valid = live && c.preimage_ok && signed;
    let result = ledger.claim_promise(&id, payer.other(), promise, presented, None);
    match &result {
        Ok(_) => bump(&tally.accepted),
        Err(LedgerError::Expired) => bump(&tally.expired),
        Err(LedgerError::BadPreimage) => bump(&tally.bad_preimage),
        Err(LedgerError::BadSignature) => bump(&tally.bad_signature),
        Err(_) => {}
    }
    prop_assert_eq!(result.is_ok(), valid, "claim result {:?}", result);
    if let Err(e) = &result {
        let justified = match e {
            LedgerError::Expired => !live,
            LedgerError::BadPreimage => !c.preimage_ok,
            LedgerError::BadSignature => !signed,
            _ => false,
        };
        prop_assert!(justified, "rejection {:?} names a condition that holds", e);
    }
    if valid && c.again {
        // A fresh, validly signed promise under the same hashlock.
        let body = PromiseBody { channel_id: id.clone(), from: payer, index: 2, amount: 1, hashlock: hash_commit(&preimage), expiry };
        let second = Promise::sign(body, scheme, payer_key).unwrap();
        let again = ledger.claim_promise(&id, payer.other(), second, preimage, None);
        prop_assert_eq!(again, Err(LedgerError::AlreadyClaimed));
        bump(&tally.repeated);
    }
    Ok(())
}

fn params(scheme: SignatureSchemeId, mode: ChannelMode, client: &Keypair, hub: &Keypair) -> ChannelParams {
    ChannelParams {
        channel_id: "ch-1".into(),
        ledger_id: "L".into(),
        client_id: "alice".into(),
        hub_id: HUB.into(),
        client_pk: client.public.clone(),
        hub_pk: hub.public.clone(),
        scheme,
        mode,
        claim_margin_delta: 5,
        dispute_window: 10,
    }
}

fn ledger_config(scheme: SignatureSchemeId) -> LedgerConfig {
    LedgerConfig {
        ledger_id: "L".into(),
        scheme,
        genesis_balances: [("alice".into(), 1_000), (HUB.into(), 1_000)].into_iter().collect(),
        penalty_bps: 1_000,
    }
}

fn htlc_semantics() -> Verdict {
    let tally = ClaimTally::default();
    let config = Config { cases: MIN_HTLC_CLAIMS, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let result = runner.run(&claim_case(), |c| claim_once(&c, &tally));
    let total = tally.accepted.get() + tally.expired.get() + tally.bad_preimage.get() + tally.bad_signature.get() + tally.repeated.get();
    let detail = format!(
        "{total} claims: {} accepted, {} expired, {} wrong preimage, {} bad signature, {} repeated",
        tally.accepted.get(),
        tally.expired.get(),
        tally.bad_preimage.get(),
        tally.bad_signature.get(),
        tally.repeated.get()
    );
    match result {
        Ok(()) if total >= MIN_HTLC_CLAIMS => Verdict { passed: true, detail },
        Ok(()) => Verdict { passed: false, detail: format!("only {detail}") },
        Err(e) => Verdict { passed: false, detail: format!("{e}") },
    }
}

/// Two channel ends over a mock ledger, driven step by step.
struct Pair {
    ledger: Ledger,
    id: ChannelId,
    client: ChannelState,
    hub: ChannelState,
    hub_key: PrivateKey,
    rng: ChaCha20Rng,
}

impl Pair {
    fn open(mode: ChannelMode) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let scheme = SignatureSchemeId::SCHEME_A;
        let ck = Keypair::generate(scheme, &mut rng);
        let hk = Keypair::generate(scheme, &mut rng);
        let params = params(scheme, mode, &ck, &hk);
        let mut ledger = Ledger::new(ledger_config(scheme));
        ledger.deploy_contract(params.clone(), HUB.into()).unwrap();
        let id = params.channel_id.clone();
        ledger.deposit(&id, Party::Client, 100).unwrap();
        ledger.deposit(&id, Party::Hub, 100).unwrap();
        let mut client = ChannelState::new(params.clone(), Party::Client);
        let mut hub = ChannelState::new(params, Party::Hub);
        (client.my_deposit, client.peer_deposit, hub.my_deposit, hub.peer_deposit) = (100, 100, 100, 100);
        Pair { ledger, id, client, hub, hub_key: hk.private, rng }
    }

    /// A hub promise to the client, accepted; the client holds the secret.
    fn promise(&mut self, amount: Amount) -> Promise {
        let now = self.ledger.now;
        let proposal = self.client.make_proposal(amount, now + 50, now, "alice".into(), &mut self.rng).unwrap();
        let p = self.hub.make_promise(&proposal, &self.hub_key, now).unwrap();
        self.client.accept_promise(p.clone(), now).unwrap();
        p
    }

    fn resolve(&mut self, p: &Promise) -> Receipt {
        let now = self.ledger.now;
        let s = self.client.reveal_secret(&p.hashlock()).unwrap();
        let r = self.hub.accept_secret(&s, &self.hub_key, now).unwrap();
        self.client.accept_receipt(r.clone(), now).unwrap();
        r
    }

    fn claim(&mut self, p: &Promise, proof: Option<InclusionProof>) -> Result<(), LedgerError> {
        let s = self.client.secrets[&p.hashlock()];
        self.ledger.claim_promise(&self.id, Party::Client, p.clone(), s, proof).map(|_| ())
    }

    fn settle(&mut self) -> Option<Balances> {
        self.ledger.advance_time(20).unwrap();
        let _ = self.ledger.finalize_settlement(&self.id);
        self.ledger.contract(&self.id).unwrap().settlement
    }
}

fn double_count() -> Verdict {
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    // Serialized: the receipt's index already covers the promise.
    let mut s = Pair::open(ChannelMode::Serialized);
    let covered = s.promise(10);
    let receipt = s.resolve(&covered);
    s.ledger.initiate_dispute(&s.id, Party::Client, Some(receipt)).unwrap();
    match s.claim(&covered, None) {
        Err(LedgerError::ProofRequired) => notes.push("serialized covered claim rejected by the index check".to_owned()),
        other => failures.push(format!("serialized covered claim: {other:?}")),
    }
    // 100/100 deposits; the hub paid 10 once.
    let expected = Balances { client: 110, hub: 90 };
    match s.settle() {
        Some(b) if b == expected => {}
        other => failures.push(format!("serialized settlement {other:?}, expected {expected:?}")),
    }

    // Concurrent: the covered promise is absent from the pending root; the
    // in-flight one is present.
    let mut c = Pair::open(ChannelMode::Concurrent);
    let covered = c.promise(10);
    let in_flight = c.promise(7);
    let receipt = c.resolve(&covered);
    c.ledger.initiate_dispute(&c.id, Party::Client, Some(receipt.clone())).unwrap();
    let bogus = InclusionProof { receipt, proof: merkle_prove(&[covered.leaf()], 0).unwrap() };
    match (c.claim(&covered, None), c.claim(&covered, Some(bogus))) {
        (Err(LedgerError::ProofRequired), Err(LedgerError::ProofRequired)) => {
            notes.push("concurrent covered claim rejected without and with a forged proof".to_owned())
        }
        other => failures.push(format!("concurrent covered claim: {other:?}")),
    }
    let (receipt, proof) = c.client.inclusion_proof(&in_flight.hashlock()).unwrap();
    match c.claim(&in_flight, Some(InclusionProof { receipt, proof })) {
        Ok(()) => notes.push("in-flight claim with a valid proof accepted".to_owned()),
        Err(e) => failures.push(format!("in-flight claim: {e:?}")),
    }
    let expected = Balances { client: 117, hub: 83 };
    match c.settle() {
        Some(b) if b == expected => {}
        other => failures.push(format!("concurrent settlement {other:?}, expected {expected:?}")),
    }
    Verdict::from_failures(notes.join("; "), failures)
}

fn equivalence(runs: &Runs) -> Verdict {
    let payments: [(&str, &str, Amount); 6] =
        [("alice", "bob", 50), ("bob", "carol", 30), ("carol", "alice", 20), ("bob", "alice", 40), ("alice", "carol", 10), ("carol", "bob", 60)];
    // Net effect of all six, independent of order.
    let mut expected: BTreeMap<String, i128> = ["alice", "bob", "carol"].iter().map(|c| (c.to_string(), corpus::GENESIS as i128)).collect();
    for (payer, payee, amount) in payments {
        *expected.get_mut(payer).unwrap() -= amount as i128;
        *expected.get_mut(payee).unwrap() += amount as i128;
    }
    let mut failures = Vec::new();
    let mut count = 0;
    for (i, order) in payments.iter().permutations(payments.len()).enumerate() {
        let order: Vec<_> = order.into_iter().copied().collect();
        let [serialized, concurrent] = MODES.map(|m| runs.run(&corpus::batch(m, &order, i as u64)));
        count += 1;
        let clients = |r: &RunReport| -> BTreeMap<String, i128> {
            r.final_balances.iter().filter(|(a, _)| a.as_str() != HUB).map(|(a, v)| (a.clone(), *v as i128)).collect()
        };
        if clients(&concurrent) != clients(&serialized) {
            failures.push(format!("order {i}: concurrent {:?} != serialized {:?}", clients(&concurrent), clients(&serialized)));
        } else if clients(&serialized) != expected || serialized.metrics.payments_paid != 6 || concurrent.metrics.payments_paid != 6 {
            failures.push(format!("order {i}: {:?}, expected {expected:?}", clients(&serialized)));
        }
    }
    Verdict::from_failures(format!("{count} orderings: concurrent balances equal serialized, all 6 paid each time"), failures)
}

fn cross_ledger(runs: &Runs) -> Verdict {
    let mut failures = Vec::new();
    let mut shared = 0;
    for mode in MODES {
        let s = corpus::cross_ledger(mode, 21);
        let r = runs.run(&s);
        if !r.passed() {
            failures.push(format!("{mode:?}: {:?}", r.failures()));
        }
        if let Err(e) = settlement_matches(&s, &r) {
            failures.push(e);
        }
        let books = books(&r);
        let by_client = |c: &str| books.values().find(|b| b.client == c).unwrap();
        let (a, b) = (by_client("alice"), by_client("bob"));
        if a.ledger == b.ledger || a.scheme == b.scheme {
            failures.push(format!("{mode:?}: channels share a ledger or scheme"));
        }
        let locks = |b: &Book| b.promises.keys().map(|(_, h)| *h).collect::<BTreeSet<_>>();
        if locks(a) != locks(b) || locks(a).is_empty() {
            failures.push(format!("{mode:?}: hashlocks differ between the two ledgers"));
        }
        shared += locks(a).len();
    }
    Verdict::from_failures(
        format!("both modes complete; {shared} hashlocks each appear on both ledgers; per-ledger settlements equal the replay"),
        failures,
    )
}

fn determinism_and_recovery(runs: &Runs) -> Verdict {
    let mut failures = Vec::new();
    let scenarios = [
        corpus::happy_path(ChannelMode::Serialized, 5),
        corpus::cross_ledger(ChannelMode::Concurrent, 6),
        corpus::adversary(HUB, Behavior::StaleReceiptDispute, ChannelMode::Serialized, 7),
        corpus::adversary("bob", Behavior::DoubleClaim, ChannelMode::Concurrent, 8),
        random_scenario(1_000),
    ];
    for s in &scenarios {
        let bytes: Vec<Vec<u8>> = (0..DETERMINISM_RUNS).map(|_| runs.run(s).deterministic_bytes()).collect();
        if bytes.iter().any(|b| *b != bytes[0]) {
            failures.push(format!("{}: reports differ across runs", s.name));
        }
    }

    for mode in MODES {
        let base = corpus::happy_path(mode, 9);
        let clean = runs.run(&base);
        let Some(forwarded) = clean.trace.iter().find_map(|e| match e {
            TraceEntry::Msg { t, from, to, kind, .. } if from == HUB && to == "bob" && kind == "PROMISE" => Some(*t),
            _ => None,
        }) else {
            failures.push(format!("{mode:?}: no forwarded promise"));
            continue;
        };
        // The payee's secret reaches the hub while it is down.
        let mut s = base.clone();
        s.name = format!("hub-crash-{mode:?}");
        s.script.push(at(forwarded + 1, Action::Crash { actor: HUB.into(), until: Some(forwarded + 8) }));
        let r = runs.run(&s);
        let secret_lost = r.trace.iter().any(|e| matches!(e, TraceEntry::Msg { to, kind, dropped: true, .. } if to == HUB && kind == "SECRET"));
        let outcome = |actor: &str| {
            r.trace.iter().find_map(|e| match e {
                TraceEntry::Payment { actor: a, record, .. } if a == actor => Some(record.outcome),
                _ => None,
            })
        };
        let checks = [
            (secret_lost, "the crash did not land between promise and secret".to_owned()),
            (outcome("alice") == Some(Outcome::Paid) && outcome("bob") == Some(Outcome::Received), format!("outcomes {:?}/{:?}", outcome("alice"), outcome("bob"))),
            (r.passed(), format!("{:?}", r.failures())),
        ];
        for (ok, why) in checks {
            if !ok {
                failures.push(format!("{}: {why}", s.name));
            }
        }
        // Close both channels so the client and hub floors can be checked on settlements.
        let mut closed = s.clone();
        closed.name = format!("hub-crash-closed-{mode:?}");
        closed.script.push(at(100, close("alice")));
        closed.script.push(at(100, close("bob")));
        let r = runs.run(&closed);
        for check in [zero_trust(&closed, &r), hub_safety(&closed, &r).map(|_| ())] {
            if let Err(e) = check {
                failures.push(e);
            }
        }
    }
    Verdict::from_failures(
        format!("{} scenarios byte-identical over {DETERMINISM_RUNS} runs; hub crash between promise and secret recovers in both modes", scenarios.len()),
        failures,
    )
}

fn main() {
    let runs = Runs::default();
    // Throughput is measured alone so other criteria do not compete for CPU.
    let c1 = amortization(&runs);
    let [c2, c4, c5, c6, c7, c8, c9, c10] = std::thread::scope(|s| {
        let jobs: [Box<dyn FnOnce() -> Verdict + Send + '_>; 8] = [
            Box::new(|| settlement_formula(&runs)),
            Box::new(|| zero_trust_hub(&runs)),
            Box::new(|| hub_safety_clients(&runs)),
            Box::new(htlc_semantics),
            Box::new(double_count),
            Box::new(|| equivalence(&runs)),
            Box::new(|| cross_ledger(&runs)),
            Box::new(|| determinism_and_recovery(&runs)),
        ];
        let handles = jobs.map(|j| s.spawn(j));
        handles.map(|h| h.join().unwrap_or_else(|_| Verdict { passed: false, detail: "panicked".into() }))
    });
    let conservation = runs.conservation.into_inner().unwrap();
    let broken: Vec<String> = conservation.iter().filter_map(|(_, e)| e.clone()).collect();
    let c3 = Verdict::from_failures(format!("{} runs, every one conserves value exactly", conservation.len()), broken);

    let verdicts = [
        ("amortization", c1),
        ("settlement formula", c2),
        ("conservation", c3),
        ("zero-trust hub", c4),
        ("hub safety", c5),
        ("HTLC semantics", c6),
        ("double-count defense", c7),
        ("concurrent/serialized equivalence", c8),
        ("cross-ledger", c9),
        ("determinism and recovery", c10),
    ];
    let mut all = true;
    for (i, (name, v)) in verdicts.iter().enumerate() {
        all &= v.passed;
        println!("criterion {:>2} {:<34} {}  {}", i + 1, name, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    if !all {
        std::process::exit(1);
    }
}
