//! Ready-made scenarios: the happy path, the two-ledger path, the adversary
//! corpus and the payment orderings used by the equivalence checks.

use super::{Action, Behavior, Scenario, ScriptEntry, TraceLevel, WalletSpec};
use crate::client::WalletConfig;
use crate::crypto::SignatureSchemeId;
use crate::hub::HubConfig;
use crate::ledger::LedgerConfig;
use crate::protocol::{Amount, ChannelMode, Tick};

pub const HUB: &str = "hub";
pub const GENESIS: Amount = 1_000;
pub const HUB_GENESIS: Amount = 10_000_000;
pub const DEPOSIT: Amount = 500;

pub fn ledger(id: &str, scheme: SignatureSchemeId, accounts: &[&str]) -> LedgerConfig {
    let mut genesis: std::collections::BTreeMap<_, _> = accounts.iter().map(|a| ((*a).into(), GENESIS)).collect();
    genesis.insert(HUB.into(), HUB_GENESIS);
    LedgerConfig { ledger_id: id.into(), scheme, genesis_balances: genesis, penalty_bps: 1_000 }
}

fn wallet(id: &str, ledger: &str, mode: ChannelMode) -> WalletSpec {
    WalletSpec { id: id.into(), ledger: ledger.into(), mode, config: WalletConfig::default() }
}

pub fn at(at: Tick, action: Action) -> ScriptEntry {
    ScriptEntry { at, action }
}

pub fn pay(payer: &str, payee: &str, amount: Amount) -> Action {
    Action::Pay { payer: payer.into(), payee: payee.into(), amount }
}

pub fn close(actor: &str) -> Action {
    Action::Close { actor: actor.into() }
}

/// Registration at tick 0 and deposits at tick 3 for every listed wallet.
fn join(script: &mut Vec<ScriptEntry>, depositors: &[&str], all: &[&str]) {
    for w in all {
        script.push(at(0, Action::Register { actor: (*w).into() }));
    }
    for w in depositors {
        script.push(at(3, Action::Deposit { actor: (*w).into(), amount: DEPOSIT }));
    }
}

/// alice pays bob 100 on one ledger; only alice deposits and nobody closes.
pub fn happy_path(mode: ChannelMode, seed: u64) -> Scenario {
    let mut script = Vec::new();
    join(&mut script, &["alice"], &["alice", "bob"]);
    script.push(at(5, pay("alice", "bob", 100)));
    Scenario {
        name: "happy-path".into(),
        seed,
        ledgers: vec![ledger("A", SignatureSchemeId::SCHEME_A, &["alice", "bob"])],
        hub: HubConfig::new(HUB),
        wallets: vec![wallet("alice", "A", mode), wallet("bob", "A", mode)],
        delay: 1,
        max_ticks: 2_000,
        trace_level: TraceLevel::Full,
        script,
        expectations: Vec::new(),
    }
}

/// alice on ledger A with the first scheme, bob on ledger B with the second;
/// both deposit, pay each other and close.
pub fn cross_ledger(mode: ChannelMode, seed: u64) -> Scenario {
    let mut script = Vec::new();
    join(&mut script, &["alice", "bob"], &["alice", "bob"]);
    script.push(at(5, pay("alice", "bob", 100)));
    script.push(at(30, pay("bob", "alice", 30)));
    script.push(at(60, close("alice")));
    script.push(at(60, close("bob")));
    Scenario {
        name: "cross-ledger".into(),
        seed,
        ledgers: vec![
            ledger("A", SignatureSchemeId::SCHEME_A, &["alice"]),
            ledger("B", SignatureSchemeId::SCHEME_B, &["bob"]),
        ],
        hub: HubConfig::new(HUB),
        wallets: vec![wallet("alice", "A", mode), wallet("bob", "B", mode)],
        delay: 1,
        max_ticks: 3_000,
        trace_level: TraceLevel::Full,
        script,
        expectations: Vec::new(),
    }
}

/// The two-ledger topology with payments in both directions around an
/// adversary directive for `actor` starting at tick 34, after each channel
/// has seen two receipts in each direction.
pub fn adversary(actor: &str, behavior: Behavior, mode: ChannelMode, seed: u64) -> Scenario {
    let mut s = cross_ledger(mode, seed);
    s.name = format!("adversary-{actor}-{behavior:?}").to_lowercase();
    let until = match behavior {
        Behavior::Crash => Some(100),
        _ => None,
    };
    s.script = Vec::new();
    join(&mut s.script, &["alice", "bob"], &["alice", "bob"]);
    s.script.push(at(5, pay("alice", "bob", 100)));
    s.script.push(at(12, pay("bob", "alice", 30)));
    s.script.push(at(19, pay("alice", "bob", 40)));
    s.script.push(at(26, pay("bob", "alice", 10)));
    s.script.push(at(34, Action::Adversary { actor: actor.into(), behavior, until }));
    s.script.push(at(36, pay("alice", "bob", 50)));
    s.script.push(at(49, pay("bob", "alice", 20)));
    s.script.push(at(400, close("alice")));
    s.script.push(at(400, close("bob")));
    s
}

/// Every directive against every role: the hub, then each client.
pub fn adversary_corpus(mode: ChannelMode) -> Vec<Scenario> {
    let mut out = Vec::new();
    for actor in [HUB, "alice", "bob"] {
        for (i, b) in Behavior::ALL.iter().enumerate() {
            out.push(adversary(actor, *b, mode, 100 + i as u64));
        }
    }
    out
}

/// Payments issued together at tick 5 in the given order, on one ledger,
/// followed by cooperative closes.
pub fn batch(mode: ChannelMode, payments: &[(&str, &str, Amount)], seed: u64) -> Scenario {
    let clients = ["alice", "bob", "carol"];
    let mut script = Vec::new();
    join(&mut script, &clients, &clients);
    for (payer, payee, amount) in payments {
        script.push(at(5, pay(payer, payee, *amount)));
    }
    for c in clients {
        script.push(at(200, close(c)));
    }
    Scenario {
        name: "batch".into(),
        seed,
        ledgers: vec![ledger("A", SignatureSchemeId::SCHEME_A, &clients)],
        hub: HubConfig::new(HUB),
        wallets: clients.iter().map(|c| wallet(c, "A", mode)).collect(),
        delay: 1,
        max_ticks: 3_000,
        trace_level: TraceLevel::Summary,
        script,
        expectations: Vec::new(),
    }
}
