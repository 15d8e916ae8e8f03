use super::corpus::{self, at, pay};
use super::*;
use crate::ledger::EventPayload;

fn kinds(r: &RunReport, kind: &str) -> usize {
    r.trace.iter().filter(|e| matches!(e, TraceEntry::Ledger { event, .. } if event.payload.kind() == kind)).count()
}

fn assert_passed(r: &RunReport) {
    assert!(r.passed(), "{}: {:?}", r.scenario, r.failures());
}

#[test]
fn happy_path_pays_with_five_onchain_transactions() {
    let r = run_scenario(&corpus::happy_path(ChannelMode::Serialized, 7)).unwrap();
    assert_passed(&r);
    assert_eq!(r.metrics.payments_attempted, 1);
    assert_eq!(r.metrics.payments_paid, 1);
    // Two deploys, two hub floats and alice's deposit.
    assert_eq!((kinds(&r, "DEPLOYED"), kinds(&r, "DEPOSITED")), (2, 3));
    assert_eq!(r.metrics.onchain_tx_count, 5);
}

#[test]
fn seeds_change_secrets_not_balances() {
    let a = run_scenario(&corpus::happy_path(ChannelMode::Serialized, 1)).unwrap();
    let b = run_scenario(&corpus::happy_path(ChannelMode::Serialized, 2)).unwrap();
    assert_eq!(a.final_balances, b.final_balances);
    assert_ne!(a.trace_jsonl(), b.trace_jsonl());
}

#[test]
fn cross_ledger_payment_shares_one_hashlock() {
    for mode in [ChannelMode::Serialized, ChannelMode::Concurrent] {
        let r = run_scenario(&corpus::cross_ledger(mode, 3)).unwrap();
        assert_passed(&r);
        assert_eq!(r.metrics.payments_paid, 2);
        let first = r
            .trace
            .iter()
            .find_map(|e| match e {
                TraceEntry::Msg { from, kind, hashlock, .. } if from == "alice" && kind == "PROMISE" => *hashlock,
                _ => None,
            })
            .unwrap();
        let channels: BTreeSet<&ChannelId> = r
            .trace
            .iter()
            .filter_map(|e| match e {
                TraceEntry::Msg { msg: Some(WireMessage::Promise { promise, .. }), .. } if promise.hashlock() == first => {
                    Some(&promise.body.channel_id)
                }
                _ => None,
            })
            .collect();
        assert_eq!(channels.len(), 2, "the incoming and outgoing promise sit on different channels");
        let ledgers: BTreeSet<&LedgerId> = r
            .trace
            .iter()
            .filter_map(|e| match e {
                TraceEntry::Ledger { ledger, event, .. } if channels.contains(event.payload.channel_id()) => Some(ledger),
                _ => None,
            })
            .collect();
        assert_eq!(ledgers.len(), 2);
        assert_eq!(kinds(&r, "CLAIMED"), 0);
        assert_eq!(kinds(&r, "CLOSED"), 2);
    }
}

#[test]
fn single_payment_bench() {
    let r = throughput_bench(1, ChannelMode::Serialized);
    assert_passed(&r);
    assert_eq!(r.metrics.payments_paid, 1);
    // Two deploys, four deposits and two closes.
    assert_eq!(r.metrics.onchain_tx_count, 8);
}

#[test]
fn concurrent_bench_matches_serialized_in_fewer_rounds() {
    let s = throughput_bench(40, ChannelMode::Serialized);
    let c = throughput_bench(40, ChannelMode::Concurrent);
    assert_passed(&s);
    assert_passed(&c);
    assert_eq!((s.metrics.payments_paid, c.metrics.payments_paid), (40, 40));
    assert_eq!(s.final_balances, c.final_balances);
    assert!(c.metrics.rounds < s.metrics.rounds, "{} vs {}", c.metrics.rounds, s.metrics.rounds);
}

#[test]
fn reruns_are_byte_identical() {
    let s = corpus::adversary("alice", Behavior::WithholdReceipt, ChannelMode::Concurrent, 5);
    let runs: Vec<Vec<u8>> = (0..3).map(|_| run_scenario(&s).unwrap().deterministic_bytes()).collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
}

#[test]
fn trace_replays_into_the_same_metrics() {
    let r = run_scenario(&corpus::cross_ledger(ChannelMode::Serialized, 9)).unwrap();
    let parsed: Vec<TraceEntry> = r.trace_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, r.trace);
    let mut m = Metrics::from_trace(&parsed);
    m.elapsed_wall_ms = r.metrics.elapsed_wall_ms;
    assert_eq!(m, r.metrics);
}

#[test]
fn malformed_scripts_fail_before_running() {
    let mut s = corpus::happy_path(ChannelMode::Serialized, 1);
    s.script.push(at(9, pay("alice", "mallory", 1)));
    assert_eq!(run_scenario(&s).unwrap_err(), ScenarioError::UnknownActor("mallory".into()));

    let mut s = corpus::happy_path(ChannelMode::Serialized, 1);
    s.script.push(at(9, pay("alice", "bob", 0)));
    assert!(matches!(run_scenario(&s).unwrap_err(), ScenarioError::BadScript { index: 4, .. }));

    let mut s = corpus::happy_path(ChannelMode::Serialized, 1);
    s.wallets[1].ledger = "Z".into();
    assert_eq!(s.validate().unwrap_err(), ScenarioError::UnknownLedger("Z".into()));

    let mut s = corpus::happy_path(ChannelMode::Serialized, 1);
    s.expectations.push(NamedExpectation {
        name: "m".into(),
        check: Expectation::Metric { metric: "bogus".into(), value: 0 },
    });
    assert!(matches!(s.validate().unwrap_err(), ScenarioError::BadScript { .. }));

    assert!(matches!(Scenario::from_json("{\"seed\": 1}").unwrap_err(), ScenarioError::Parse(_)));
}

#[test]
fn scenarios_round_trip_through_json() {
    let mut s = corpus::adversary("hub", Behavior::Crash, ChannelMode::Concurrent, 4);
    s.expectations.push(NamedExpectation {
        name: "no disputes".into(),
        check: Expectation::EventAbsence { event: "DISPUTE_OPENED".into(), ledger: None },
    });
    let text = serde_json::to_string_pretty(&s).unwrap();
    assert_eq!(Scenario::from_json(&text).unwrap(), s);
}

#[test]
fn expectations_report_pass_and_fail() {
    let mut s = corpus::happy_path(ChannelMode::Serialized, 1);
    let exp = |name: &str, check| NamedExpectation { name: name.into(), check };
    s.expectations = vec![
        exp("bob paid", Expectation::ExactBalance { actor: "bob".into(), ledger: None, value: corpus::GENESIS }),
        exp("five tx", Expectation::Metric { metric: "onchain_tx_count".into(), value: 5 }),
        exp("no claims", Expectation::EventAbsence { event: "CLAIMED".into(), ledger: Some("A".into()) }),
        exp("deploys", Expectation::EventCount { event: "DEPLOYED".into(), ledger: None, count: 2 }),
        exp("one sent", Expectation::PaymentOutcomes { actor: "alice".into(), outcome: Outcome::Paid, count: 1 }),
        exp("too rich", Expectation::BalanceBound { actor: "alice".into(), ledger: None, min: Some(2_000), max: None }),
    ];
    let r = run_scenario(&s).unwrap();
    let failed: Vec<&str> = r.failures().iter().map(|a| a.name.as_str()).collect();
    assert_eq!(failed, ["too rich"]);
}

#[test]
fn withheld_receipt_costs_the_payer_one_claim() {
    let mut s = corpus::happy_path(ChannelMode::Serialized, 3);
    s.script.push(at(1, Action::Adversary { actor: "alice".into(), behavior: Behavior::WithholdReceipt, until: None }));
    let r = run_scenario(&s).unwrap();
    assert_passed(&r);
    let claims: Vec<&LedgerEvent> = r
        .trace
        .iter()
        .filter_map(|e| match e {
            TraceEntry::Ledger { event, .. } if event.payload.kind() == "CLAIMED" => Some(event),
            _ => None,
        })
        .collect();
    assert_eq!(claims.len(), 1);
    assert!(matches!(&claims[0].payload, EventPayload::Claimed { claimant: crate::protocol::Party::Hub, .. }));
    // bob was paid off-chain before alice withheld anything.
    assert_eq!(r.final_balances["bob"], corpus::GENESIS);
}

#[test]
fn hub_crash_between_promise_and_secret_recovers() {
    let base = corpus::happy_path(ChannelMode::Serialized, 2);
    let clean = run_scenario(&base).unwrap();
    let forwarded = clean
        .trace
        .iter()
        .find_map(|e| match e {
            TraceEntry::Msg { t, from, to, kind, .. } if from == corpus::HUB && to == "bob" && kind == "PROMISE" => Some(*t),
            _ => None,
        })
        .unwrap();
    let mut s = base.clone();
    s.script.push(at(forwarded + 1, Action::Crash { actor: corpus::HUB.into(), until: Some(forwarded + 8) }));
    let r = run_scenario(&s).unwrap();
    assert_passed(&r);
    let dropped_secret = r.trace.iter().any(|e| {
        matches!(e, TraceEntry::Msg { to, kind, dropped: true, .. } if to == corpus::HUB && kind == "SECRET")
    });
    assert!(dropped_secret, "the crash lands between the forwarded promise and the secret");
    assert_eq!(r.metrics.payments_paid, 1);
}

#[test]
fn adversary_corpus_keeps_honest_actors_whole() {
    for mode in [ChannelMode::Serialized, ChannelMode::Concurrent] {
        let failures: Vec<String> = corpus::adversary_corpus(mode)
            .iter()
            .map(|s| run_scenario(s).unwrap())
            .filter(|r| !r.passed())
            .map(|r| format!("{mode:?} {}: {:?}", r.scenario, r.failures()))
            .collect();
        assert!(failures.is_empty(), "{failures:#?}");
    }
}
