//! End-of-run assertions: the built-in safety invariants plus the
//! scenario's own expectations.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Metrics, ScenarioError, Sim, TraceEntry};
use crate::client::Outcome;
use crate::ledger::{compute_settlement, ContractStatus};
use crate::protocol::{AccountId, Amount, LedgerId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> AssertionResult {
    AssertionResult { name: name.into(), passed, detail: detail.into() }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedExpectation {
    pub name: String,
    #[serde(flatten)]
    pub check: Expectation,
}

/// Predicates a scenario can state about its own outcome. Balances are
/// account balances, on one ledger or summed over all of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expectation {
    ExactBalance {
        actor: String,
        #[serde(default)]
        ledger: Option<LedgerId>,
        value: Amount,
    },
    BalanceBound {
        actor: String,
        #[serde(default)]
        ledger: Option<LedgerId>,
        #[serde(default)]
        min: Option<Amount>,
        #[serde(default)]
        max: Option<Amount>,
    },
    EventCount {
        event: String,
        #[serde(default)]
        ledger: Option<LedgerId>,
        count: u64,
    },
    EventAbsence {
        event: String,
        #[serde(default)]
        ledger: Option<LedgerId>,
    },
    /// A metric other than wall time.
    Metric { metric: String, value: u64 },
    PaymentOutcomes { actor: String, outcome: Outcome, count: u64 },
}

const METRICS: [&str; 5] = ["payments_attempted", "payments_paid", "onchain_tx_count", "offchain_msg_count", "rounds"];

impl Expectation {
    pub(super) fn validate(
        &self,
        actor_ok: &dyn Fn(&String) -> Result<(), ScenarioError>,
        ledgers: &BTreeSet<&LedgerId>,
    ) -> Result<(), String> {
        let ledger_ok = |l: &Option<LedgerId>| match l {
            Some(l) if !ledgers.contains(l) => Err(format!("unknown ledger {l}")),
            _ => Ok(()),
        };
        let actor = |a: &String| actor_ok(a).map_err(|e| e.to_string());
        match self {
            Expectation::ExactBalance { actor: a, ledger, .. } | Expectation::BalanceBound { actor: a, ledger, .. } => {
                actor(a)?;
                ledger_ok(ledger)
            }
            Expectation::EventCount { ledger, .. } | Expectation::EventAbsence { ledger, .. } => ledger_ok(ledger),
            Expectation::Metric { metric, .. } if !METRICS.contains(&metric.as_str()) => Err(format!("unknown metric {metric}")),
            Expectation::Metric { .. } => Ok(()),
            Expectation::PaymentOutcomes { actor: a, .. } => actor(a),
        }
    }
}

impl Sim<'_> {
    fn balance(&self, actor: &str, ledger: Option<&LedgerId>) -> Amount {
        let account = AccountId::from(actor);
        self.ledgers.0.iter().filter(|(id, _)| ledger.is_none_or(|l| l == *id)).map(|(_, l)| l.balance(&account)).sum()
    }

    fn genesis(&self, actor: &str, ledger: &LedgerId) -> Amount {
        let account = AccountId::from(actor);
        self.s
            .ledgers
            .iter()
            .filter(|l| l.ledger_id == *ledger)
            .map(|l| l.genesis_balances.get(&account).copied().unwrap_or(0))
            .sum()
    }

    fn event_count(&self, event: &str, ledger: Option<&LedgerId>) -> u64 {
        self.trace
            .iter()
            .filter(|e| matches!(e, TraceEntry::Ledger { ledger: l, event: ev, .. }
                if ev.payload.kind() == event && ledger.is_none_or(|want| want == l)))
            .count() as u64
    }

    pub(super) fn assertions(&self) -> Vec<AssertionResult> {
        let mut out = Vec::new();
        self.conservation(&mut out);
        for name in self.wallets.keys() {
            if !self.dishonest.contains(name) {
                self.client_checks(name, &mut out);
            }
        }
        if !self.dishonest.contains(&self.hub_actor) {
            self.hub_safety(&mut out);
        }
        out.push(result("secret_hygiene", self.hygiene.is_empty(), self.hygiene.join("; ")));
        let metrics = Metrics::from_trace(&self.trace);
        for e in &self.s.expectations {
            out.push(self.expectation(&e.name, &e.check, &metrics));
        }
        out
    }

    fn conservation(&self, out: &mut Vec<AssertionResult>) {
        for (id, ledger) in &self.ledgers.0 {
            let genesis: Amount = ledger.config.genesis_balances.values().sum();
            let held = ledger.total_value();
            out.push(result(format!("conservation:{id}"), held == genesis, format!("genesis {genesis}, now {held}")));
        }
    }

    /// Solvency, the zero-trust bound and log completeness for one honest client.
    fn client_checks(&self, name: &str, out: &mut Vec<AssertionResult>) {
        let w = &self.wallets[name];
        let Some(ch) = w.channel.as_ref() else { return };
        let ledger = &w.ledger_id;
        let Some(contract) = self.ledgers.0.get(ledger).and_then(|l| l.contracts.get(ch.channel_id())) else { return };
        let deposit = contract.deposits.client;
        let received = ch.last_receipt_received.as_ref().map_or(0, |r| r.body.cumulative_credit);
        let sent = ch.credit_sent + ch.claimed_out.values().map(|p| p.body.amount).sum::<Amount>();
        let bound = (deposit + received).saturating_sub(sent);
        let settlement = match (contract.status, contract.settlement) {
            (ContractStatus::Closed, Some(s)) => {
                let expected = self.genesis(name, ledger) - deposit + s.client;
                let actual = self.balance(name, Some(ledger));
                out.push(result(
                    format!("client_solvency:{name}"),
                    actual == expected,
                    format!("balance {actual}, initial - deposit + settlement = {expected}"),
                ));
                s.client
            }
            _ => {
                compute_settlement(
                    ch.mode(),
                    contract.deposits,
                    ch.last_receipt_sent.as_ref(),
                    ch.last_receipt_received.as_ref(),
                    contract.claimed.values(),
                )
                .client
            }
        };
        out.push(result(
            format!("zero_trust:{name}"),
            settlement >= bound,
            format!("settlement {settlement}, deposit + received - revealed = {bound}"),
        ));
        if !self.is_down(name) {
            let open = w.invoices.len() + w.payments.len() + w.intents.len();
            out.push(result(format!("log_completeness:{name}"), open == 0, format!("{open} payments without an outcome")));
        }
    }

    fn hub_safety(&self, out: &mut Vec<AssertionResult>) {
        let Some(service) = self.hub.as_ref() else {
            out.push(result("hub_safety", true, "hub down at the end of the run"));
            return;
        };
        let hub = &service.hub;
        let mut holdings = self.balance(&self.hub_actor, None);
        for c in hub.channels.values() {
            let Some(contract) =
                self.ledgers.0.get(&c.state.params.ledger_id).and_then(|l| l.contracts.get(c.state.channel_id()))
            else {
                continue;
            };
            if contract.status != ContractStatus::Closed {
                holdings += compute_settlement(
                    c.state.mode(),
                    contract.deposits,
                    c.state.last_receipt_received.as_ref(),
                    c.state.last_receipt_sent.as_ref(),
                    contract.claimed.values(),
                )
                .hub;
            }
        }
        let floor = self.initial_hub + hub.fees_earned;
        out.push(result("hub_safety", holdings >= floor, format!("holdings {holdings}, initial + fees = {floor}")));
    }

    fn expectation(&self, name: &str, check: &Expectation, metrics: &Metrics) -> AssertionResult {
        match check {
            Expectation::ExactBalance { actor, ledger, value } => {
                let b = self.balance(actor, ledger.as_ref());
                result(name, b == *value, format!("balance {b}, expected {value}"))
            }
            Expectation::BalanceBound { actor, ledger, min, max } => {
                let b = self.balance(actor, ledger.as_ref());
                let ok = min.is_none_or(|m| b >= m) && max.is_none_or(|m| b <= m);
                result(name, ok, format!("balance {b}, bounds {min:?}..{max:?}"))
            }
            Expectation::EventCount { event, ledger, count } => {
                let n = self.event_count(event, ledger.as_ref());
                result(name, n == *count, format!("{n} {event} events, expected {count}"))
            }
            Expectation::EventAbsence { event, ledger } => {
                let n = self.event_count(event, ledger.as_ref());
                result(name, n == 0, format!("{n} {event} events"))
            }
            Expectation::Metric { metric, value } => {
                let got = match metric.as_str() {
                    "payments_attempted" => metrics.payments_attempted,
                    "payments_paid" => metrics.payments_paid,
                    "onchain_tx_count" => metrics.onchain_tx_count,
                    "offchain_msg_count" => metrics.offchain_msg_count,
                    _ => metrics.rounds,
                };
                result(name, got == *value, format!("{metric} = {got}, expected {value}"))
            }
            Expectation::PaymentOutcomes { actor, outcome, count } => {
                let n = self.wallets.get(actor).map_or(0, |w| w.payment_log.iter().filter(|r| r.outcome == *outcome).count()) as u64;
                result(name, n == *count, format!("{n} {outcome:?} records, expected {count}"))
            }
        }
    }
}
