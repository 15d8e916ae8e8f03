use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{ContractView, Ledger, LedgerConfig, LedgerError, LedgerEvent, LedgerOp};
use crate::protocol::{AccountId, Amount, ChannelId, LedgerId, Tick};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "q", rename_all = "snake_case")]
pub enum LedgerRequest {
    Submit { op: LedgerOp },
    Now,
    ReadState { channel_id: ChannelId },
    EventsSince { seq: u64 },
    Balance { account: AccountId },
    Config,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "r", content = "v", rename_all = "snake_case")]
pub enum LedgerResponse {
    Event(LedgerEvent),
    Now(Tick),
    State(Box<ContractView>),
    Events(Vec<LedgerEvent>),
    Balance(Amount),
    Config(LedgerConfig),
}

fn unexpected(r: LedgerResponse) -> LedgerError {
    LedgerError::Remote(format!("unexpected ledger response {r:?}"))
}

/// How parties reach the ledgers: directly in-process, or over the wire.
pub trait LedgerAccess {
    fn request(&mut self, ledger: &LedgerId, req: LedgerRequest) -> Result<LedgerResponse, LedgerError>;

    fn submit(&mut self, ledger: &LedgerId, op: LedgerOp) -> Result<LedgerEvent, LedgerError> {
        match self.request(ledger, LedgerRequest::Submit { op })? {
            LedgerResponse::Event(e) => Ok(e),
            other => Err(unexpected(other)),
        }
    }

    fn now(&mut self, ledger: &LedgerId) -> Result<Tick, LedgerError> {
        match self.request(ledger, LedgerRequest::Now)? {
            LedgerResponse::Now(t) => Ok(t),
            other => Err(unexpected(other)),
        }
    }

    fn read_state(&mut self, ledger: &LedgerId, channel_id: &ChannelId) -> Result<ContractView, LedgerError> {
        match self.request(ledger, LedgerRequest::ReadState { channel_id: channel_id.clone() })? {
            LedgerResponse::State(v) => Ok(*v),
            other => Err(unexpected(other)),
        }
    }

    fn events_since(&mut self, ledger: &LedgerId, seq: u64) -> Result<Vec<LedgerEvent>, LedgerError> {
        match self.request(ledger, LedgerRequest::EventsSince { seq })? {
            LedgerResponse::Events(e) => Ok(e),
            other => Err(unexpected(other)),
        }
    }

    fn balance(&mut self, ledger: &LedgerId, account: &AccountId) -> Result<Amount, LedgerError> {
        match self.request(ledger, LedgerRequest::Balance { account: account.clone() })? {
            LedgerResponse::Balance(b) => Ok(b),
            other => Err(unexpected(other)),
        }
    }

    fn config(&mut self, ledger: &LedgerId) -> Result<LedgerConfig, LedgerError> {
        match self.request(ledger, LedgerRequest::Config)? {
            LedgerResponse::Config(c) => Ok(c),
            other => Err(unexpected(other)),
        }
    }
}

impl Ledger {
    pub fn handle(&mut self, req: LedgerRequest) -> Result<LedgerResponse, LedgerError> {
        Ok(match req {
            LedgerRequest::Submit { op } => LedgerResponse::Event(self.apply(op)?),
            LedgerRequest::Now => LedgerResponse::Now(self.now),
            LedgerRequest::ReadState { channel_id } => LedgerResponse::State(Box::new(self.read_state(&channel_id)?)),
            LedgerRequest::EventsSince { seq } => LedgerResponse::Events(self.events_since(seq).to_vec()),
            LedgerRequest::Balance { account } => LedgerResponse::Balance(self.balance(&account)),
            LedgerRequest::Config => LedgerResponse::Config(self.config.clone()),
        })
    }
}

/// Every ledger in a deployment, by id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledgers(pub BTreeMap<LedgerId, Ledger>);

impl Ledgers {
    pub fn new(configs: impl IntoIterator<Item = LedgerConfig>) -> Self {
        Ledgers(configs.into_iter().map(|c| (c.ledger_id.clone(), Ledger::new(c))).collect())
    }

    pub fn get(&self, id: &LedgerId) -> Result<&Ledger, LedgerError> {
        self.0.get(id).ok_or_else(|| LedgerError::NotFound(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &LedgerId) -> Result<&mut Ledger, LedgerError> {
        self.0.get_mut(id).ok_or_else(|| LedgerError::NotFound(id.to_string()))
    }

    /// Advances every ledger's clock in lockstep.
    pub fn advance_time(&mut self, ticks: Tick) -> Result<Vec<(LedgerId, ChannelId)>, LedgerError> {
        let mut ready = Vec::new();
        for (id, ledger) in &mut self.0 {
            ready.extend(ledger.advance_time(ticks)?.into_iter().map(|c| (id.clone(), c)));
        }
        Ok(ready)
    }
}

impl LedgerAccess for Ledgers {
    fn request(&mut self, ledger: &LedgerId, req: LedgerRequest) -> Result<LedgerResponse, LedgerError> {
        self.get_mut(ledger)?.handle(req)
    }
}

/// Ledgers shared between threads; every request runs under one lock, so
/// operations are linearizable.
#[derive(Clone, Debug, Default)]
pub struct SharedLedgers(pub Arc<Mutex<Ledgers>>);

impl SharedLedgers {
    pub fn new(ledgers: Ledgers) -> Self {
        SharedLedgers(Arc::new(Mutex::new(ledgers)))
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut Ledgers) -> T) -> T {
        f(&mut self.0.lock())
    }
}

impl LedgerAccess for SharedLedgers {
    fn request(&mut self, ledger: &LedgerId, req: LedgerRequest) -> Result<LedgerResponse, LedgerError> {
        self.0.lock().request(ledger, req)
    }
}
