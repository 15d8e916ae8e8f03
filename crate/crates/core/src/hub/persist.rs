//! Snapshot plus append-only journal. Off-chain messages and expiry sweeps
//! are journaled; anything that touched a ledger is followed by a snapshot,
//! which also truncates the journal.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{Hub, HubError, Outgoing, TickOutcome};
use crate::ledger::LedgerAccess;
use crate::protocol::{ClientId, Tick};
use crate::wire::{AdminCommand, WireMessage};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum JournalEntry {
    Message { now: Tick, from: ClientId, msg: WireMessage },
    Tick { now: Tick },
}

const SNAPSHOT_FILE: &str = "hub.snapshot.json";
const JOURNAL_FILE: &str = "hub.journal.jsonl";

/// Where snapshots and the journal live: memory for simulations, a directory otherwise.
#[derive(Debug)]
pub struct HubStore {
    dir: Option<PathBuf>,
    snapshot: Vec<u8>,
    journal: Vec<JournalEntry>,
    journal_file: Option<File>,
}

impl HubStore {
    pub fn memory() -> Self {
        HubStore { dir: None, snapshot: Vec::new(), journal: Vec::new(), journal_file: None }
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, HubError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err)?;
        Ok(HubStore { dir: Some(dir), snapshot: Vec::new(), journal: Vec::new(), journal_file: None })
    }

    pub fn has_snapshot(&self) -> bool {
        match &self.dir {
            Some(dir) => dir.join(SNAPSHOT_FILE).exists(),
            None => !self.snapshot.is_empty(),
        }
    }

    pub fn journal_len(&self) -> usize {
        self.journal.len()
    }

    pub fn write_snapshot(&mut self, bytes: Vec<u8>) -> Result<(), HubError> {
        if let Some(dir) = &self.dir {
            let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
            fs::write(&tmp, &bytes).map_err(io_err)?;
            fs::rename(&tmp, dir.join(SNAPSHOT_FILE)).map_err(io_err)?;
            let file = File::create(dir.join(JOURNAL_FILE)).map_err(io_err)?;
            self.journal_file = Some(file);
        }
        self.snapshot = bytes;
        self.journal.clear();
        Ok(())
    }

    pub fn append(&mut self, entry: JournalEntry) -> Result<(), HubError> {
        if let Some(dir) = &self.dir {
            if self.journal_file.is_none() {
                let file = OpenOptions::new().create(true).append(true).open(dir.join(JOURNAL_FILE)).map_err(io_err)?;
                self.journal_file = Some(file);
            }
            let file = self.journal_file.as_mut().expect("opened above");
            let mut line = serde_json::to_vec(&entry).expect("journal entries serialize");
            line.push(b'\n');
            file.write_all(&line).map_err(io_err)?;
            file.flush().map_err(io_err)?;
        }
        self.journal.push(entry);
        Ok(())
    }

    /// The latest snapshot and every journal entry written after it. A torn
    /// final journal line is dropped; any other damage is an error.
    pub fn load(&self) -> Result<(Vec<u8>, Vec<JournalEntry>), HubError> {
        let Some(dir) = &self.dir else {
            if self.snapshot.is_empty() {
                return Err(HubError::RecoveryError("no snapshot".into()));
            }
            return Ok((self.snapshot.clone(), self.journal.clone()));
        };
        let snapshot = fs::read(dir.join(SNAPSHOT_FILE)).map_err(io_err)?;
        let mut journal = Vec::new();
        if let Ok(file) = File::open(dir.join(JOURNAL_FILE)) {
            let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err)?;
            let n = lines.len();
            for (i, line) in lines.iter().enumerate() {
                match serde_json::from_str(line) {
                    Ok(e) => journal.push(e),
                    Err(_) if i + 1 == n => break,
                    Err(e) => return Err(HubError::RecoveryError(format!("journal line {}: {e}", i + 1))),
                }
            }
        }
        Ok((snapshot, journal))
    }
}

fn io_err(e: std::io::Error) -> HubError {
    HubError::RecoveryError(e.to_string())
}

/// A hub bound to its store. Every state change is durable before the
/// caller sees its outputs.
#[derive(Debug)]
pub struct HubService {
    pub hub: Hub,
    pub store: HubStore,
}

impl HubService {
    pub fn new(hub: Hub, mut store: HubStore) -> Result<Self, HubError> {
        store.write_snapshot(hub.persist_state())?;
        Ok(HubService { hub, store })
    }

    /// Rebuilds the hub from the store without ledger access.
    pub fn recover(store: HubStore) -> Result<Self, HubError> {
        let (snapshot, journal) = store.load()?;
        let mut hub = Hub::recover_state(&snapshot)?;
        for entry in journal {
            match entry {
                JournalEntry::Message { now, from, msg } => {
                    hub.handle_offchain(&from, msg, now);
                }
                JournalEntry::Tick { now } => {
                    hub.expire(now);
                }
            }
        }
        let mut service = HubService { hub, store };
        service.snapshot()?;
        Ok(service)
    }

    pub fn snapshot(&mut self) -> Result<(), HubError> {
        self.store.write_snapshot(self.hub.persist_state())
    }

    fn compact(&mut self) -> Result<(), HubError> {
        if self.store.journal_len() >= self.hub.config.compact_after.max(1) {
            self.snapshot()?;
        }
        Ok(())
    }

    pub fn on_message(
        &mut self,
        from: &ClientId,
        msg: WireMessage,
        now: Tick,
        ledger: &mut dyn LedgerAccess,
    ) -> Result<Vec<Outgoing>, HubError> {
        if Hub::is_offchain(&msg) {
            self.store.append(JournalEntry::Message { now, from: from.clone(), msg: msg.clone() })?;
            let out = self.hub.handle_offchain(from, msg, now);
            self.compact()?;
            return Ok(out);
        }
        let (out, touched) = self.hub.handle_message(from, msg, now, ledger);
        if touched {
            self.snapshot()?;
        }
        Ok(out)
    }

    pub fn tick(&mut self, now: Tick, ledger: &mut dyn LedgerAccess) -> Result<TickOutcome, HubError> {
        let mut out = TickOutcome::default();
        self.hub.observe_ledgers(ledger, &mut out);
        out.expired = self.hub.expire(now);
        self.hub.settle_onchain(now, ledger, &mut out);
        if out.onchain_changed {
            self.snapshot()?;
        } else if out.expired {
            self.store.append(JournalEntry::Tick { now })?;
            self.compact()?;
        }
        Ok(out)
    }

    pub fn admin(&mut self, command: &AdminCommand) -> Result<(bool, serde_json::Value), HubError> {
        let reply = self.hub.admin(command);
        if matches!(command, AdminCommand::Snapshot | AdminCommand::Close { .. }) {
            self.snapshot()?;
        }
        Ok(reply)
    }
}
