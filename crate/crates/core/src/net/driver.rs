use std::fs;
use std::io;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::RemoteLedger;
use crate::client::Wallet;
use crate::ledger::{LedgerAccess, LedgerError};
use crate::protocol::Tick;
use crate::wire::{read_frame, write_frame, WireError, WireMessage};

/// A wallet's state file: the wallet and the hub it talks to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalletFile {
    pub hub: String,
    pub wallet: Wallet,
}

impl WalletFile {
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// Writes through a temporary file so a crash never leaves a torn state file.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self).expect("wallets serialize"))?;
        fs::rename(&tmp, path)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("the hub closed the connection")]
    Disconnected,
}

/// Runs one wallet against a hub daemon: delivers hub messages, drives the
/// background handler once per ledger tick and saves state after every step.
pub struct WalletDriver {
    pub file: WalletFile,
    path: PathBuf,
    writer: TcpStream,
    inbox: mpsc::Receiver<WireMessage>,
    pub ledger: RemoteLedger,
    last_tick: Option<Tick>,
}

impl WalletDriver {
    pub fn connect(path: impl Into<PathBuf>, file: WalletFile) -> Result<Self, DriverError> {
        let mut writer = TcpStream::connect(&file.hub)?;
        writer.set_nodelay(true)?;
        write_frame(&mut writer, &WireMessage::Hello { client_id: file.wallet.client_id.clone() })?;
        let mut reader = writer.try_clone()?;
        let (tx, inbox) = mpsc::channel();
        thread::spawn(move || {
            while let Ok(msg) = read_frame(&mut reader) {
                if tx.send(msg).is_err() {
                    break;
                }
            }
        });
        let ledger = RemoteLedger::connect(&file.hub)?;
        Ok(WalletDriver { file, path: path.into(), writer, inbox, ledger, last_tick: None })
    }

    pub fn wallet(&self) -> &Wallet {
        &self.file.wallet
    }

    pub fn wallet_mut(&mut self) -> &mut Wallet {
        &mut self.file.wallet
    }

    pub fn now(&mut self) -> Result<Tick, DriverError> {
        let id = self.file.wallet.ledger_id.clone();
        Ok(self.ledger.now(&id)?)
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), DriverError> {
        write_frame(&mut self.writer, msg)?;
        Ok(())
    }

    pub fn save(&self) -> Result<(), DriverError> {
        Ok(self.file.save(&self.path)?)
    }

    /// Waits up to `wait` for hub traffic, handles it, then runs the
    /// background handler if the ledger clock moved.
    pub fn step(&mut self, wait: Duration) -> Result<(), DriverError> {
        let first = match self.inbox.recv_timeout(wait) {
            Ok(m) => Some(m),
            Err(mpsc::RecvTimeoutError::Timeout) => None,
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(DriverError::Disconnected),
        };
        let mut msgs: Vec<WireMessage> = first.into_iter().collect();
        msgs.extend(self.inbox.try_iter());
        let now = self.now()?;
        for msg in msgs {
            let replies = self.file.wallet.handle(msg, now, &mut self.ledger);
            for r in &replies {
                self.send(r)?;
            }
        }
        if self.last_tick != Some(now) {
            self.last_tick = Some(now);
            let out = self.file.wallet.client_tick(now, &mut self.ledger);
            for a in &out.actions {
                log::info!("{} at {now}: {}", self.file.wallet.client_id, serde_json::to_string(a).unwrap_or_default());
            }
            for m in &out.messages {
                self.send(m)?;
            }
        }
        self.save()
    }

    /// Steps until `done` holds or `timeout` passes; returns whether `done` held.
    pub fn run_until(&mut self, timeout: Duration, mut done: impl FnMut(&Wallet) -> bool) -> Result<bool, DriverError> {
        let deadline = Instant::now() + timeout;
        loop {
            if done(&self.file.wallet) {
                return Ok(true);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(false);
            }
            self.step(left.min(Duration::from_millis(20)))?;
        }
    }
}

impl Drop for WalletDriver {
    /// The reader thread holds a clone of the socket, so close it explicitly.
    fn drop(&mut self) {
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}
