//! TCP transport: the hub daemon with the ledgers it co-hosts, remote ledger
//! access, and the driver that runs a wallet against a daemon.

mod daemon;
mod driver;
mod remote;

pub use daemon::{DaemonConfig, DaemonHandle, HubDaemon};
pub use driver::{DriverError, WalletDriver, WalletFile};
pub use remote::{admin_request, RemoteLedger};
