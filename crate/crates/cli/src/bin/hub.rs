use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use upc_cli::{emit, finish, init_logging};
use upc_core::net::{admin_request, DaemonConfig, HubDaemon};
use upc_core::wire::AdminCommand;

/// Runs and administers a hub daemon.
#[derive(Parser)]
#[command(name = "hub", version)]
struct Cli {
    /// Address of a running daemon, for the admin commands.
    #[arg(long, global = true, default_value = "127.0.0.1:7400")]
    addr: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Starts the daemon and its co-hosted ledgers; runs until killed.
    Start {
        #[arg(long)]
        config: PathBuf,
    },
    /// Writes a snapshot of hub and ledger state.
    Snapshot,
    /// Channel queries.
    Channels {
        #[command(subcommand)]
        cmd: ChannelsCmd,
    },
    /// Starts a cooperative close of one channel.
    Close { channel_id: String },
    /// Prints the hub's summary counters.
    Status,
}

#[derive(Subcommand)]
enum ChannelsCmd {
    List,
}

fn main() -> ExitCode {
    init_logging();
    finish(run(Cli::parse()))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let command = match cli.cmd {
        Cmd::Start { config } => return start(&config),
        Cmd::Snapshot => AdminCommand::Snapshot,
        Cmd::Channels { cmd: ChannelsCmd::List } => AdminCommand::ChannelsList,
        Cmd::Close { channel_id } => AdminCommand::Close { channel_id: channel_id.as_str().into() },
        Cmd::Status => AdminCommand::Status,
    };
    let (ok, body) = admin_request(&cli.addr, command).with_context(|| format!("contacting hub at {}", cli.addr))?;
    emit(&serde_json::json!({ "outcome": if ok { "OK" } else { "FAILED" }, "result": body }));
    Ok(ok)
}

fn start(path: &PathBuf) -> anyhow::Result<bool> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: DaemonConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(dir) = &config.snapshot_path {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let daemon = HubDaemon::start(config)?;
    emit(&serde_json::json!({ "outcome": "LISTENING", "addr": daemon.addr.to_string() }));
    daemon.join();
    Ok(true)
}
