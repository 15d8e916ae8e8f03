use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use upc_cli::{emit, finish, init_logging, parse_mode};
use upc_core::client::{Direction, Outcome, PaymentRecord, Wallet, WalletConfig};
use upc_core::crypto::Keypair;
use upc_core::ledger::{ContractStatus, LedgerAccess};
use upc_core::net::{RemoteLedger, WalletDriver, WalletFile};
use upc_core::protocol::{Amount, ChannelMode};
use upc_core::wire::WireMessage;

/// A single-channel wallet talking to a hub daemon.
#[derive(Parser)]
#[command(name = "wallet", version)]
struct Cli {
    /// Wallet state file.
    #[arg(long, global = true, env = "UPC_WALLET", default_value = "wallet.json")]
    state: PathBuf,
    /// Seconds to wait for a registration, payment or close to finish.
    #[arg(long, global = true, default_value_t = 120)]
    timeout: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Opens a channel with the hub on one ledger.
    Register {
        #[arg(long)]
        hub: String,
        #[arg(long)]
        ledger: String,
        /// Client and ledger account id; defaults to the state file's stem.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "serialized", value_parser = parse_mode)]
        mode: ChannelMode,
    },
    /// Deposits into the channel contract.
    Deposit { amount: Amount },
    /// Pays `payee` once their invoice arrives; waits for the outcome.
    Pay { payee: String, amount: Amount },
    /// Invoices `payer` through the hub; waits for the outcome.
    Invoice {
        amount: Amount,
        #[arg(long)]
        payer: String,
    },
    /// Prints channel and on-chain balances.
    Balance,
    /// Closes the channel; waits until the contract settles.
    Close,
    /// Prints the payment log.
    Log {
        #[arg(long)]
        json: bool,
    },
    /// Runs the background handler, printing payment records as they finish.
    Run,
}

fn main() -> ExitCode {
    init_logging();
    finish(run(Cli::parse()))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let timeout = Duration::from_secs(cli.timeout);
    match cli.cmd {
        Cmd::Register { hub, ledger, id, mode } => register(&cli.state, hub, ledger, id, mode, timeout),
        Cmd::Deposit { amount } => {
            let mut file = load(&cli.state)?;
            let mut ledger = RemoteLedger::connect(&file.hub)?;
            let event = file.wallet.deposit(amount, &mut ledger)?;
            file.save(&cli.state)?;
            emit(&serde_json::json!({ "outcome": "OK", "event": event }));
            Ok(true)
        }
        Cmd::Pay { payee, amount } => {
            let mut d = connect(&cli.state)?;
            let base = d.wallet().payment_log.len();
            let now = d.now()?;
            d.wallet_mut().expect_invoice(payee.as_str().into(), amount, now);
            d.save()?;
            let done = |w: &Wallet| finished(w, base, Direction::Sent).is_some();
            d.run_until(timeout, done)?;
            Ok(report(finished(d.wallet(), base, Direction::Sent)))
        }
        Cmd::Invoice { amount, payer } => {
            let mut d = connect(&cli.state)?;
            let base = d.wallet().payment_log.len();
            let now = d.now()?;
            let relay = d.wallet_mut().invoice(amount, payer.as_str().into(), now, &mut rand::rngs::OsRng)?;
            let WireMessage::ProposalRelay { proposal, .. } = &relay else { unreachable!("invoices are relays") };
            eprintln!("invoice {} sent; waiting for payment", proposal.proposal_id);
            d.send(&relay)?;
            d.save()?;
            let done = |w: &Wallet| finished(w, base, Direction::Received).is_some();
            d.run_until(timeout, done)?;
            Ok(report(finished(d.wallet(), base, Direction::Received)))
        }
        Cmd::Balance => {
            let file = load(&cli.state)?;
            let w = &file.wallet;
            let mut ledger = RemoteLedger::connect(&file.hub)?;
            let onchain = ledger.balance(&w.ledger_id, &w.client_id.as_str().into())?;
            let ch = w.channel.as_ref();
            emit(&serde_json::json!({
                "outcome": "OK",
                "client_id": w.client_id,
                "status": w.status,
                "onchain": onchain,
                "deposit": ch.map(|c| c.my_deposit),
                "credit_sent": ch.map(|c| c.credit_sent),
                "credit_received": ch.map(|c| c.credit_received),
                "guaranteed": w.guaranteed_balance(),
                "settlement": w.settlement,
            }));
            Ok(true)
        }
        Cmd::Close => {
            let mut d = connect(&cli.state)?;
            let now = d.now()?;
            d.wallet_mut().close_channel(now);
            let closed = d.run_until(timeout, |w| w.status == Some(ContractStatus::Closed))?;
            let w = d.wallet();
            let (ledger_id, account) = (w.ledger_id.clone(), w.client_id.as_str().into());
            let onchain = d.ledger.balance(&ledger_id, &account)?;
            let w = d.wallet();
            emit(&serde_json::json!({
                "outcome": if closed { "CLOSED" } else { "PENDING" },
                "status": w.status,
                "settlement": w.settlement,
                "onchain": onchain,
            }));
            Ok(closed)
        }
        Cmd::Log { json } => {
            let file = load(&cli.state)?;
            if json {
                emit(&file.wallet.payment_log);
            } else {
                for r in &file.wallet.payment_log {
                    let detail = r.detail.as_deref().unwrap_or("");
                    println!("{:>6} {:?} {:?} {} {} {}", r.at, r.direction, r.outcome, r.amount, r.payment_id, detail);
                }
            }
            Ok(true)
        }
        Cmd::Run => {
            let mut d = connect(&cli.state)?;
            let mut seen = d.wallet().payment_log.len();
            loop {
                d.step(Duration::from_millis(200))?;
                for r in &d.wallet().payment_log[seen..] {
                    emit(r);
                }
                seen = d.wallet().payment_log.len();
            }
        }
    }
}

fn register(
    state: &Path,
    hub: String,
    ledger_id: String,
    id: Option<String>,
    mode: ChannelMode,
    timeout: Duration,
) -> anyhow::Result<bool> {
    let previous = state.exists().then(|| load(state)).transpose()?;
    if let Some(p) = &previous {
        if p.wallet.channel.is_some() && p.wallet.status != Some(ContractStatus::Closed) {
            bail!("{} already holds an open channel; close it first", state.display());
        }
    }
    let id = match id {
        Some(id) => id,
        None => state.file_stem().and_then(|s| s.to_str()).context("pass --id")?.to_owned(),
    };
    let ledger_id = ledger_id.as_str().into();
    let scheme = RemoteLedger::connect(&hub)?.config(&ledger_id)?.scheme;
    // A closed wallet re-registers under its old key.
    let keypair = match previous {
        Some(p) if p.wallet.keypair.public.scheme == scheme => p.wallet.keypair,
        _ => Keypair::generate(scheme, &mut rand::rngs::OsRng),
    };
    let wallet = Wallet::new(id.as_str().into(), keypair, ledger_id, mode, WalletConfig::default());
    let file = WalletFile { hub, wallet };
    file.save(state)?;
    let mut d = WalletDriver::connect(state, file)?;
    let msg = d.wallet().register_message();
    d.send(&msg)?;
    let open = d.run_until(timeout, |w| w.is_open())?;
    let w = d.wallet();
    emit(&serde_json::json!({
        "outcome": if open { "OPEN" } else { "FAILED" },
        "client_id": w.client_id,
        "ledger_id": w.ledger_id,
        "mode": w.mode,
        "channel_id": w.channel.as_ref().map(|c| &c.params.channel_id),
    }));
    Ok(open)
}

fn load(path: &Path) -> anyhow::Result<WalletFile> {
    WalletFile::load(path).with_context(|| format!("reading wallet state {}", path.display()))
}

fn connect(path: &Path) -> anyhow::Result<WalletDriver> {
    let file = load(path)?;
    if !file.wallet.is_open() {
        bail!("the channel is not open");
    }
    let hub = file.hub.clone();
    WalletDriver::connect(path, file).with_context(|| format!("connecting to hub at {hub}"))
}

/// The first payment in `direction` logged after index `base` with a final outcome.
fn finished(w: &Wallet, base: usize, direction: Direction) -> Option<PaymentRecord> {
    w.payment_log[base.min(w.payment_log.len())..]
        .iter()
        .find(|r| r.direction == direction && matches!(r.outcome, Outcome::Paid | Outcome::Received | Outcome::Failed))
        .cloned()
}

fn report(record: Option<PaymentRecord>) -> bool {
    match record {
        Some(r) => {
            let ok = r.outcome != Outcome::Failed;
            emit(&r);
            ok
        }
        None => {
            emit(&serde_json::json!({ "outcome": "PENDING", "detail": "timed out; `wallet run` keeps the payment going" }));
            false
        }
    }
}
