use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::hub::{Hub, HubConfig, HubError, HubService, HubStore};
use crate::ledger::{LedgerAccess, LedgerConfig, Ledgers, SharedLedgers};
use crate::protocol::{ClientId, Tick};
use crate::wire::{read_frame, write_frame, WireError, WireMessage};

const LEDGERS_FILE: &str = "ledgers.json";

fn default_listen() -> String {
    "127.0.0.1:7400".into()
}

fn default_tick_ms() -> u64 {
    100
}

/// The daemon's JSON config: the hub's parameters, the ledgers it hosts and
/// where it keeps its state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaemonConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(flatten)]
    pub hub: HubConfig,
    pub ledgers: Vec<LedgerConfig>,
    /// Directory for hub snapshots, the hub journal and the ledger state.
    /// State lives in memory only when absent.
    #[serde(default)]
    pub snapshot_path: Option<PathBuf>,
    /// Wall-clock length of one ledger tick.
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
}

struct Core {
    service: HubService,
    sessions: BTreeMap<ClientId, (u64, mpsc::Sender<WireMessage>)>,
    /// Messages for clients that are not connected, delivered on HELLO.
    queued: BTreeMap<ClientId, Vec<WireMessage>>,
}

impl Core {
    fn route(&mut self, out: Vec<(ClientId, WireMessage)>) {
        for (to, msg) in out {
            let msg = match self.sessions.get(&to) {
                Some((_, tx)) => match tx.send(msg) {
                    Ok(()) => continue,
                    Err(mpsc::SendError(msg)) => msg,
                },
                None => msg,
            };
            self.queued.entry(to).or_default().push(msg);
        }
    }
}

struct Shared {
    core: Mutex<Core>,
    ledgers: SharedLedgers,
    stop: AtomicBool,
    next_session: AtomicU64,
    state_dir: Option<PathBuf>,
}

/// A running daemon. Dropping the handle leaves it running; call `stop`.
pub struct DaemonHandle {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl DaemonHandle {
    pub fn ledgers(&self) -> SharedLedgers {
        self.shared.ledgers.clone()
    }

    pub fn with_hub<T>(&self, f: impl FnOnce(&mut HubService) -> T) -> T {
        f(&mut self.shared.core.lock().service)
    }

    /// Blocks until the daemon stops.
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

pub struct HubDaemon;

impl HubDaemon {
    /// Binds the listener, restores state from `snapshot_path` when present,
    /// and starts the accept and tick threads.
    pub fn start(config: DaemonConfig) -> Result<DaemonHandle, HubError> {
        let io = |e: io::Error| HubError::RecoveryError(e.to_string());
        let (service, ledgers) = match &config.snapshot_path {
            Some(dir) => {
                let store = HubStore::open(dir)?;
                if store.has_snapshot() {
                    let service = HubService::recover(store)?;
                    let text = fs::read_to_string(dir.join(LEDGERS_FILE)).map_err(io)?;
                    let ledgers: Ledgers = serde_json::from_str(&text).map_err(|e| HubError::RecoveryError(e.to_string()))?;
                    (service, ledgers)
                } else {
                    let hub = Hub::new(config.hub.clone(), &mut rand::rngs::OsRng);
                    (HubService::new(hub, store)?, Ledgers::new(config.ledgers.clone()))
                }
            }
            None => {
                let hub = Hub::new(config.hub.clone(), &mut rand::rngs::OsRng);
                (HubService::new(hub, HubStore::memory())?, Ledgers::new(config.ledgers.clone()))
            }
        };
        let listener = TcpListener::bind(&config.listen).map_err(io)?;
        let addr = listener.local_addr().map_err(io)?;
        let shared = Arc::new(Shared {
            core: Mutex::new(Core { service, sessions: BTreeMap::new(), queued: BTreeMap::new() }),
            ledgers: SharedLedgers::new(ledgers),
            stop: AtomicBool::new(false),
            next_session: AtomicU64::new(1),
            state_dir: config.snapshot_path.clone(),
        });
        persist_ledgers(&shared);
        let accept = {
            let shared = shared.clone();
            thread::spawn(move || accept_loop(listener, shared))
        };
        let ticker = {
            let shared = shared.clone();
            let period = Duration::from_millis(config.tick_ms.max(1));
            thread::spawn(move || tick_loop(shared, period))
        };
        log::info!("hub listening on {addr}");
        Ok(DaemonHandle { addr, shared, threads: vec![accept, ticker] })
    }
}

fn persist_ledgers(shared: &Shared) {
    let Some(dir) = &shared.state_dir else { return };
    let json = shared.ledgers.with(|l| serde_json::to_vec(l).expect("ledgers serialize"));
    let tmp = dir.join(format!("{LEDGERS_FILE}.tmp"));
    if let Err(e) = fs::write(&tmp, json).and_then(|_| fs::rename(&tmp, dir.join(LEDGERS_FILE))) {
        log::error!("writing ledger state: {e}");
    }
}

fn now(ledgers: &SharedLedgers) -> Tick {
    ledgers.with(|l| l.0.values().next().map_or(0, |l| l.now))
}

fn tick_loop(shared: Arc<Shared>, period: Duration) {
    while !shared.stop.load(Ordering::SeqCst) {
        thread::sleep(period);
        if let Err(e) = shared.ledgers.with(|l| l.advance_time(1)) {
            log::error!("advancing ledgers: {e}");
        }
        let now = now(&shared.ledgers);
        {
            let mut core = shared.core.lock();
            let mut ledgers = shared.ledgers.clone();
            match core.service.tick(now, &mut ledgers) {
                Ok(out) => {
                    for a in &out.actions {
                        log::info!("hub action at {now}: {}", serde_json::to_string(a).unwrap_or_default());
                    }
                    core.route(out.messages);
                }
                Err(e) => log::error!("hub tick: {e}"),
            }
        }
        persist_ledgers(&shared);
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let shared = shared.clone();
                thread::spawn(move || {
                    if let Err(e) = serve(stream, shared) {
                        log::debug!("connection closed: {e}");
                    }
                });
            }
            Err(e) => log::warn!("accept: {e}"),
        }
    }
}

/// The first frame picks the session kind: HELLO for a client, LEDGER for
/// ledger access, ADMIN for operator commands.
fn serve(mut stream: TcpStream, shared: Arc<Shared>) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    let mut msg = read_frame(&mut stream)?;
    loop {
        let reply = match msg {
            WireMessage::Hello { client_id } => return client_session(stream, shared, client_id),
            WireMessage::Ledger { ledger_id, request } => {
                let mut ledgers = shared.ledgers.clone();
                WireMessage::LedgerReply { result: ledgers.request(&ledger_id, request) }
            }
            WireMessage::Admin { command } => {
                let result = shared.core.lock().service.admin(&command);
                if matches!(command, crate::wire::AdminCommand::Snapshot) {
                    persist_ledgers(&shared);
                }
                match result {
                    Ok((ok, body)) => WireMessage::AdminReply { ok, body },
                    Err(e) => WireMessage::AdminReply { ok: false, body: serde_json::json!({"error": e.to_string()}) },
                }
            }
            other => WireMessage::error("BadRequest", format!("{} before HELLO", other.kind()), None),
        };
        write_frame(&mut stream, &reply)?;
        msg = read_frame(&mut stream)?;
    }
}

fn client_session(stream: TcpStream, shared: Arc<Shared>, client_id: ClientId) -> Result<(), WireError> {
    let session = shared.next_session.fetch_add(1, Ordering::SeqCst);
    let (tx, rx) = mpsc::channel::<WireMessage>();
    let mut writer = stream.try_clone()?;
    let writer_thread = thread::spawn(move || {
        for msg in rx {
            if write_frame(&mut writer, &msg).is_err() {
                break;
            }
        }
    });
    {
        let mut core = shared.core.lock();
        for msg in core.queued.remove(&client_id).unwrap_or_default() {
            let _ = tx.send(msg);
        }
        core.sessions.insert(client_id.clone(), (session, tx));
    }
    let mut reader = stream;
    let result = loop {
        let msg = match read_frame(&mut reader) {
            Ok(m) => m,
            Err(e) => break Err(e),
        };
        let now = now(&shared.ledgers);
        let mut core = shared.core.lock();
        let mut ledgers = shared.ledgers.clone();
        match core.service.on_message(&client_id, msg, now, &mut ledgers) {
            Ok(out) => core.route(out),
            Err(e) => log::error!("hub persistence: {e}"),
        }
    };
    {
        let mut core = shared.core.lock();
        if core.sessions.get(&client_id).is_some_and(|(s, _)| *s == session) {
            core.sessions.remove(&client_id);
        }
    }
    let _ = reader.shutdown(std::net::Shutdown::Both);
    let _ = writer_thread.join();
    match result {
        Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(()),
        other => other,
    }
}
