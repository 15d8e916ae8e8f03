use std::net::{TcpStream, ToSocketAddrs};

use crate::ledger::{LedgerAccess, LedgerError, LedgerRequest, LedgerResponse};
use crate::protocol::LedgerId;
use crate::wire::{read_frame, write_frame, AdminCommand, WireError, WireMessage};

/// Ledgers co-hosted by a hub daemon, reached over their own connection.
#[derive(Debug)]
pub struct RemoteLedger {
    stream: TcpStream,
}

impl RemoteLedger {
    pub fn connect(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(RemoteLedger { stream })
    }
}

fn remote(e: WireError) -> LedgerError {
    LedgerError::Remote(e.to_string())
}

impl LedgerAccess for RemoteLedger {
    fn request(&mut self, ledger: &LedgerId, request: LedgerRequest) -> Result<LedgerResponse, LedgerError> {
        write_frame(&mut self.stream, &WireMessage::Ledger { ledger_id: ledger.clone(), request }).map_err(remote)?;
        match read_frame(&mut self.stream).map_err(remote)? {
            WireMessage::LedgerReply { result } => result,
            WireMessage::Error { code, detail, .. } => Err(LedgerError::Remote(format!("{code}: {detail}"))),
            other => Err(LedgerError::Remote(format!("unexpected {} frame", other.kind()))),
        }
    }
}

/// Sends one operator command to a hub daemon and returns its reply.
pub fn admin_request(addr: impl ToSocketAddrs, command: AdminCommand) -> Result<(bool, serde_json::Value), WireError> {
    let mut stream = TcpStream::connect(addr)?;
    write_frame(&mut stream, &WireMessage::Admin { command })?;
    match read_frame(&mut stream)? {
        WireMessage::AdminReply { ok, body } => Ok((ok, body)),
        WireMessage::Error { code, detail, .. } => Ok((false, serde_json::json!({"code": code, "detail": detail}))),
        other => Err(WireError::Malformed(format!("unexpected {} frame", other.kind()))),
    }
}
