//! Messages between wallets and the hub, and their stream framing.
//!
//! A frame is a 4-byte big-endian payload length followed by the payload: a
//! 4-byte kind tag and the key-sorted JSON body of the message.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{encode_tagged, split_tag, Digest, PublicKey, Signature};
use crate::ledger::{LedgerError, LedgerRequest, LedgerResponse};
use crate::protocol::{Amount, ChannelId, ChannelMode, ChannelParams, ClientId, CloseRecord, LedgerId, PaymentProposal, Promise, Receipt, SecretMessage};

pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("unknown message tag {0:?}")]
    UnknownTag(String),
    #[error("tag {tag:?} does not match body kind {kind}")]
    TagMismatch { tag: String, kind: String },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum AdminCommand {
    Snapshot,
    ChannelsList,
    Close { channel_id: ChannelId },
    Status,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WireMessage {
    /// Identifies the client on a fresh connection.
    Hello { client_id: ClientId },
    Register { client_id: ClientId, client_pk: PublicKey, ledger_id: LedgerId, mode: ChannelMode },
    Registered { params: ChannelParams, fee_bps: u64, hub_deposit: Amount },
    /// An invoice on its way from the payee, through the hub, to `payer`.
    ProposalRelay { proposal: PaymentProposal, payer: ClientId },
    /// `payee` is set on the sender's leg and absent on the hub's leg.
    Promise { promise: Promise, payee: Option<ClientId> },
    Secret { secret: SecretMessage },
    Receipt { receipt: Receipt },
    CloseRequest { record: CloseRecord, client_sig: Signature },
    CloseAccept { record: CloseRecord, hub_sig: Signature },
    Error { code: String, detail: String, hashlock: Option<Digest> },
    Ledger { ledger_id: LedgerId, request: LedgerRequest },
    LedgerReply { result: Result<LedgerResponse, LedgerError> },
    Admin { command: AdminCommand },
    AdminReply { ok: bool, body: serde_json::Value },
}

const TAGS: [(&str, &[u8; 4]); 14] = [
    ("HELLO", b"HELO"),
    ("REGISTER", b"REGI"),
    ("REGISTERED", b"RGOK"),
    ("PROPOSAL_RELAY", b"RLAY"),
    ("PROMISE", b"PROM"),
    ("SECRET", b"SECR"),
    ("RECEIPT", b"RCPT"),
    ("CLOSE_REQUEST", b"CLRQ"),
    ("CLOSE_ACCEPT", b"CLOK"),
    ("ERROR", b"ERRR"),
    ("LEDGER", b"LDGR"),
    ("LEDGER_REPLY", b"LDRP"),
    ("ADMIN", b"ADMN"),
    ("ADMIN_REPLY", b"ADRP"),
];

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "HELLO",
            WireMessage::Register { .. } => "REGISTER",
            WireMessage::Registered { .. } => "REGISTERED",
            WireMessage::ProposalRelay { .. } => "PROPOSAL_RELAY",
            WireMessage::Promise { .. } => "PROMISE",
            WireMessage::Secret { .. } => "SECRET",
            WireMessage::Receipt { .. } => "RECEIPT",
            WireMessage::CloseRequest { .. } => "CLOSE_REQUEST",
            WireMessage::CloseAccept { .. } => "CLOSE_ACCEPT",
            WireMessage::Error { .. } => "ERROR",
            WireMessage::Ledger { .. } => "LEDGER",
            WireMessage::LedgerReply { .. } => "LEDGER_REPLY",
            WireMessage::Admin { .. } => "ADMIN",
            WireMessage::AdminReply { .. } => "ADMIN_REPLY",
        }
    }

    pub fn tag(&self) -> &'static [u8; 4] {
        let kind = self.kind();
        TAGS.iter().find(|(k, _)| *k == kind).map(|(_, t)| *t).expect("every kind has a tag")
    }

    pub fn error(code: impl Into<String>, detail: impl Into<String>, hashlock: Option<Digest>) -> Self {
        WireMessage::Error { code: code.into(), detail: detail.into(), hashlock }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_tagged(self.tag(), self).expect("wire messages encode")
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let (tag, body) = split_tag(payload).map_err(|e| WireError::Malformed(e.to_string()))?;
        if !TAGS.iter().any(|(_, t)| **t == tag) {
            return Err(WireError::UnknownTag(String::from_utf8_lossy(&tag).into_owned()));
        }
        let msg: WireMessage = serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))?;
        if *msg.tag() != tag {
            return Err(WireError::TagMismatch { tag: String::from_utf8_lossy(&tag).into_owned(), kind: msg.kind().into() });
        }
        Ok(msg)
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> Result<(), WireError> {
    let payload = msg.encode();
    if payload.len() > MAX_FRAME {
        return Err(WireError::TooLarge(payload.len()));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<WireMessage, WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    WireMessage::decode(&payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sample() -> WireMessage {
        WireMessage::error("ChannelBusy", "try again", Some(Digest([7; 32])))
    }

    #[test]
    fn frames_carry_length_tag_and_sorted_body() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &sample()).unwrap();
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(len, buf.len() - 4);
        assert_eq!(&buf[4..8], b"ERRR");
        let body = std::str::from_utf8(&buf[8..]).unwrap();
        assert!(body.starts_with(r#"{"code":"ChannelBusy","detail":"try again","hashlock":"0707"#), "{body}");
        assert_eq!(read_frame(&mut Cursor::new(buf)).unwrap(), sample());
    }

    #[test]
    fn oversized_and_mislabelled_frames_are_rejected() {
        let mut huge = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
        huge.extend_from_slice(b"ERRR");
        assert!(matches!(read_frame(&mut Cursor::new(huge)), Err(WireError::TooLarge(_))));

        let mut payload = sample().encode();
        payload[..4].copy_from_slice(b"RCPT");
        assert!(matches!(WireMessage::decode(&payload), Err(WireError::TagMismatch { .. })));
        payload[..4].copy_from_slice(b"ZZZZ");
        assert!(matches!(WireMessage::decode(&payload), Err(WireError::UnknownTag(_))));
    }

    #[test]
    fn truncated_stream_is_an_io_error() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &sample()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_frame(&mut Cursor::new(buf)), Err(WireError::Io(_))));
    }
}
