use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{sign, verify, Canonical, CryptoError, Digest, PrivateKey, PublicKey, SecretPreimage, Signature, SignatureSchemeId};

/// Logical ledger time.
pub type Tick = u64;
/// Atomic currency units.
pub type Amount = u64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

string_id!(
    /// Identifies one deployed channel contract.
    ChannelId
);
string_id!(ClientId);
string_id!(LedgerId);
string_id!(
    /// A ledger account name. Clients use their client id; the hub uses its hub id.
    AccountId
);

/// The two ends of a channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Client,
    Hub,
}

impl Party {
    pub fn other(self) -> Party {
        match self {
            Party::Client => Party::Hub,
            Party::Hub => Party::Client,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Client => "client",
            Party::Hub => "hub",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelMode {
    /// One unresolved promise per direction; receipt `n` resolves promise `n`.
    Serialized,
    /// Many promises in flight; receipts commit to the pending set by Merkle root.
    Concurrent,
}

impl std::str::FromStr for ChannelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "serialized" => Ok(ChannelMode::Serialized),
            "concurrent" => Ok(ChannelMode::Concurrent),
            other => Err(format!("unknown channel mode {other:?}")),
        }
    }
}

/// Parameters fixed when the hub deploys a channel contract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub channel_id: ChannelId,
    pub ledger_id: LedgerId,
    pub client_id: ClientId,
    pub hub_id: AccountId,
    pub client_pk: PublicKey,
    pub hub_pk: PublicKey,
    pub scheme: SignatureSchemeId,
    pub mode: ChannelMode,
    pub claim_margin_delta: Tick,
    pub dispute_window: Tick,
}

impl Canonical for ChannelParams {
    const TAG: [u8; 4] = *b"PAR1";
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.claim_margin_delta < 1 {
            return Err("claim_margin_delta must be at least 1".into());
        }
        if self.dispute_window < 1 {
            return Err("dispute_window must be at least 1".into());
        }
        if self.client_pk.scheme != self.scheme || self.hub_pk.scheme != self.scheme {
            return Err(format!("keys must use the channel scheme {}", self.scheme));
        }
        Ok(())
    }

    pub fn key_of(&self, party: Party) -> &PublicKey {
        match party {
            Party::Client => &self.client_pk,
            Party::Hub => &self.hub_pk,
        }
    }

    pub fn account_of(&self, party: Party) -> AccountId {
        match party {
            Party::Client => AccountId(self.client_id.0.clone()),
            Party::Hub => self.hub_id.clone(),
        }
    }

    pub fn party_of(&self, account: &AccountId) -> Option<Party> {
        if account.0 == self.client_id.0 {
            Some(Party::Client)
        } else if *account == self.hub_id {
            Some(Party::Hub)
        } else {
            None
        }
    }
}

/// Step 0: the payee's invoice. Deliberately unsigned so it can travel out of band.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentProposal {
    pub proposal_id: String,
    pub amount: Amount,
    pub hashlock: Digest,
    pub expiry: Tick,
    pub payee_route: ClientId,
}

impl Canonical for PaymentProposal {
    const TAG: [u8; 4] = *b"PRP1";
}

/// The signed part of a promise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromiseBody {
    pub channel_id: ChannelId,
    /// Which end of the channel is paying.
    pub from: Party,
    pub index: u64,
    pub amount: Amount,
    pub hashlock: Digest,
    pub expiry: Tick,
}

impl Canonical for PromiseBody {
    const TAG: [u8; 4] = *b"PRM1";
}

/// A conditional payment: `amount` moves to the peer if the hashlock preimage
/// is presented strictly before `expiry`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Promise {
    #[serde(flatten)]
    pub body: PromiseBody,
    pub sender_sig: Signature,
}

impl Canonical for Promise {
    const TAG: [u8; 4] = *b"PRMS";
}

impl Promise {
    pub fn sign(body: PromiseBody, scheme: SignatureSchemeId, key: &PrivateKey) -> Result<Self, CryptoError> {
        let sender_sig = sign(scheme, key, &body.canonical_bytes())?;
        Ok(Promise { body, sender_sig })
    }

    pub fn verify_sig(&self, pk: &PublicKey) -> bool {
        verify(pk, &self.body.canonical_bytes(), &self.sender_sig)
    }

    /// Merkle leaf for the pending-set accumulator.
    pub fn leaf(&self) -> Digest {
        self.body.canonical_digest()
    }

    pub fn hashlock(&self) -> Digest {
        self.body.hashlock
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretMessage {
    pub channel_id: ChannelId,
    pub hashlock: Digest,
    pub preimage: SecretPreimage,
}

impl Canonical for SecretMessage {
    const TAG: [u8; 4] = *b"SEC1";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptBody {
    pub channel_id: ChannelId,
    /// The issuer: the paying end of this direction.
    pub from: Party,
    pub index: u64,
    /// Total credit the issuer owes its peer on this direction.
    pub cumulative_credit: Amount,
    /// Root over the issuer's unresolved outgoing promises (zero in serialized mode).
    pub pending_root: Digest,
}

impl Canonical for ReceiptBody {
    const TAG: [u8; 4] = *b"RCT1";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    #[serde(flatten)]
    pub body: ReceiptBody,
    pub issuer_sig: Signature,
}

impl Canonical for Receipt {
    const TAG: [u8; 4] = *b"RCTS";
}

impl Receipt {
    pub fn sign(body: ReceiptBody, scheme: SignatureSchemeId, key: &PrivateKey) -> Result<Self, CryptoError> {
        let issuer_sig = sign(scheme, key, &body.canonical_bytes())?;
        Ok(Receipt { body, issuer_sig })
    }

    pub fn verify_sig(&self, pk: &PublicKey) -> bool {
        verify(pk, &self.body.canonical_bytes(), &self.issuer_sig)
    }

    pub fn digest(&self) -> Digest {
        self.body.canonical_digest()
    }
}

/// Final balances both parties sign for a cooperative close.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseRecord {
    pub channel_id: ChannelId,
    pub client_balance: Amount,
    pub hub_balance: Amount,
}

impl Canonical for CloseRecord {
    const TAG: [u8; 4] = *b"CLS1";
}
