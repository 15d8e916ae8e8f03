use serde::{Deserialize, Serialize};

use crate::crypto::{merkle_verify, Digest, MerkleProof, PublicKey, SecretPreimage};
use crate::protocol::{Amount, ChannelMode, Party, Promise, Receipt, Tick};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Balances {
    pub client: Amount,
    pub hub: Amount,
}

impl Balances {
    pub fn get(&self, party: Party) -> Amount {
        match party {
            Party::Client => self.client,
            Party::Hub => self.hub,
        }
    }

    pub fn get_mut(&mut self, party: Party) -> &mut Amount {
        match party {
            Party::Client => &mut self.client,
            Party::Hub => &mut self.hub,
        }
    }

    pub fn total(&self) -> Amount {
        self.client + self.hub
    }
}

/// A Merkle proof that a promise sits in a receipt's pending set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub receipt: Receipt,
    pub proof: MerkleProof,
}

impl InclusionProof {
    /// The receipt must be signed by the promise's sender on the same channel,
    /// postdate the promise, and commit to it in its pending root.
    pub fn verify(&self, promise: &Promise, issuer_pk: &PublicKey) -> bool {
        let r = &self.receipt.body;
        r.channel_id == promise.body.channel_id
            && r.from == promise.body.from
            && r.index > promise.body.index
            && self.receipt.verify_sig(issuer_pk)
            && merkle_verify(&r.pending_root, &promise.leaf(), &self.proof)
    }
}

/// An on-chain claim of a promise by its receiver.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub claimant: Party,
    pub amount: Amount,
    pub promise: Promise,
    pub preimage: SecretPreimage,
    pub at: Tick,
    /// Digest of the receipt whose pending root the claim was proven against.
    pub proven_against: Option<Digest>,
}

/// Whether a claim is paid at settlement, given the final receipt its payer
/// issued. Claims already covered by that receipt's credit are not.
pub fn claim_counts(mode: ChannelMode, claim: &ClaimRecord, payer_receipt: Option<&Receipt>) -> bool {
    let Some(r) = payer_receipt else { return true };
    if claim.promise.body.index > r.body.index {
        return true;
    }
    mode == ChannelMode::Concurrent && claim.proven_against == Some(r.digest())
}

/// Final balances from deposits, the latest receipt each party issued, and
/// the on-chain claims. Shared by the contract and by both parties when they
/// agree on a cooperative close.
///
/// Each side gets `deposit + credit received - credit sent + claims won -
/// claims lost`. The result is clamped at zero so payouts never exceed the
/// deposits.
pub fn compute_settlement<'a>(
    mode: ChannelMode,
    deposits: Balances,
    client_issued: Option<&Receipt>,
    hub_issued: Option<&Receipt>,
    claims: impl IntoIterator<Item = &'a ClaimRecord>,
) -> Balances {
    let credit = |r: Option<&Receipt>| r.map_or(0, |r| r.body.cumulative_credit) as i128;
    let mut client = deposits.client as i128 + credit(hub_issued) - credit(client_issued);
    for claim in claims {
        let payer = claim.promise.body.from;
        let issued = match payer {
            Party::Client => client_issued,
            Party::Hub => hub_issued,
        };
        if !claim_counts(mode, claim, issued) {
            continue;
        }
        match claim.claimant {
            Party::Client => client += claim.amount as i128,
            Party::Hub => client -= claim.amount as i128,
        }
    }
    let total = deposits.total() as i128;
    let client = client.clamp(0, total);
    Balances { client: client as Amount, hub: (total - client) as Amount }
}

/// Moves `penalty_bps` basis points of the offender's balance to its peer.
pub fn apply_penalty(balances: &mut Balances, offender: Party, penalty_bps: u64) -> Amount {
    let fine = (balances.get(offender) as u128 * penalty_bps.min(10_000) as u128 / 10_000) as Amount;
    *balances.get_mut(offender) -= fine;
    *balances.get_mut(offender.other()) += fine;
    fine
}
