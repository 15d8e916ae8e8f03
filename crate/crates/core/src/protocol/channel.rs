//! One party's off-chain view of a channel and the Auth & Pay transitions.
//!
//! Each direction of a channel has a *sender* (who signs promises and, on
//! learning a promise's secret, signs a receipt for its cumulative credit) and
//! a *receiver* (who verifies promises, reveals secrets and collects receipts).
//! A `ChannelState` holds both directions from one party's side: `pending_out`
//! and `credit_sent` for the direction it pays on, `pending_in` and
//! `credit_received` for the direction it is paid on.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::types::*;
use crate::crypto::{hash_commit, merkle_prove, merkle_root, CryptoError, Digest, MerkleProof, PrivateKey, SecretPreimage};

/// Bound on how many expired or refused incoming promises are remembered for
/// pending-root reconciliation.
const MAX_UNCERTAIN: usize = 16;
/// Subset searches above this many candidates fall back to the trivial choices.
const MAX_SUBSET_SEARCH: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("amount must be positive")]
    InvalidAmount,
    #[error("proposal expiry is not in the future")]
    ExpiredProposal,
    #[error("insufficient capacity: need {needed}, available {available}")]
    InsufficientCapacity { needed: Amount, available: Amount },
    #[error("an outgoing promise is still unresolved")]
    ChannelBusy,
    #[error("hashlock already pending on this channel")]
    DuplicateHashlock,
    #[error("channel is closing")]
    ChannelClosing,
    #[error("no pending promise for hashlock")]
    UnknownPromise,
    #[error("preimage does not match hashlock")]
    BadPreimage,
    #[error("promise expired")]
    Expired,
    #[error("secret for hashlock is not known")]
    NoSecret,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl ChannelError {
    pub fn code(&self) -> &'static str {
        match self {
            ChannelError::InvalidAmount => "InvalidAmount",
            ChannelError::ExpiredProposal => "ExpiredProposal",
            ChannelError::InsufficientCapacity { .. } => "InsufficientCapacity",
            ChannelError::ChannelBusy => "ChannelBusy",
            ChannelError::DuplicateHashlock => "DuplicateHashlock",
            ChannelError::ChannelClosing => "ChannelClosing",
            ChannelError::UnknownPromise => "UnknownPromise",
            ChannelError::BadPreimage => "BadPreimage",
            ChannelError::Expired => "Expired",
            ChannelError::NoSecret => "NoSecret",
            ChannelError::Crypto(_) => "SchemeError",
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromiseReject {
    #[error("promise is for another channel or direction")]
    WrongChannel,
    #[error("bad signature")]
    BadSignature,
    #[error("amount must be positive")]
    InvalidAmount,
    #[error("amount exceeds the sender's spendable balance")]
    InsufficientCapacity,
    #[error("expiry leaves no claim margin")]
    ExpiryTooSoon,
    #[error("stale or out-of-sequence index")]
    StaleIndex,
    #[error("hashlock already pending")]
    DuplicateHashlock,
    #[error("previous promise still unresolved")]
    ChannelBusy,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReceiptReject {
    #[error("receipt is for another channel or direction")]
    WrongChannel,
    #[error("bad signature")]
    BadSignature,
    #[error("cumulative credit does not match local books")]
    CreditMismatch,
    #[error("stale index")]
    StaleIndex,
    #[error("pending root does not match the unresolved promise set")]
    BadPendingRoot,
}

/// What an accepted receipt resolved, and the promise set its root commits to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceiptMatch {
    pub resolved: Vec<Digest>,
    pub leaves: Vec<Promise>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelState {
    pub params: ChannelParams,
    pub side: Party,
    pub my_deposit: Amount,
    pub peer_deposit: Amount,
    pub credit_sent: Amount,
    pub credit_received: Amount,
    pub pending_out: BTreeMap<Digest, Promise>,
    pub pending_in: BTreeMap<Digest, Promise>,
    /// Incoming promises whose secret this party has revealed.
    pub revealed_in: BTreeSet<Digest>,
    pub last_receipt_sent: Option<Receipt>,
    pub last_receipt_received: Option<Receipt>,
    /// The promise set committed to by `last_receipt_received.pending_root`.
    pub receipt_leaves: Vec<Promise>,
    /// Incoming promises that expired or were refused here but may still sit
    /// in the sender's pending set.
    pub uncertain_in: Vec<Promise>,
    /// Incoming promises this party claimed on-chain.
    pub claimed_in: BTreeMap<Digest, Promise>,
    /// Outgoing promises the peer claimed on-chain before a receipt. They stay
    /// in every later pending root so the claim can be proven against it.
    pub claimed_out: BTreeMap<Digest, Promise>,
    pub secrets: BTreeMap<Digest, SecretPreimage>,
    /// Shared promise/receipt counter for the outgoing direction (concurrent mode).
    pub next_index: u64,
    /// Highest promise or receipt index seen from the peer.
    pub last_seen_in_index: u64,
    pub closing: bool,
}

impl ChannelState {
    pub fn new(params: ChannelParams, side: Party) -> Self {
        ChannelState {
            params,
            side,
            my_deposit: 0,
            peer_deposit: 0,
            credit_sent: 0,
            credit_received: 0,
            pending_out: BTreeMap::new(),
            pending_in: BTreeMap::new(),
            revealed_in: BTreeSet::new(),
            last_receipt_sent: None,
            last_receipt_received: None,
            receipt_leaves: Vec::new(),
            uncertain_in: Vec::new(),
            claimed_in: BTreeMap::new(),
            claimed_out: BTreeMap::new(),
            secrets: BTreeMap::new(),
            next_index: 1,
            last_seen_in_index: 0,
            closing: false,
        }
    }

    pub fn channel_id(&self) -> &ChannelId {
        &self.params.channel_id
    }

    pub fn mode(&self) -> ChannelMode {
        self.params.mode
    }

    pub fn peer(&self) -> Party {
        self.side.other()
    }

    fn pending_out_total(&self) -> Amount {
        self.pending_out.values().map(|p| p.body.amount).sum()
    }

    /// `deposit + credit_received - credit_sent - pending outgoing`.
    pub fn available_balance(&self) -> Amount {
        (self.my_deposit + self.credit_received)
            .saturating_sub(self.credit_sent)
            .saturating_sub(self.pending_out_total())
            .saturating_sub(self.claimed_out_total())
    }

    fn claimed_out_total(&self) -> Amount {
        self.claimed_out.values().map(|p| p.body.amount).sum()
    }

    /// What the peer may still promise us, from our books.
    pub fn peer_available(&self, now: Tick) -> Amount {
        let pending: Amount = self.pending_in.values().filter(|p| p.body.expiry > now).map(|p| p.body.amount).sum();
        let claimed: Amount = self.claimed_in.values().map(|p| p.body.amount).sum();
        (self.peer_deposit + self.credit_sent)
            .saturating_sub(self.credit_received)
            .saturating_sub(pending)
            .saturating_sub(claimed)
    }

    /// Incoming promises revealed but not yet covered by a receipt.
    pub fn revealed_unreceipted(&self) -> impl Iterator<Item = &Promise> {
        self.revealed_in.iter().filter_map(|h| self.pending_in.get(h))
    }

    /// Step 0: draw a fresh preimage and publish only its hash.
    pub fn make_proposal<R: RngCore + ?Sized>(
        &mut self,
        amount: Amount,
        expiry: Tick,
        now: Tick,
        payee: ClientId,
        rng: &mut R,
    ) -> Result<PaymentProposal, ChannelError> {
        if amount == 0 {
            return Err(ChannelError::InvalidAmount);
        }
        if expiry <= now {
            return Err(ChannelError::ExpiredProposal);
        }
        let preimage = SecretPreimage::random(rng);
        let hashlock = hash_commit(&preimage);
        let mut id = [0u8; 8];
        rng.fill_bytes(&mut id);
        self.secrets.insert(hashlock, preimage);
        Ok(PaymentProposal { proposal_id: hex::encode(id), amount, hashlock, expiry, payee_route: payee })
    }

    /// Index the next outgoing promise will carry.
    pub fn next_promise_index(&self) -> u64 {
        match self.mode() {
            ChannelMode::Serialized => self.last_receipt_sent.as_ref().map_or(0, |r| r.body.index) + 1,
            ChannelMode::Concurrent => self.next_index,
        }
    }

    /// Step 1 (or the hub's half of step 2).
    pub fn make_promise(&mut self, proposal: &PaymentProposal, sk: &PrivateKey, now: Tick) -> Result<Promise, ChannelError> {
        if self.closing {
            return Err(ChannelError::ChannelClosing);
        }
        if proposal.amount == 0 {
            return Err(ChannelError::InvalidAmount);
        }
        if proposal.expiry <= now {
            return Err(ChannelError::ExpiredProposal);
        }
        if self.mode() == ChannelMode::Serialized && !self.pending_out.is_empty() {
            return Err(ChannelError::ChannelBusy);
        }
        if self.pending_out.contains_key(&proposal.hashlock) {
            return Err(ChannelError::DuplicateHashlock);
        }
        let available = self.available_balance();
        if proposal.amount > available {
            return Err(ChannelError::InsufficientCapacity { needed: proposal.amount, available });
        }
        let body = PromiseBody {
            channel_id: self.params.channel_id.clone(),
            from: self.side,
            index: self.next_promise_index(),
            amount: proposal.amount,
            hashlock: proposal.hashlock,
            expiry: proposal.expiry,
        };
        let promise = Promise::sign(body, self.params.scheme, sk)?;
        if self.mode() == ChannelMode::Concurrent {
            self.next_index += 1;
        }
        self.pending_out.insert(promise.hashlock(), promise.clone());
        Ok(promise)
    }

    /// Step 2 checks on an incoming promise. The hub also demands that the
    /// expiry leave at least `claim_margin_delta` ticks.
    pub fn verify_promise(&self, p: &Promise, now: Tick) -> Result<(), PromiseReject> {
        if p.body.channel_id != self.params.channel_id || p.body.from != self.peer() {
            return Err(PromiseReject::WrongChannel);
        }
        if !p.verify_sig(self.params.key_of(self.peer())) {
            return Err(PromiseReject::BadSignature);
        }
        if p.body.amount == 0 {
            return Err(PromiseReject::InvalidAmount);
        }
        let margin = if self.side == Party::Hub { self.params.claim_margin_delta } else { 0 };
        if p.body.expiry <= now + margin {
            return Err(PromiseReject::ExpiryTooSoon);
        }
        match self.mode() {
            ChannelMode::Serialized => {
                let expected = self.last_receipt_received.as_ref().map_or(0, |r| r.body.index) + 1;
                if p.body.index != expected {
                    return Err(PromiseReject::StaleIndex);
                }
                if self.pending_in.values().any(|q| q.body.expiry > now) {
                    if self.pending_in.contains_key(&p.hashlock()) {
                        return Err(PromiseReject::DuplicateHashlock);
                    }
                    return Err(PromiseReject::ChannelBusy);
                }
            }
            ChannelMode::Concurrent => {
                if p.body.index <= self.last_seen_in_index {
                    return Err(PromiseReject::StaleIndex);
                }
            }
        }
        if self.pending_in.contains_key(&p.hashlock()) || self.claimed_in.contains_key(&p.hashlock()) {
            return Err(PromiseReject::DuplicateHashlock);
        }
        if p.body.amount > self.peer_available(now) {
            return Err(PromiseReject::InsufficientCapacity);
        }
        Ok(())
    }

    /// Verifies and records an incoming promise.
    pub fn accept_promise(&mut self, p: Promise, now: Tick) -> Result<(), PromiseReject> {
        match self.verify_promise(&p, now) {
            Ok(()) => {
                // An expired entry with the same index can linger until the next expiry sweep.
                self.pending_in.retain(|_, q| q.body.expiry > now);
                self.last_seen_in_index = self.last_seen_in_index.max(p.body.index);
                self.pending_in.insert(p.hashlock(), p);
                Ok(())
            }
            Err(reason) => {
                let signed = !matches!(reason, PromiseReject::WrongChannel | PromiseReject::BadSignature);
                if signed && self.mode() == ChannelMode::Concurrent && p.body.index > self.last_seen_in_index {
                    // The sender may still count it as pending until it hears of the refusal.
                    self.remember_uncertain(p);
                }
                Err(reason)
            }
        }
    }

    fn remember_uncertain(&mut self, p: Promise) {
        if self.uncertain_in.iter().any(|q| q.hashlock() == p.hashlock()) {
            return;
        }
        self.uncertain_in.push(p);
        if self.uncertain_in.len() > MAX_UNCERTAIN {
            self.uncertain_in.sort_by_key(|q| q.body.index);
            self.uncertain_in.remove(0);
        }
    }

    pub fn learn_secret(&mut self, preimage: SecretPreimage) -> Digest {
        let hashlock = hash_commit(&preimage);
        self.secrets.insert(hashlock, preimage);
        hashlock
    }

    /// Step 3 (payee) or step 5 (hub forwarding to the sender).
    pub fn reveal_secret(&mut self, hashlock: &Digest) -> Result<SecretMessage, ChannelError> {
        if !self.pending_in.contains_key(hashlock) {
            return Err(ChannelError::UnknownPromise);
        }
        let preimage = *self.secrets.get(hashlock).ok_or(ChannelError::NoSecret)?;
        self.revealed_in.insert(*hashlock);
        Ok(SecretMessage { channel_id: self.params.channel_id.clone(), hashlock: *hashlock, preimage })
    }

    /// Steps 4 and 6: the sender of the matching promise acknowledges the
    /// secret with a receipt for its new cumulative credit.
    pub fn accept_secret(&mut self, s: &SecretMessage, sk: &PrivateKey, now: Tick) -> Result<Receipt, ChannelError> {
        let promise = self.pending_out.get(&s.hashlock).ok_or(ChannelError::UnknownPromise)?;
        if hash_commit(&s.preimage) != s.hashlock {
            return Err(ChannelError::BadPreimage);
        }
        if now >= promise.body.expiry {
            return Err(ChannelError::Expired);
        }
        let index = match self.mode() {
            ChannelMode::Serialized => promise.body.index,
            ChannelMode::Concurrent => self.next_index,
        };
        let amount = promise.body.amount;
        let mut remaining: Vec<&Promise> = self
            .pending_out
            .values()
            .filter(|p| p.hashlock() != s.hashlock && p.body.expiry > now)
            .chain(self.claimed_out.values())
            .collect();
        let pending_root = match self.mode() {
            ChannelMode::Serialized => Digest::ZERO,
            ChannelMode::Concurrent => {
                remaining.sort_by_key(|p| p.body.index);
                merkle_root(&remaining.iter().map(|p| p.leaf()).collect::<Vec<_>>())
            }
        };
        let body = ReceiptBody {
            channel_id: self.params.channel_id.clone(),
            from: self.side,
            index,
            cumulative_credit: self.credit_sent + amount,
            pending_root,
        };
        let receipt = Receipt::sign(body, self.params.scheme, sk)?;
        self.pending_out.remove(&s.hashlock);
        self.credit_sent += amount;
        self.secrets.insert(s.hashlock, s.preimage);
        if self.mode() == ChannelMode::Concurrent {
            self.next_index += 1;
        }
        self.last_receipt_sent = Some(receipt.clone());
        Ok(receipt)
    }

    /// Checks an incoming receipt against local books without applying it.
    pub fn verify_receipt(&self, r: &Receipt, now: Tick) -> Result<ReceiptMatch, ReceiptReject> {
        if r.body.channel_id != self.params.channel_id || r.body.from != self.peer() {
            return Err(ReceiptReject::WrongChannel);
        }
        if !r.verify_sig(self.params.key_of(self.peer())) {
            return Err(ReceiptReject::BadSignature);
        }
        if let Some(last) = &self.last_receipt_received {
            if r.body.index <= last.body.index {
                return Err(ReceiptReject::StaleIndex);
            }
        }
        if r.body.cumulative_credit < self.credit_received {
            return Err(ReceiptReject::StaleIndex);
        }
        let delta = r.body.cumulative_credit - self.credit_received;
        if delta == 0 {
            return Err(ReceiptReject::CreditMismatch);
        }
        match self.mode() {
            ChannelMode::Serialized => {
                let resolved = self
                    .pending_in
                    .values()
                    .chain(self.claimed_in.values())
                    .find(|p| p.body.index == r.body.index && p.body.amount == delta)
                    .ok_or(ReceiptReject::CreditMismatch)?;
                if r.body.pending_root != Digest::ZERO {
                    return Err(ReceiptReject::BadPendingRoot);
                }
                Ok(ReceiptMatch { resolved: vec![resolved.hashlock()], leaves: Vec::new() })
            }
            ChannelMode::Concurrent => self.match_concurrent_receipt(r, delta, now),
        }
    }

    fn match_concurrent_receipt(&self, r: &Receipt, delta: Amount, now: Tick) -> Result<ReceiptMatch, ReceiptReject> {
        let before = |p: &&Promise| p.body.index < r.body.index;
        let mut resolvable: Vec<&Promise> = self.pending_in.values().chain(self.claimed_in.values()).filter(before).collect();
        if resolvable.len() > MAX_SUBSET_SEARCH {
            resolvable.retain(|p| self.revealed_in.contains(&p.hashlock()) || self.claimed_in.contains_key(&p.hashlock()));
            resolvable.truncate(MAX_SUBSET_SEARCH);
        }
        let mut credit_matched = false;
        for subset in subsets_by_size(resolvable.len()) {
            let chosen: Vec<&Promise> = subset.iter().map(|&i| resolvable[i]).collect();
            if chosen.iter().map(|p| p.body.amount).sum::<Amount>() != delta {
                continue;
            }
            credit_matched = true;
            let resolved: BTreeSet<Digest> = chosen.iter().map(|p| p.hashlock()).collect();
            let live = |p: &&Promise| !resolved.contains(&p.hashlock());
            let certain: Vec<&Promise> =
                self.pending_in.values().filter(before).filter(live).filter(|p| p.body.expiry > now).collect();
            let mut uncertain: Vec<&Promise> = self
                .pending_in
                .values()
                .filter(|p| p.body.expiry <= now)
                .chain(self.uncertain_in.iter())
                .chain(self.claimed_in.values())
                .filter(before)
                .filter(live)
                .collect();
            uncertain.sort_by_key(|p| p.body.index);
            uncertain.dedup_by_key(|p| p.hashlock());
            if let Some(leaves) = find_leaf_set(&certain, &uncertain, &r.body.pending_root) {
                return Ok(ReceiptMatch { resolved: resolved.into_iter().collect(), leaves });
            }
        }
        Err(if credit_matched { ReceiptReject::BadPendingRoot } else { ReceiptReject::CreditMismatch })
    }

    /// Verifies and applies an incoming receipt; returns the promises it resolved.
    pub fn accept_receipt(&mut self, r: Receipt, now: Tick) -> Result<Vec<Promise>, ReceiptReject> {
        let m = self.verify_receipt(&r, now)?;
        let mut resolved = Vec::new();
        for h in &m.resolved {
            self.revealed_in.remove(h);
            if let Some(p) = self.pending_in.remove(h).or_else(|| self.claimed_in.remove(h)) {
                resolved.push(p);
            }
        }
        let kept: BTreeSet<Digest> = m.leaves.iter().map(|p| p.hashlock()).collect();
        self.uncertain_in.retain(|p| kept.contains(&p.hashlock()));
        self.credit_received = r.body.cumulative_credit;
        self.last_seen_in_index = self.last_seen_in_index.max(r.body.index);
        self.receipt_leaves = m.leaves;
        self.last_receipt_received = Some(r);
        Ok(resolved)
    }

    /// Drops a refused outgoing promise and restores its capacity.
    pub fn cancel_promise(&mut self, hashlock: &Digest) -> Option<Promise> {
        self.pending_out.remove(hashlock)
    }

    /// Deletes every pending promise with `expiry <= now`.
    pub fn expire_pending(&mut self, now: Tick) -> Vec<Promise> {
        let mut deleted = Vec::new();
        let expired_out: Vec<Digest> =
            self.pending_out.iter().filter(|(_, p)| p.body.expiry <= now).map(|(h, _)| *h).collect();
        for h in expired_out {
            deleted.extend(self.pending_out.remove(&h));
        }
        let expired_in: Vec<Digest> =
            self.pending_in.iter().filter(|(_, p)| p.body.expiry <= now).map(|(h, _)| *h).collect();
        for h in expired_in {
            self.revealed_in.remove(&h);
            if let Some(p) = self.pending_in.remove(&h) {
                if self.mode() == ChannelMode::Concurrent {
                    self.remember_uncertain(p.clone());
                }
                deleted.push(p);
            }
        }
        deleted
    }

    /// Forgets a refused incoming promise. The sender may still list it as
    /// pending until it hears of the refusal.
    pub fn drop_incoming(&mut self, hashlock: &Digest) -> Option<Promise> {
        let p = self.pending_in.remove(hashlock)?;
        self.revealed_in.remove(hashlock);
        if self.mode() == ChannelMode::Concurrent {
            self.remember_uncertain(p.clone());
        }
        Some(p)
    }

    /// Moves an incoming promise to the on-chain-claimed set.
    pub fn mark_claimed_in(&mut self, hashlock: &Digest) -> Option<&Promise> {
        let p = self.pending_in.remove(hashlock)?;
        self.revealed_in.remove(hashlock);
        self.claimed_in.insert(*hashlock, p);
        if self.mode() == ChannelMode::Serialized {
            self.closing = true;
        }
        self.claimed_in.get(hashlock)
    }

    /// Records that the peer claimed one of our unresolved promises on-chain.
    pub fn note_claimed_out(&mut self, hashlock: &Digest) -> Option<Promise> {
        let p = self.pending_out.remove(hashlock)?;
        self.claimed_out.insert(*hashlock, p.clone());
        if self.mode() == ChannelMode::Serialized {
            // A later receipt would outrank the claim's index and void it.
            self.closing = true;
        }
        Some(p)
    }

    /// Inclusion proof for an incoming promise against the latest receipt we
    /// hold, when that receipt was issued after the promise.
    pub fn inclusion_proof(&self, hashlock: &Digest) -> Option<(Receipt, MerkleProof)> {
        let receipt = self.last_receipt_received.as_ref()?;
        proof_against(receipt, &self.receipt_leaves, hashlock)
    }

    /// Candidate incoming promises a foreign receipt might still list as pending.
    pub fn proof_candidates(&self) -> Vec<Promise> {
        let mut all: Vec<Promise> = self
            .pending_in
            .values()
            .chain(self.claimed_in.values())
            .chain(self.uncertain_in.iter())
            .chain(self.receipt_leaves.iter())
            .cloned()
            .collect();
        all.sort_by_key(|p| p.body.index);
        all.dedup_by_key(|p| p.hashlock());
        all
    }

    /// Checks the spending invariants; used by tests and the simulation harness.
    pub fn check_invariants(&self) -> Result<(), String> {
        let spent = self.credit_sent + self.pending_out_total() + self.claimed_out_total();
        if spent > self.my_deposit + self.credit_received {
            return Err(format!(
                "{}: committed {} exceeds deposit {} + received {}",
                self.params.channel_id, spent, self.my_deposit, self.credit_received
            ));
        }
        if self.mode() == ChannelMode::Serialized && self.pending_out.len() > 1 {
            return Err(format!("{}: {} unresolved outgoing promises in serialized mode", self.params.channel_id, self.pending_out.len()));
        }
        Ok(())
    }
}

/// Builds an inclusion proof for `hashlock` from a receipt and its leaf set.
pub fn proof_against(receipt: &Receipt, leaves: &[Promise], hashlock: &Digest) -> Option<(Receipt, MerkleProof)> {
    let digests: Vec<Digest> = leaves.iter().map(|p| p.leaf()).collect();
    if merkle_root(&digests) != receipt.body.pending_root {
        return None;
    }
    let pos = leaves.iter().position(|p| p.hashlock() == *hashlock)?;
    Some((receipt.clone(), merkle_prove(&digests, pos)?))
}

/// Searches for a subset of `candidates` whose index-ordered Merkle root is
/// `root` and returns it.
pub fn reconstruct_leaves(candidates: &[Promise], root: &Digest) -> Option<Vec<Promise>> {
    let refs: Vec<&Promise> = candidates.iter().collect();
    find_leaf_set(&[], &refs, root)
}

/// Finds `certain ∪ X` (X ⊆ uncertain) whose index-ordered root equals `root`.
fn find_leaf_set(certain: &[&Promise], uncertain: &[&Promise], root: &Digest) -> Option<Vec<Promise>> {
    let try_set = |extra: &[&Promise]| -> Option<Vec<Promise>> {
        let mut set: Vec<&Promise> = certain.iter().chain(extra.iter()).copied().collect();
        set.sort_by_key(|p| p.body.index);
        let digests: Vec<Digest> = set.iter().map(|p| p.leaf()).collect();
        (merkle_root(&digests) == *root).then(|| set.into_iter().cloned().collect())
    };
    if uncertain.len() > MAX_SUBSET_SEARCH / 2 {
        return try_set(&[]).or_else(|| try_set(uncertain));
    }
    std::iter::once(Vec::new()).chain(subsets_by_size(uncertain.len())).find_map(|subset| {
        let extra: Vec<&Promise> = subset.iter().map(|&i| uncertain[i]).collect();
        try_set(&extra)
    })
}

/// Non-empty subsets of `0..n`, smallest first, in a fixed order.
fn subsets_by_size(n: usize) -> impl Iterator<Item = Vec<usize>> {
    let n = n.min(MAX_SUBSET_SEARCH);
    let mut masks: Vec<u32> = (1u32..(1u32 << n)).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    masks.into_iter().map(move |m| (0..n).filter(|i| m & (1 << i) != 0).collect())
}
