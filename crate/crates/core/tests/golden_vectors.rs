//! Canonical encodings and signatures must match the frozen vectors under
//! `vectors/`, which were produced by an independent Python encoder.

use std::path::PathBuf;

use upc_core::crypto::{hash_commit, merkle_root, sha256, Canonical, Digest, Keypair, SecretPreimage, SignatureSchemeId};
use upc_core::protocol::*;

fn load(name: &str) -> Vec<(Vec<u8>, Digest)> {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "vectors", &format!("{name}.txt")].iter().collect();
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|line| {
            let (enc, digest) = line.split_once(' ').expect("two columns");
            (hex::decode(enc).unwrap(), Digest::from_hex(digest).unwrap())
        })
        .collect()
}

fn check<T: Canonical>(name: &str, messages: &[T]) {
    let vectors = load(name);
    assert_eq!(vectors.len(), messages.len(), "{name}: vector count");
    for (i, (msg, (bytes, digest))) in messages.iter().zip(&vectors).enumerate() {
        let ours = msg.canonical_bytes();
        assert_eq!(
            String::from_utf8_lossy(&ours),
            String::from_utf8_lossy(bytes),
            "{name}[{i}] encoding"
        );
        assert_eq!(sha256(bytes), *digest, "{name}[{i}] file digest");
        assert_eq!(msg.canonical_digest(), *digest, "{name}[{i}] digest");
    }
}

fn keys() -> (Keypair, Keypair) {
    let scheme = SignatureSchemeId::SCHEME_A;
    (Keypair::from_secret(scheme, &[1; 32]).unwrap(), Keypair::from_secret(scheme, &[2; 32]).unwrap())
}

fn preimage() -> SecretPreimage {
    SecretPreimage(std::array::from_fn(|i| i as u8))
}

fn promise_bodies() -> Vec<PromiseBody> {
    let hashlock = hash_commit(&preimage());
    let body = |from, index, amount, hashlock, expiry| PromiseBody {
        channel_id: "ch-golden".into(),
        from,
        index,
        amount,
        hashlock,
        expiry,
    };
    vec![
        body(Party::Client, 1, 5, hashlock, 1000),
        body(Party::Client, 2, 6, hashlock, 1000),
        body(Party::Hub, 7, u64::MAX, Digest([0xab; 32]), 0),
    ]
}

fn receipt_bodies() -> Vec<ReceiptBody> {
    let leaves: Vec<Digest> = promise_bodies()[..2].iter().map(|b| b.canonical_digest()).collect();
    vec![
        ReceiptBody {
            channel_id: "ch-golden".into(),
            from: Party::Hub,
            index: 1,
            cumulative_credit: 5,
            pending_root: Digest::ZERO,
        },
        ReceiptBody {
            channel_id: "ch-golden".into(),
            from: Party::Client,
            index: 9,
            cumulative_credit: 40,
            pending_root: merkle_root(&leaves),
        },
    ]
}

fn key_for(party: Party) -> Keypair {
    let (client, hub) = keys();
    match party {
        Party::Client => client,
        Party::Hub => hub,
    }
}

#[test]
fn promise_vectors() {
    let bodies = promise_bodies();
    check("promise_body", &bodies);
    let signed: Vec<Promise> = bodies
        .into_iter()
        .map(|b| {
            let key = key_for(b.from);
            let p = Promise::sign(b, SignatureSchemeId::SCHEME_A, &key.private).unwrap();
            assert!(p.verify_sig(&key.public));
            p
        })
        .collect();
    check("promise", &signed);
}

#[test]
fn receipt_vectors() {
    let bodies = receipt_bodies();
    check("receipt_body", &bodies);
    let signed: Vec<Receipt> = bodies
        .into_iter()
        .map(|b| {
            let key = key_for(b.from);
            Receipt::sign(b, SignatureSchemeId::SCHEME_A, &key.private).unwrap()
        })
        .collect();
    check("receipt", &signed);
}

#[test]
fn other_message_vectors() {
    let hashlock = hash_commit(&preimage());
    check("secret", &[SecretMessage { channel_id: "ch-golden".into(), hashlock, preimage: preimage() }]);
    check(
        "proposal",
        &[PaymentProposal { proposal_id: "p-0001".into(), amount: 10, hashlock, expiry: 500, payee_route: "bob".into() }],
    );
    check("close_record", &[CloseRecord { channel_id: "ch-golden".into(), client_balance: 80, hub_balance: 120 }]);
    let (client, hub) = keys();
    check(
        "params",
        &[ChannelParams {
            channel_id: "ch-golden".into(),
            ledger_id: "L1".into(),
            client_id: "alice".into(),
            hub_id: "hub".into(),
            client_pk: client.public,
            hub_pk: hub.public,
            scheme: SignatureSchemeId::SCHEME_A,
            mode: ChannelMode::Concurrent,
            claim_margin_delta: 50,
            dispute_window: 20,
        }],
    );
}

#[test]
fn changing_one_field_changes_the_encoding() {
    let bodies = promise_bodies();
    assert_ne!(bodies[0].canonical_bytes(), bodies[1].canonical_bytes());
    assert_eq!(bodies[0].canonical_bytes(), promise_bodies()[0].canonical_bytes());
}
