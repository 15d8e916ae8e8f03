#!/usr/bin/env python3
"""Regenerates the golden canonical-encoding vectors.

Each output line is `hex(encoding) SP hex(sha256(encoding))`. Run from this
directory; the Rust tests read the files it writes.
"""
import hashlib
import json

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat


def encode(tag, obj):
    return tag + json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def sha(b):
    return hashlib.sha256(b).digest()


def merkle_root(leaves):
    if not leaves:
        return bytes(32)
    level = [sha(b"\x00" + leaf) for leaf in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha(b"\x01" + level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


CLIENT = Ed25519PrivateKey.from_private_bytes(bytes([1]) * 32)
HUB = Ed25519PrivateKey.from_private_bytes(bytes([2]) * 32)


def pk(key):
    raw = key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return {"scheme": "ed25519", "key": raw.hex()}


def signed(key, tag, body, wrapper_tag, sig_field):
    sig = key.sign(encode(tag, body))
    return encode(wrapper_tag, dict(body, **{sig_field: {"scheme": "ed25519", "sig": sig.hex()}}))


PREIMAGE = bytes(range(32))
HASHLOCK = sha(PREIMAGE).hex()

promise_bodies = [
    {"channel_id": "ch-golden", "from": "client", "index": 1, "amount": 5, "hashlock": HASHLOCK, "expiry": 1000},
    {"channel_id": "ch-golden", "from": "client", "index": 2, "amount": 6, "hashlock": HASHLOCK, "expiry": 1000},
    {"channel_id": "ch-golden", "from": "hub", "index": 7, "amount": 2**64 - 1, "hashlock": "ab" * 32, "expiry": 0},
]
promise_leaves = [sha(encode(b"PRM1", b)) for b in promise_bodies]

receipt_bodies = [
    {"channel_id": "ch-golden", "from": "hub", "index": 1, "cumulative_credit": 5, "pending_root": "00" * 32},
    {"channel_id": "ch-golden", "from": "client", "index": 9, "cumulative_credit": 40,
     "pending_root": merkle_root(promise_leaves[:2]).hex()},
]

KEYS = {"client": CLIENT, "hub": HUB}

vectors = {
    "promise_body": [encode(b"PRM1", b) for b in promise_bodies],
    "promise": [signed(KEYS[b["from"]], b"PRM1", b, b"PRMS", "sender_sig") for b in promise_bodies],
    "receipt_body": [encode(b"RCT1", b) for b in receipt_bodies],
    "receipt": [signed(KEYS[b["from"]], b"RCT1", b, b"RCTS", "issuer_sig") for b in receipt_bodies],
    "secret": [encode(b"SEC1", {"channel_id": "ch-golden", "hashlock": HASHLOCK, "preimage": PREIMAGE.hex()})],
    "proposal": [encode(b"PRP1", {"proposal_id": "p-0001", "amount": 10, "hashlock": HASHLOCK,
                                   "expiry": 500, "payee_route": "bob"})],
    "close_record": [encode(b"CLS1", {"channel_id": "ch-golden", "client_balance": 80, "hub_balance": 120})],
    "params": [encode(b"PAR1", {
        "channel_id": "ch-golden", "ledger_id": "L1", "client_id": "alice", "hub_id": "hub",
        "client_pk": pk(CLIENT), "hub_pk": pk(HUB), "scheme": "ed25519", "mode": "CONCURRENT",
        "claim_margin_delta": 50, "dispute_window": 20,
    })],
}

for name, lines in vectors.items():
    with open(f"{name}.txt", "w") as f:
        for enc in lines:
            f.write(f"{enc.hex()} {sha(enc).hex()}\n")
