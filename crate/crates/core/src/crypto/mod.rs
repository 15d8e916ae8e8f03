//! Hash commitments, signature schemes, canonical encoding and the Merkle
//! accumulator. Everything here is a pure function over immutable values.

mod digest;
mod encoding;
mod keys;
mod merkle;

use thiserror::Error;

pub use digest::{hash_commit, sha256, sha256_parts, Digest, SecretPreimage};
pub use encoding::{canonical_decode, canonical_encode, encode_tagged, split_tag, Canonical, EncodingError};
pub use keys::{sign, verify, Keypair, PrivateKey, PublicKey, Signature, SignatureSchemeId};
pub use merkle::{hash_leaf, hash_node, merkle_prove, merkle_root, merkle_verify, MerkleProof};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key scheme {actual} does not match channel scheme {expected}")]
    SchemeMismatch { expected: SignatureSchemeId, actual: SignatureSchemeId },
    #[error("unknown signature scheme {0:?}")]
    UnknownScheme(String),
    #[error("malformed key material")]
    MalformedKey,
}
