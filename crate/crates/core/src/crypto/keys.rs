//! Pluggable signature schemes.
//!
//! Two concrete algorithms are supported so that channels on different
//! ledgers can use different schemes while sharing one hash function:
//! Ed25519 and ECDSA over secp256k1 (RFC 6979 deterministic nonces,
//! SHA-256 message digest, low-S normalised signatures).

use std::fmt;

use ed25519_dalek::{Signer as _, Verifier as _};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::digest::hex_bytes;
use super::CryptoError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SignatureSchemeId {
    /// Ed25519 (scheme A).
    #[serde(rename = "ed25519")]
    Ed25519,
    /// ECDSA over secp256k1 (scheme B).
    #[serde(rename = "ecdsa-secp256k1")]
    EcdsaSecp256k1,
}

impl SignatureSchemeId {
    pub const SCHEME_A: SignatureSchemeId = SignatureSchemeId::Ed25519;
    pub const SCHEME_B: SignatureSchemeId = SignatureSchemeId::EcdsaSecp256k1;

    pub fn name(&self) -> &'static str {
        match self {
            SignatureSchemeId::Ed25519 => "ed25519",
            SignatureSchemeId::EcdsaSecp256k1 => "ecdsa-secp256k1",
        }
    }
}

impl fmt::Display for SignatureSchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SignatureSchemeId {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ed25519" | "SCHEME_A" => Ok(SignatureSchemeId::Ed25519),
            "ecdsa-secp256k1" | "secp256k1" | "SCHEME_B" => Ok(SignatureSchemeId::EcdsaSecp256k1),
            other => Err(CryptoError::UnknownScheme(other.to_string())),
        }
    }
}

/// Ed25519: 32-byte key. secp256k1: 33-byte SEC1 compressed point.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey {
    pub scheme: SignatureSchemeId,
    #[serde(with = "hex_bytes")]
    pub key: Vec<u8>,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}:{})", self.scheme, &hex::encode(&self.key)[..12])
    }
}

/// Raw 32-byte secret scalar / seed. Kept in snapshots; there is no custody story.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "RawPrivateKey", into = "RawPrivateKey")]
pub struct PrivateKey {
    pub scheme: SignatureSchemeId,
    pub secret: Vec<u8>,
    /// Parsed once so that signing skips the key expansion.
    ed25519: Option<ed25519_dalek::SigningKey>,
}

#[derive(Serialize, Deserialize)]
struct RawPrivateKey {
    scheme: SignatureSchemeId,
    #[serde(with = "hex_bytes")]
    secret: Vec<u8>,
}

impl TryFrom<RawPrivateKey> for PrivateKey {
    type Error = CryptoError;

    fn try_from(raw: RawPrivateKey) -> Result<Self, CryptoError> {
        PrivateKey::new(raw.scheme, raw.secret)
    }
}

impl From<PrivateKey> for RawPrivateKey {
    fn from(k: PrivateKey) -> Self {
        RawPrivateKey { scheme: k.scheme, secret: k.secret }
    }
}

impl PartialEq for PrivateKey {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme && self.secret == other.secret
    }
}

impl Eq for PrivateKey {}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PrivateKey({}:..)", self.scheme)
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub scheme: SignatureSchemeId,
    #[serde(with = "hex_bytes")]
    pub sig: Vec<u8>,
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}:{}..)", self.scheme, &hex::encode(&self.sig)[..8.min(self.sig.len() * 2)])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keypair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl Keypair {
    pub fn generate<R: RngCore + ?Sized>(scheme: SignatureSchemeId, rng: &mut R) -> Self {
        loop {
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            if let Ok(kp) = Self::from_secret(scheme, &seed) {
                return kp;
            }
        }
    }

    /// Fails only for secp256k1 scalars that are zero or not below the group order.
    pub fn from_secret(scheme: SignatureSchemeId, secret: &[u8; 32]) -> Result<Self, CryptoError> {
        let private = PrivateKey::new(scheme, secret.to_vec())?;
        let public = private.public_key()?;
        Ok(Keypair { public, private })
    }
}

impl PrivateKey {
    pub fn new(scheme: SignatureSchemeId, secret: Vec<u8>) -> Result<Self, CryptoError> {
        let ed25519 = match scheme {
            SignatureSchemeId::Ed25519 => Some(ed25519_signing_key(&secret)?),
            SignatureSchemeId::EcdsaSecp256k1 => None,
        };
        Ok(PrivateKey { scheme, secret, ed25519 })
    }

    pub fn public_key(&self) -> Result<PublicKey, CryptoError> {
        let key = match self.scheme {
            SignatureSchemeId::Ed25519 => {
                let sk = ed25519_signing_key(&self.secret)?;
                sk.verifying_key().to_bytes().to_vec()
            }
            SignatureSchemeId::EcdsaSecp256k1 => {
                let sk = secp_signing_key(&self.secret)?;
                sk.verifying_key().to_encoded_point(true).as_bytes().to_vec()
            }
        };
        Ok(PublicKey { scheme: self.scheme, key })
    }

    /// Signs under this key's own scheme.
    pub fn sign_raw(&self, msg: &[u8]) -> Result<Signature, CryptoError> {
        let sig = match self.scheme {
            SignatureSchemeId::Ed25519 => {
                let sk = self.ed25519.as_ref().ok_or(CryptoError::MalformedKey)?;
                sk.sign(msg).to_bytes().to_vec()
            }
            SignatureSchemeId::EcdsaSecp256k1 => {
                let sig: k256::ecdsa::Signature = secp_signing_key(&self.secret)?.sign(msg);
                sig.to_bytes().to_vec()
            }
        };
        Ok(Signature { scheme: self.scheme, sig })
    }
}

fn ed25519_signing_key(secret: &[u8]) -> Result<ed25519_dalek::SigningKey, CryptoError> {
    let seed: [u8; 32] = secret.try_into().map_err(|_| CryptoError::MalformedKey)?;
    Ok(ed25519_dalek::SigningKey::from_bytes(&seed))
}

fn secp_signing_key(secret: &[u8]) -> Result<k256::ecdsa::SigningKey, CryptoError> {
    k256::ecdsa::SigningKey::from_slice(secret).map_err(|_| CryptoError::MalformedKey)
}

/// Signs `msg`, refusing keys that do not belong to the channel's scheme.
pub fn sign(expected: SignatureSchemeId, key: &PrivateKey, msg: &[u8]) -> Result<Signature, CryptoError> {
    if key.scheme != expected {
        return Err(CryptoError::SchemeMismatch { expected, actual: key.scheme });
    }
    key.sign_raw(msg)
}

/// Never errors: malformed keys or signatures and scheme mismatches verify as false.
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    if pk.scheme != sig.scheme {
        return false;
    }
    match pk.scheme {
        SignatureSchemeId::Ed25519 => {
            let Ok(key_bytes) = <[u8; 32]>::try_from(pk.key.as_slice()) else { return false };
            let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key_bytes) else { return false };
            let Ok(sig_bytes) = <[u8; 64]>::try_from(sig.sig.as_slice()) else { return false };
            let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
            vk.verify_strict(msg, &sig).is_ok()
        }
        SignatureSchemeId::EcdsaSecp256k1 => {
            let Ok(vk) = k256::ecdsa::VerifyingKey::from_sec1_bytes(&pk.key) else { return false };
            let Ok(sig) = k256::ecdsa::Signature::from_slice(&sig.sig) else { return false };
            // Reject high-S forms so each message has exactly one valid encoding.
            if sig.normalize_s().is_some() {
                return false;
            }
            vk.verify(msg, &sig).is_ok()
        }
    }
}
