//! Hashing and signatures behind one interface.
//!
//! Two families of schemes are supported: a fast deterministic `test` scheme
//! for property-test loops, and real asymmetric schemes (Ed25519, ECDSA
//! P-256). The test scheme keeps the adversary model intact inside the
//! simulation: producing a verifying signature requires the per-process
//! secret held in a [`SigningKey`], which the registry never hands back out.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::types::ProcessId;

/// SHA-256 output. Equality is byte equality.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Digest(arr))
    }

    /// Big-endian interpretation of the first 8 bytes, used to place a hash
    /// in the 64-bit prefix space.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..8])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("malformed digest hex"))
    }
}

/// SHA-256 of `data`.
pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 over the concatenation of `parts`, without materializing it.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Signature scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    /// `H(secret-seed || msg)`, verified through the key registry.
    #[default]
    Test,
    Ed25519,
    EcdsaP256,
}

/// An opaque signature tagged with the scheme that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub scheme: SchemeKind,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("no key registered for process {0}")]
    UnknownKey(String),
    #[error("signature does not verify")]
    BadSignature,
    #[error("signature scheme does not match the registry scheme")]
    SchemeMismatch,
}

enum Secret {
    Test([u8; 32]),
    Ed25519(Box<ed25519_dalek::SigningKey>),
    P256(Box<p256::ecdsa::SigningKey>),
}

/// Private signing half, held only by the owning process.
pub struct SigningKey {
    owner: ProcessId,
    secret: Secret,
}

impl SigningKey {
    pub fn owner(&self) -> &ProcessId {
        &self.owner
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        match &self.secret {
            Secret::Test(seed) => Signature {
                scheme: SchemeKind::Test,
                bytes: digest_parts(&[seed, msg]).0.to_vec(),
            },
            Secret::Ed25519(sk) => {
                use ed25519_dalek::Signer as _;
                Signature {
                    scheme: SchemeKind::Ed25519,
                    bytes: sk.sign(msg).to_bytes().to_vec(),
                }
            }
            Secret::P256(sk) => {
                use p256::ecdsa::signature::Signer as _;
                let sig: p256::ecdsa::Signature = sk.sign(msg);
                Signature {
                    scheme: SchemeKind::EcdsaP256,
                    bytes: sig.to_vec(),
                }
            }
        }
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey({})", self.owner)
    }
}

enum Verifier {
    Test([u8; 32]),
    Ed25519(ed25519_dalek::VerifyingKey),
    P256(p256::ecdsa::VerifyingKey),
}

/// Maps process identities to verification material.
///
/// Read-mostly after scenario construction; shared via `Arc` across nodes and
/// clients. Key material is derived deterministically from the registry seed
/// so identical scenarios build identical keys.
pub struct KeyRegistry {
    scheme: SchemeKind,
    master: [u8; 32],
    entries: HashMap<ProcessId, Verifier>,
}

impl KeyRegistry {
    pub fn new(scheme: SchemeKind, seed: u64) -> Self {
        KeyRegistry {
            scheme,
            master: digest_parts(&[b"registry", &seed.to_be_bytes()]).0,
            entries: HashMap::new(),
        }
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    /// Register `id` and hand back its private signing half. Each identity's
    /// key material is a pure function of (registry seed, identity).
    pub fn register(&mut self, id: ProcessId) -> SigningKey {
        let seed = digest_parts(&[&self.master, format!("{id}").as_bytes()]).0;
        let (secret, verifier) = match self.scheme {
            SchemeKind::Test => (Secret::Test(seed), Verifier::Test(seed)),
            SchemeKind::Ed25519 => {
                let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
                let vk = sk.verifying_key();
                (Secret::Ed25519(Box::new(sk)), Verifier::Ed25519(vk))
            }
            SchemeKind::EcdsaP256 => {
                let sk = p256::ecdsa::SigningKey::from_slice(&seed)
                    .expect("32 hash bytes are a valid P-256 scalar with overwhelming probability");
                let vk = *sk.verifying_key();
                (Secret::P256(Box::new(sk)), Verifier::P256(vk))
            }
        };
        self.entries.insert(id.clone(), verifier);
        SigningKey { owner: id, secret }
    }

    pub fn is_registered(&self, id: &ProcessId) -> bool {
        self.entries.contains_key(id)
    }

    /// Verify `sig` over `msg` as coming from `id`.
    pub fn verify(&self, id: &ProcessId, msg: &[u8], sig: &Signature) -> Result<(), CryptoError> {
        let entry = self
            .entries
            .get(id)
            .ok_or_else(|| CryptoError::UnknownKey(id.to_string()))?;
        match (entry, sig.scheme) {
            (Verifier::Test(seed), SchemeKind::Test) => {
                if sig.bytes == digest_parts(&[seed, msg]).0 {
                    Ok(())
                } else {
                    Err(CryptoError::BadSignature)
                }
            }
            (Verifier::Ed25519(vk), SchemeKind::Ed25519) => {
                let bytes: [u8; 64] =
                    sig.bytes[..].try_into().map_err(|_| CryptoError::BadSignature)?;
                vk.verify_strict(msg, &ed25519_dalek::Signature::from_bytes(&bytes))
                    .map_err(|_| CryptoError::BadSignature)
            }
            (Verifier::P256(vk), SchemeKind::EcdsaP256) => {
                use p256::ecdsa::signature::Verifier as _;
                let sig = p256::ecdsa::Signature::from_slice(&sig.bytes)
                    .map_err(|_| CryptoError::BadSignature)?;
                vk.verify(msg, &sig).map_err(|_| CryptoError::BadSignature)
            }
            _ => Err(CryptoError::SchemeMismatch),
        }
    }

    pub fn is_valid(&self, id: &ProcessId, msg: &[u8], sig: &Signature) -> bool {
        self.verify(id, msg, sig).is_ok()
    }
}

impl fmt::Debug for KeyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyRegistry")
            .field("scheme", &self.scheme)
            .field("entries", &self.entries.len())
            .finish()
    }
}

/// Shared read-only handle to a registry.
pub type SharedRegistry = Arc<KeyRegistry>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ClientId, NodeId};

    // Standard SHA-256 vector for the empty input, frozen from a reference
    // implementation.
    const EMPTY_SHA256: &str = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

    #[test]
    fn digest_matches_reference_vectors() {
        assert_eq!(digest(b"").to_hex(), EMPTY_SHA256);
        assert_eq!(
            digest(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn digest_is_deterministic_and_injective_on_samples() {
        assert_eq!(digest(b"x"), digest(b"x"));
        assert_ne!(digest(b"a"), digest(b"b"));
    }

    #[test]
    fn digest_parts_equals_concatenation() {
        assert_eq!(digest_parts(&[b"ab", b"c"]), digest(b"abc"));
    }

    fn round_trip(scheme: SchemeKind) {
        let mut reg = KeyRegistry::new(scheme, 7);
        let ka = reg.register(ProcessId::Node(NodeId(0)));
        let kb = reg.register(ProcessId::Client(ClientId::new("client-1")));

        let sig = ka.sign(b"hello");
        assert!(reg.is_valid(&ProcessId::Node(NodeId(0)), b"hello", &sig));
        // Wrong key.
        assert!(!reg.is_valid(&ProcessId::Client(ClientId::new("client-1")), b"hello", &sig));
        // Wrong message.
        assert!(!reg.is_valid(&ProcessId::Node(NodeId(0)), b"hell0", &sig));
        // Other key signs fine for itself.
        let sig_b = kb.sign(b"hello");
        assert!(reg.is_valid(&ProcessId::Client(ClientId::new("client-1")), b"hello", &sig_b));
    }

    #[test]
    fn test_scheme_round_trip() {
        round_trip(SchemeKind::Test);
    }

    #[test]
    fn ed25519_round_trip() {
        round_trip(SchemeKind::Ed25519);
    }

    #[test]
    fn ecdsa_p256_round_trip() {
        round_trip(SchemeKind::EcdsaP256);
    }

    #[test]
    fn unknown_key_is_reported() {
        let reg = KeyRegistry::new(SchemeKind::Test, 7);
        let sig = Signature { scheme: SchemeKind::Test, bytes: vec![0; 32] };
        assert!(matches!(
            reg.verify(&ProcessId::Node(NodeId(9)), b"m", &sig),
            Err(CryptoError::UnknownKey(_))
        ));
    }
}
