// SPDX-License-Identifier: Apache-2.0

//! Cryptographic capability bundle used by the monitor, peripherals and the
//! remote verifier.
//!
//! Two providers ship with the crate:
//!
//! * [`Ed25519Sha3`] signs with Ed25519 and hashes with SHA3-256.
//! * [`KeyedHashProvider`] is a deterministic stand-in whose "signature" is a
//!   secret-keyed SHA3 MAC followed by the signer's public key. Verification
//!   looks the secret up in the provider's key registry, so only keys minted
//!   by the same provider instance verify.
//!
//! Both hash with SHA3-256 and both draw randomness from a seeded ChaCha20
//! stream, so every run with the same seed is reproducible.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Serialize, Serializer};
use sha3::{Digest as _, Sha3_256};

macro_rules! byte_newtype {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn from_slice(b: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(b).ok().map($name)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), hex::encode(&self.0[..8]))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }
    };
}

byte_newtype!(Digest, 32);
byte_newtype!(PublicKey, 32);
byte_newtype!(Signature, 64);

/// Secret half of a key pair. Deliberately not `Serialize` and its `Debug`
/// output is redacted so it cannot leak into traces.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub(crate) [u8; 32]);

impl SecretKey {
    pub fn expose(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

pub trait CryptoProvider: Send {
    fn name(&self) -> &'static str;
    fn hash(&self, data: &[u8]) -> Digest;
    fn keygen(&mut self, seed: &[u8]) -> KeyPair;
    fn sign(&self, secret: &SecretKey, msg: &[u8]) -> Signature;
    fn verify(&self, public: &PublicKey, msg: &[u8], sig: &Signature) -> bool;
    fn random(&mut self, n: usize) -> Vec<u8>;
}

pub fn sha3_256(data: &[u8]) -> Digest {
    Digest(Sha3_256::digest(data).into())
}

fn sha3_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha3_256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn draw(rng: &mut ChaCha20Rng, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rng.fill_bytes(&mut v);
    v
}

pub struct Ed25519Sha3 {
    rng: ChaCha20Rng,
}

impl Ed25519Sha3 {
    pub fn new(seed: u64) -> Self {
        Ed25519Sha3 { rng: seeded_rng(seed) }
    }
}

impl CryptoProvider for Ed25519Sha3 {
    fn name(&self) -> &'static str {
        "ed25519-sha3"
    }

    fn hash(&self, data: &[u8]) -> Digest {
        sha3_256(data)
    }

    fn keygen(&mut self, seed: &[u8]) -> KeyPair {
        let secret = sha3_parts(&[b"pie-keygen", seed]);
        let sk = SigningKey::from_bytes(&secret);
        KeyPair { public: PublicKey(sk.verifying_key().to_bytes()), secret: SecretKey(secret) }
    }

    fn sign(&self, secret: &SecretKey, msg: &[u8]) -> Signature {
        Signature(SigningKey::from_bytes(&secret.0).sign(msg).to_bytes())
    }

    fn verify(&self, public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        match VerifyingKey::from_bytes(&public.0) {
            Ok(vk) => vk.verify(msg, &ed25519_dalek::Signature::from_bytes(&sig.0)).is_ok(),
            Err(_) => false,
        }
    }

    fn random(&mut self, n: usize) -> Vec<u8> {
        draw(&mut self.rng, n)
    }
}

/// Deterministic keyed-hash signature provider.
///
/// `sign(sk, m) = SHA3("pie-mac" || sk || m) || pk(sk)` and
/// `pk(sk) = SHA3("pie-pk" || sk)`.
pub struct KeyedHashProvider {
    rng: ChaCha20Rng,
    registry: BTreeMap<PublicKey, [u8; 32]>,
}

impl KeyedHashProvider {
    pub fn new(seed: u64) -> Self {
        KeyedHashProvider { rng: seeded_rng(seed), registry: BTreeMap::new() }
    }

    fn public_of(secret: &[u8; 32]) -> PublicKey {
        PublicKey(sha3_parts(&[b"pie-pk", secret]))
    }

    fn mac(secret: &[u8; 32], msg: &[u8]) -> [u8; 32] {
        sha3_parts(&[b"pie-mac", secret, msg])
    }
}

impl CryptoProvider for KeyedHashProvider {
    fn name(&self) -> &'static str {
        "keyed-hash"
    }

    fn hash(&self, data: &[u8]) -> Digest {
        sha3_256(data)
    }

    fn keygen(&mut self, seed: &[u8]) -> KeyPair {
        let secret = sha3_parts(&[b"pie-keygen", seed]);
        let public = Self::public_of(&secret);
        self.registry.insert(public, secret);
        KeyPair { public, secret: SecretKey(secret) }
    }

    fn sign(&self, secret: &SecretKey, msg: &[u8]) -> Signature {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&Self::mac(&secret.0, msg));
        out[32..].copy_from_slice(&Self::public_of(&secret.0).0);
        Signature(out)
    }

    fn verify(&self, public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        if sig.0[32..] != public.0 {
            return false;
        }
        match self.registry.get(public) {
            Some(secret) => sig.0[..32] == Self::mac(secret, msg),
            None => false,
        }
    }

    fn random(&mut self, n: usize) -> Vec<u8> {
        draw(&mut self.rng, n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProviderKind {
    #[default]
    Ed25519Sha3,
    KeyedHash,
}

impl ProviderKind {
    pub fn build(self, seed: u64) -> Box<dyn CryptoProvider> {
        match self {
            ProviderKind::Ed25519Sha3 => Box::new(Ed25519Sha3::new(seed)),
            ProviderKind::KeyedHash => Box::new(KeyedHashProvider::new(seed)),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ed25519-sha3" | "ed25519" => Some(ProviderKind::Ed25519Sha3),
            "keyed-hash" | "mac" => Some(ProviderKind::KeyedHash),
            _ => None,
        }
    }
}
