//! Pluggable signature schemes.
//!
//! Production HSM algorithms are deliberately absent. A scheme here must be
//! deterministic (same key and message, same signature bytes) so that every
//! transcript in the system is reproducible under a fixed seed. Two schemes
//! ship by default:
//!
//! * `test-mac`: signature = SHA-256(private_key || message) with
//!   public_key == private_key. Symmetric, trivially forgeable by anyone
//!   holding the "public" key, and flagged as such. It exists so tests and
//!   oracles can run at full speed with zero key-setup cost.
//! * `ed25519`: RFC 8032 signatures via ed25519-dalek. Genuinely
//!   asymmetric, deterministic by construction. Default for real flows.
//!
//! `key_length_bits` on generated pairs is profile metadata carried into
//! certificates; it does not resize the underlying key material, whose
//! shape is fixed by each scheme.

use ed25519_dalek::{Signer, Verifier};
use rand::RngCore;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::Error;
use crate::seal;
use crate::Result;

/// A generated key pair. The private half never leaves this struct through
/// `Debug`, serde, or any crate encoding; persistence paths must seal it.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub scheme_id: String,
    pub key_length_bits: u32,
    pub public_key: Vec<u8>,
    private_key: Vec<u8>,
}

impl KeyPair {
    pub fn new(
        scheme_id: impl Into<String>,
        key_length_bits: u32,
        public_key: Vec<u8>,
        private_key: Vec<u8>,
    ) -> Self {
        Self { scheme_id: scheme_id.into(), key_length_bits, public_key, private_key }
    }

    /// Deliberately explicit accessor: call sites that touch the private
    /// half should be easy to grep.
    pub fn private_key_bytes(&self) -> &[u8] {
        &self.private_key
    }

    /// Canonical encoding including the private half. Callers must seal the
    /// result before it reaches a file or the wire.
    pub fn encode_secret(&self) -> Vec<u8> {
        crate::encoding::RecordBuilder::new()
            .str("scheme_id", &self.scheme_id)
            .u64("key_length_bits", u64::from(self.key_length_bits))
            .raw("public_key", self.public_key.clone())
            .raw("private_key", self.private_key.clone())
            .finish()
    }

    pub fn decode_secret(bytes: &[u8]) -> Result<Self> {
        let view = crate::encoding::RecordView::parse(bytes)?;
        Ok(Self {
            scheme_id: view.str("scheme_id")?,
            key_length_bits: u32::try_from(view.u64("key_length_bits")?)
                .map_err(|_| Error::MalformedEncoding("key length overflows u32".into()))?,
            public_key: view.raw("public_key")?.to_vec(),
            private_key: view.raw("private_key")?.to_vec(),
        })
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("scheme_id", &self.scheme_id)
            .field("key_length_bits", &self.key_length_bits)
            .field("public_key", &hex::encode(&self.public_key))
            .field("private_key", &"<redacted>")
            .finish()
    }
}

pub trait SignatureScheme: Send + Sync {
    fn id(&self) -> &'static str;

    /// True when the scheme must never leave a test bench.
    fn insecure_for_production(&self) -> bool;

    fn generate(&self, key_length_bits: u32, rng: &mut dyn RngCore) -> KeyPair;

    fn sign(&self, private_key: &[u8], message: &[u8]) -> Result<Vec<u8>>;

    /// Structural problems (wrong key length, garbage signature framing)
    /// report as a failed verification rather than an error: a verifier
    /// facing attacker-controlled bytes has no better answer than "no".
    fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool;

    /// Whether `encrypt`/`decrypt` work for this scheme.
    fn supports_encryption(&self) -> bool {
        false
    }

    fn encrypt(&self, _public_key: &[u8], _rng: &mut dyn RngCore, _plaintext: &[u8]) -> Result<Vec<u8>> {
        Err(Error::UnsupportedScheme(format!("{} cannot encrypt", self.id())))
    }

    fn decrypt(&self, _private_key: &[u8], _ciphertext: &[u8]) -> Result<Vec<u8>> {
        Err(Error::UnsupportedScheme(format!("{} cannot decrypt", self.id())))
    }
}

/// Registry of schemes by id.
#[derive(Clone)]
pub struct SchemeRegistry {
    schemes: BTreeMap<&'static str, Arc<dyn SignatureScheme>>,
}

impl SchemeRegistry {
    pub fn empty() -> Self {
        Self { schemes: BTreeMap::new() }
    }

    /// Registry with the two built-in schemes.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(TestMac));
        reg.register(Arc::new(Ed25519));
        reg
    }

    pub fn register(&mut self, scheme: Arc<dyn SignatureScheme>) {
        self.schemes.insert(scheme.id(), scheme);
    }

    pub fn get(&self, scheme_id: &str) -> Result<&dyn SignatureScheme> {
        self.schemes
            .get(scheme_id)
            .map(Arc::as_ref)
            .ok_or_else(|| Error::SchemeNotRegistered(scheme_id.to_string()))
    }

    pub fn generate_key_pair(
        &self,
        scheme_id: &str,
        key_length_bits: u32,
        rng: &mut dyn RngCore,
    ) -> Result<KeyPair> {
        if key_length_bits == 0 {
            return Err(Error::InvalidKeyLength("key_length_bits must be positive".into()));
        }
        Ok(self.get(scheme_id)?.generate(key_length_bits, rng))
    }
}

impl fmt::Debug for SchemeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.schemes.keys()).finish()
    }
}

/// Keyed-hash stand-in scheme: fast, symmetric, insecure on purpose.
pub struct TestMac;

pub const TEST_MAC: &str = "test-mac";
pub const ED25519: &str = "ed25519";

impl SignatureScheme for TestMac {
    fn id(&self) -> &'static str {
        TEST_MAC
    }

    fn insecure_for_production(&self) -> bool {
        true
    }

    fn generate(&self, key_length_bits: u32, rng: &mut dyn RngCore) -> KeyPair {
        let mut key = vec![0u8; 32];
        rng.fill_bytes(&mut key);
        KeyPair::new(TEST_MAC, key_length_bits, key.clone(), key)
    }

    fn sign(&self, private_key: &[u8], message: &[u8]) -> Result<Vec<u8>> {
        let mut h = Sha256::new();
        h.update(private_key);
        h.update(message);
        Ok(h.finalize().to_vec())
    }

    fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        match self.sign(public_key, message) {
            Ok(expected) => expected == signature,
            Err(_) => false,
        }
    }

    fn supports_encryption(&self) -> bool {
        true
    }

    // public_key == private_key, so sealing under a hash of the key is a
    // faithful box for this scheme's (non-)security level.
    fn encrypt(&self, public_key: &[u8], rng: &mut dyn RngCore, plaintext: &[u8]) -> Result<Vec<u8>> {
        seal::seal(&box_key(public_key), rng, plaintext, b"test-mac-box")
    }

    fn decrypt(&self, private_key: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>> {
        seal::open(&box_key(private_key), ciphertext, b"test-mac-box")
    }
}

fn box_key(key: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"test-mac-box-key");
    h.update(key);
    h.finalize().into()
}

/// RFC 8032 signatures over Curve25519.
pub struct Ed25519;

impl SignatureScheme for Ed25519 {
    fn id(&self) -> &'static str {
        ED25519
    }

    fn insecure_for_production(&self) -> bool {
        false
    }

    fn generate(&self, key_length_bits: u32, rng: &mut dyn RngCore) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let signing = ed25519_dalek::SigningKey::from_bytes(&seed);
        KeyPair::new(
            ED25519,
            key_length_bits,
            signing.verifying_key().to_bytes().to_vec(),
            seed.to_vec(),
        )
    }

    fn sign(&self, private_key: &[u8], message: &[u8]) -> Result<Vec<u8>> {
        let seed: &[u8; 32] = private_key
            .try_into()
            .map_err(|_| Error::MalformedEncoding("ed25519 private key must be 32 bytes".into()))?;
        let signing = ed25519_dalek::SigningKey::from_bytes(seed);
        Ok(signing.sign(message).to_bytes().to_vec())
    }

    fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        let Ok(key_bytes): std::result::Result<&[u8; 32], _> = public_key.try_into() else {
            return false;
        };
        let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(key_bytes) else {
            return false;
        };
        let Ok(sig_bytes): std::result::Result<&[u8; 64], _> = signature.try_into() else {
            return false;
        };
        key.verify(message, &ed25519_dalek::Signature::from_bytes(sig_bytes)).is_ok()
    }
}
