//! Authenticated sealing of secret bytes at rest.
//!
//! Private keys, card secrets, and SAM master keys never touch disk in the
//! clear. Anything persisted wraps them through this module: ChaCha20-
//! Poly1305 with a random 12-byte nonce prepended to the ciphertext. The
//! associated-data label binds a blob to its context so a sealed card
//! secret cannot be replayed as, say, an escrow blob.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use rand::RngCore;

use crate::error::Error;
use crate::Result;

pub const NONCE_LEN: usize = 12;

pub fn seal(key: &[u8; 32], rng: &mut dyn RngCore, plaintext: &[u8], label: &[u8]) -> Result<Vec<u8>> {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(key.into());
    let ct = cipher
        .encrypt((&nonce).into(), Payload { msg: plaintext, aad: label })
        .map_err(|_| Error::SealedDataInvalid)?;
    let mut out = nonce.to_vec();
    out.extend_from_slice(&ct);
    Ok(out)
}

pub fn open(key: &[u8; 32], sealed: &[u8], label: &[u8]) -> Result<Vec<u8>> {
    if sealed.len() < NONCE_LEN {
        return Err(Error::SealedDataInvalid);
    }
    let (nonce, ct) = sealed.split_at(NONCE_LEN);
    let nonce: [u8; NONCE_LEN] = nonce.try_into().unwrap();
    let cipher = ChaCha20Poly1305::new(key.into());
    cipher
        .decrypt((&nonce).into(), Payload { msg: ct, aad: label })
        .map_err(|_| Error::SealedDataInvalid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn round_trip_and_tamper_rejection() {
        let key = [7u8; 32];
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sealed = seal(&key, &mut rng, b"secret key material", b"ctx").unwrap();
        assert_eq!(open(&key, &sealed, b"ctx").unwrap(), b"secret key material");
        // Plaintext must not be visible in the sealed form.
        assert!(!sealed.windows(10).any(|w| w == &b"secret key"[..]));
        for i in 0..sealed.len() {
            let mut bad = sealed.clone();
            bad[i] ^= 0x40;
            assert!(open(&key, &bad, b"ctx").is_err(), "tamper at byte {i} accepted");
        }
        assert!(open(&key, &sealed, b"other-ctx").is_err());
        assert!(open(&[8u8; 32], &sealed, b"ctx").is_err());
        assert!(open(&key, &sealed[..4], b"ctx").is_err());
    }
}
