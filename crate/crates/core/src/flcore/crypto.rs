//! Authenticated-encryption stub and the simulated attestation key store.
//!
//! [`HmacStreamCipher`] is encrypt-then-MAC: an HMAC-SHA256 counter-mode
//! keystream XORed over the payload, and an HMAC-SHA256 tag over
//! `(user, round, ciphertext)`. It satisfies the authenticate/reject
//! contract the enclave relies on; a real AEAD can implement
//! [`AuthenticatedCipher`] instead.

use std::collections::HashMap;

use hmac::{Hmac, Mac};
use rand::Rng;
use sha2::Sha256;

use crate::error::{Error, Result};

type HmacSha256 = Hmac<Sha256>;

pub type SharedKey = [u8; 32];

/// Ciphertext as it crosses the untrusted host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub user: u32,
    pub round: u64,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 32],
}

pub trait AuthenticatedCipher {
    fn seal(&self, key: &SharedKey, user: u32, round: u64, plaintext: &[u8]) -> Envelope;
    /// Fails with [`Error::AuthenticationFailure`] if the tag does not verify.
    fn open(&self, key: &SharedKey, envelope: &Envelope) -> Result<Vec<u8>>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct HmacStreamCipher;

fn mac(key: &SharedKey) -> HmacSha256 {
    <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length")
}

fn keystream_xor(key: &SharedKey, user: u32, round: u64, data: &mut [u8]) {
    for (counter, chunk) in data.chunks_mut(32).enumerate() {
        let mut m = mac(key);
        m.update(b"olive-ks");
        m.update(&user.to_le_bytes());
        m.update(&round.to_le_bytes());
        m.update(&(counter as u64).to_le_bytes());
        let block = m.finalize().into_bytes();
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
}

fn tag_mac(key: &SharedKey, user: u32, round: u64, ciphertext: &[u8]) -> HmacSha256 {
    let mut m = mac(key);
    m.update(b"olive-tag");
    m.update(&user.to_le_bytes());
    m.update(&round.to_le_bytes());
    m.update(ciphertext);
    m
}

impl AuthenticatedCipher for HmacStreamCipher {
    fn seal(&self, key: &SharedKey, user: u32, round: u64, plaintext: &[u8]) -> Envelope {
        let mut ciphertext = plaintext.to_vec();
        keystream_xor(key, user, round, &mut ciphertext);
        let tag = tag_mac(key, user, round, &ciphertext).finalize().into_bytes().into();
        Envelope { user, round, ciphertext, tag }
    }

    fn open(&self, key: &SharedKey, envelope: &Envelope) -> Result<Vec<u8>> {
        tag_mac(key, envelope.user, envelope.round, &envelope.ciphertext)
            .verify_slice(&envelope.tag)
            .map_err(|_| Error::AuthenticationFailure(envelope.user))?;
        let mut plaintext = envelope.ciphertext.clone();
        keystream_xor(key, envelope.user, envelope.round, &mut plaintext);
        Ok(plaintext)
    }
}

/// Per-user shared keys held inside the trusted region.
#[derive(Debug, Clone, Default)]
pub struct KeyStore {
    keys: HashMap<u32, SharedKey>,
}

impl KeyStore {
    /// Simulated attestation: registers a fresh random key for every user.
    pub fn provision<R: Rng + ?Sized>(users: u32, rng: &mut R) -> Self {
        let keys = (0..users).map(|u| (u, rng.gen())).collect();
        KeyStore { keys }
    }

    pub fn register(&mut self, user: u32, key: SharedKey) {
        self.keys.insert(user, key);
    }

    pub fn get(&self, user: u32) -> Option<&SharedKey> {
        self.keys.get(&user)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seal_open_roundtrip_and_tamper_detection() {
        let c = HmacStreamCipher;
        let key = [7u8; 32];
        let pt: Vec<u8> = (0..100).collect();
        let env = c.seal(&key, 3, 1, &pt);
        assert_ne!(env.ciphertext, pt);
        assert_eq!(c.open(&key, &env).unwrap(), pt);

        let mut flipped = env.clone();
        flipped.ciphertext[50] ^= 1;
        assert!(matches!(c.open(&key, &flipped), Err(Error::AuthenticationFailure(3))));

        let mut replayed = env.clone();
        replayed.round = 2;
        assert!(c.open(&key, &replayed).is_err());

        let mut other_user = env.clone();
        other_user.user = 4;
        assert!(c.open(&key, &other_user).is_err());

        assert!(c.open(&[8u8; 32], &env).is_err());
    }
}
