//! Signatures, packet-set receipts and Merkle commitments.
//!
//! Probes are Ed25519 signatures over `(sequence number, m0)`. The prover
//! commits to what it received from each challenger with a SHA-256 receipt
//! over the canonical serialization of that challenger's packet set, and to
//! all receipts at once with a Merkle root.

mod merkle;

use std::collections::BTreeSet;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use merkle::{merkle_prove, merkle_root, merkle_verify, MerkleProof};

pub const SIGNATURE_LEN: usize = 64;
pub const DIGEST_LEN: usize = 32;
pub const KEY_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("seed must be {KEY_LEN} bytes, got {0}")]
    SeedLength(usize),
    #[error("duplicate sequence number {0} in packet set")]
    DuplicateSequence(u32),
    #[error("merkle tree needs at least one leaf")]
    EmptyTree,
    #[error("leaf index {index} out of range for {leaves} leaves")]
    IndexOutOfRange { index: usize, leaves: usize },
}

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn of(data: &[u8]) -> Self {
        Digest(Sha256::digest(data).into())
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

/// 64-byte Ed25519 signature as carried on the wire.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub const ZERO: Signature = Signature([0; SIGNATURE_LEN]);

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Signature)
    }
}

impl Default for Signature {
    fn default() -> Self {
        Signature::ZERO
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: String = self.0[..8].iter().map(|b| format!("{b:02x}")).collect();
        write!(f, "Signature({head}..)")
    }
}

/// Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; KEY_LEN]);

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: String = self.0[..8].iter().map(|b| format!("{b:02x}")).collect();
        write!(f, "PublicKey({head}..)")
    }
}

/// Signing key derived deterministically from a 32-byte seed.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    pub fn secret_seed(&self) -> [u8; KEY_LEN] {
        self.signing.to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(self, message)
    }
}

/// Derives a keypair from 32 bytes of entropy.
pub fn keygen(seed: &[u8]) -> Result<KeyPair, CryptoError> {
    let seed: [u8; KEY_LEN] = seed.try_into().map_err(|_| CryptoError::SeedLength(seed.len()))?;
    let signing = SigningKey::from_bytes(&seed);
    let public = PublicKey(signing.verifying_key().to_bytes());
    Ok(KeyPair { signing, public })
}

pub fn sign(keypair: &KeyPair, message: &[u8]) -> Signature {
    Signature(keypair.signing.sign(message).to_bytes())
}

/// Returns false for malformed keys or signatures instead of erroring.
pub fn verify(public_key: &PublicKey, message: &[u8], signature: &[u8]) -> bool {
    let Ok(sig) = <[u8; SIGNATURE_LEN]>::try_from(signature) else {
        return false;
    };
    let Ok(key) = VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    key.verify(message, &ed25519_dalek::Signature::from_bytes(&sig)).is_ok()
}

/// Message a challenger signs for signature sequence number `seq`.
pub fn probe_message(seq: u32, m0: &[u8; 32]) -> [u8; 36] {
    let mut msg = [0u8; 36];
    msg[..4].copy_from_slice(&seq.to_be_bytes());
    msg[4..].copy_from_slice(m0);
    msg
}

/// Message the prover signs in its response to one challenger.
pub fn response_message(receipt: &Digest, root: &Digest) -> [u8; 64] {
    let mut msg = [0u8; 64];
    msg[..32].copy_from_slice(&receipt.0);
    msg[32..].copy_from_slice(&root.0);
    msg
}

/// Receipt over a set of `(sequence number, signature)` entries.
///
/// Entries are sorted by sequence number and serialized as a 4-byte
/// big-endian sequence number followed by the 64 signature bytes.
pub fn hash_packet_set(entries: &[(u32, Signature)]) -> Result<Digest, CryptoError> {
    let mut sorted: Vec<&(u32, Signature)> = entries.iter().collect();
    sorted.sort_unstable_by_key(|(seq, _)| *seq);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CryptoError::DuplicateSequence(w[0].0));
    }
    let mut hasher = Sha256::new();
    for (seq, sig) in sorted {
        hasher.update(seq.to_be_bytes());
        hasher.update(sig.0);
    }
    Ok(Digest(hasher.finalize().into()))
}

/// Same as [`hash_packet_set`] for entries already known to be strictly
/// ascending, e.g. produced by iterating a `BTreeMap`.
pub(crate) fn hash_sorted_entries<'a>(entries: impl IntoIterator<Item = (u32, &'a Signature)>) -> Digest {
    let mut hasher = Sha256::new();
    let mut last: Option<u32> = None;
    for (seq, sig) in entries {
        debug_assert!(last.map_or(true, |l| l < seq), "entries not strictly ascending");
        last = Some(seq);
        hasher.update(seq.to_be_bytes());
        hasher.update(sig.0);
    }
    Digest(hasher.finalize().into())
}

/// Checks that sequence numbers are unique; used by decoders.
pub(crate) fn unique_sequences(entries: &[(u32, Signature)]) -> bool {
    let mut seen = BTreeSet::new();
    entries.iter().all(|(seq, _)| seen.insert(*seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(byte: u8) -> KeyPair {
        keygen(&[byte; 32]).unwrap()
    }

    #[test]
    fn keygen_is_deterministic() {
        assert_eq!(kp(1).public_key(), kp(1).public_key());
        assert_ne!(kp(1).public_key(), kp(2).public_key());
    }

    #[test]
    fn keygen_rejects_bad_seed_length() {
        assert_eq!(keygen(&[0u8; 31]).unwrap_err(), CryptoError::SeedLength(31));
        assert!(keygen(&[0u8; 33]).is_err());
    }

    #[test]
    fn random_seeds_give_distinct_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = BTreeSet::new();
        for _ in 0..50 {
            let mut seed = [0u8; 32];
            rng.fill_bytes(&mut seed);
            assert!(seen.insert(keygen(&seed).unwrap().public_key().0));
        }
    }

    #[test]
    fn sign_verify_round_trip_random_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keys = kp(3);
        for _ in 0..100 {
            let len = rng.gen_range(0..200);
            let msg: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let sig = keys.sign(&msg);
            assert!(verify(&keys.public_key(), &msg, &sig.0));
        }
    }

    #[test]
    fn verify_rejects_wrong_key_message_and_truncation() {
        let keys = kp(4);
        let sig = keys.sign(b"probe");
        assert!(!verify(&kp(5).public_key(), b"probe", &sig.0));
        assert!(!verify(&keys.public_key(), b"probf", &sig.0));
        assert!(!verify(&keys.public_key(), b"probe", &sig.0[..63]));
    }

    #[test]
    fn every_single_bit_flip_breaks_signature() {
        let keys = kp(6);
        let msg = probe_message(5, &[9; 32]);
        let sig = keys.sign(&msg);
        for bit in 0..SIGNATURE_LEN * 8 {
            let mut bad = sig;
            bad.0[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&keys.public_key(), &msg, &bad.0), "bit {bit}");
        }
    }

    #[test]
    fn empty_packet_set_hashes_empty_string() {
        assert_eq!(
            hash_packet_set(&[]).unwrap().to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn packet_set_matches_external_sha256() {
        // Frozen from Python hashlib over the hand-built serialization.
        let mut ramp = [0u8; 64];
        ramp.iter_mut().enumerate().for_each(|(i, b)| *b = i as u8);
        let entries =
            [(7, Signature([0x11; 64])), (2, Signature([0x22; 64])), (40, Signature(ramp))];
        assert_eq!(
            hash_packet_set(&entries).unwrap().to_hex(),
            "96de06b8c7c3c72b963b3249348b4023fa089d1db5ea440b34160f3b17c8edf8"
        );
    }

    #[test]
    fn packet_set_rejects_duplicates() {
        let entries = [(3, Signature::ZERO), (3, Signature([1; 64]))];
        assert_eq!(hash_packet_set(&entries), Err(CryptoError::DuplicateSequence(3)));
        assert!(!unique_sequences(&entries));
    }

    #[test]
    fn sorted_entry_hash_matches_public_function() {
        let entries = [(1, Signature([1; 64])), (4, Signature([4; 64]))];
        let direct = hash_sorted_entries(entries.iter().map(|(s, g)| (*s, g)));
        assert_eq!(direct, hash_packet_set(&entries).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::BTreeMap;

        fn entry_set() -> impl Strategy<Value = Vec<(u32, Signature)>> {
            proptest::collection::btree_map(any::<u32>(), any::<[u8; 32]>(), 0..20).prop_map(|m: BTreeMap<u32, [u8; 32]>| {
                m.into_iter()
                    .map(|(seq, half)| {
                        let mut sig = [0u8; 64];
                        sig[..32].copy_from_slice(&half);
                        sig[32..].copy_from_slice(&half);
                        (seq, Signature(sig))
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn packet_set_hash_is_order_invariant(entries in entry_set(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let mut shuffled = entries.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(hash_packet_set(&entries).unwrap(), hash_packet_set(&shuffled).unwrap());
            }
        }
    }
}
