//! Counter-based derivation of per-replicate random streams.
//!
//! Every replicate draws from its own ChaCha stream whose key is a SHA-256
//! digest of the master seed, a scenario fingerprint and the replicate
//! index. The stream of replicate `r` therefore does not depend on how many
//! other replicates ran before it or on which thread it ran.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Seed material for replicate `replicate` of the scenario identified by
/// `fingerprint`.
pub fn replicate_seed(master_seed: u64, fingerprint: &str, replicate: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"swcrt-replicate-v1");
    hasher.update(master_seed.to_le_bytes());
    hasher.update((fingerprint.len() as u64).to_le_bytes());
    hasher.update(fingerprint.as_bytes());
    hasher.update(replicate.to_le_bytes());
    hasher.finalize().into()
}

pub fn replicate_rng(master_seed: u64, fingerprint: &str, replicate: u64) -> SimRng {
    SimRng::from_seed(replicate_seed(master_seed, fingerprint, replicate))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
