//! Seed derivation. Every random stream in a run is derived from the master
//! seed plus a domain label and indices, so streams never depend on thread
//! scheduling or on how many draws another component made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, domain: &str, indices: &[u64]) -> u64 {
    let digest = derive_bytes(master, domain, indices);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn derive_bytes(master: u64, domain: &str, indices: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"pqfl/seed/v1");
    h.update(master.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, domain: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_bytes(master, domain, indices))
}
