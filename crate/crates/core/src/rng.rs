//! Named, reproducible random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a master seed
//! plus a label and an index, so that results never depend on the order in which
//! independent parties draw numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Derive a stream for `(seed, label, indices...)`.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> SimRng {
    SimRng::from_seed(derive_bytes(seed, label, indices))
}

/// Derive a 64-bit sub-seed, e.g. the data seed from the master seed.
pub fn derive_seed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let bytes = derive_bytes(seed, label, indices);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

fn derive_bytes(seed: u64, label: &str, indices: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"dfloc-rng");
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}
