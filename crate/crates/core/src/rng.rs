//! Named, independently seeded random streams.
//!
//! Each consumer (data cropping, guidance dropout, initialization, ...) draws
//! from its own stream seeded by `sha256(seed || name)`, so enabling or
//! resizing one consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

fn digest(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    ChaCha8Rng::from_seed(digest(seed, name))
}

/// A 64-bit child seed, for handing to APIs that take a plain seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let d = digest(seed, name);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
