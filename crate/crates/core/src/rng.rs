//! Named, independent random streams derived from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream keyed by `(master, labels...)`. Distinct label paths give
/// independent streams; the same path always gives the same stream.
pub fn stream(master: u64, labels: &[&str]) -> Rng {
    Rng::from_seed(derive(master, labels))
}

/// Derive a 64-bit seed for a sub-component, e.g. a mask draw.
pub fn sub_seed(master: u64, labels: &[&str]) -> u64 {
    let d = derive(master, labels);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn derive(master: u64, labels: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    h.finalize().into()
}
