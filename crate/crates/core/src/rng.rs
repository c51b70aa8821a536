//! Named random streams derived from one root seed.
//!
//! Each consumer (shuffling, initialisation, time sampling, modulation,
//! dropout) owns an independent ChaCha stream, so switching one component
//! off does not shift the random numbers seen by the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Derives a reproducible generator for `(root, name)`.
pub fn stream(root: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// The generators owned by a training run. Serialised into checkpoints so a
/// resumed run continues the exact same random sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRngs {
    pub shuffle: ChaCha8Rng,
    pub time: ChaCha8Rng,
    pub modulation: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(root: u64) -> Self {
        Self {
            shuffle: stream(root, "data-shuffle"),
            time: stream(root, "t-sampling"),
            modulation: stream(root, "modulation"),
            dropout: stream(root, "dropout"),
        }
    }
}
