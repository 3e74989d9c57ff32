//! Named, independent random streams derived from one run seed.
//!
//! Every consumer of randomness (masking, meta-dropout, augmentation,
//! shuffling, initialization) draws from its own stream so enabling one
//! feature never shifts another feature's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const MASK: &str = "mask";
pub const META_DROPOUT: &str = "meta-dropout";
pub const AUGMENT: &str = "augment";
pub const SHUFFLE: &str = "shuffle";
pub const INIT: &str = "init";

/// 64-bit stable digest of a label.
pub fn label_hash(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Stream `name` of run `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(name));
    rng
}

/// Bundle of the per-feature streams used by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRngs {
    pub mask: StreamRng,
    pub meta_dropout: StreamRng,
}

impl ForwardRngs {
    pub fn new(seed: u64) -> Self {
        Self { mask: stream(seed, MASK), meta_dropout: stream(seed, META_DROPOUT) }
    }
}
