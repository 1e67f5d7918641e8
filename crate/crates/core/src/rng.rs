//! Named, counter-addressed random substreams.
//!
//! Every random draw in the pipeline comes from `substream(seed, name, index)`.
//! The stream key is derived by hashing the run seed with the stream name, and
//! `index` selects a ChaCha stream, so item `k` of a stream can be produced
//! without generating items `0..k` first. Serial and parallel generation agree
//! bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
