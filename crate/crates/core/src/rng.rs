//! Reproducible random streams.
//!
//! Every random draw in the simulator comes from ChaCha8, a counter-based
//! generator. The 256-bit key is built from the user seed and a subsystem
//! tag; the 64-bit ChaCha stream id is the block index. Any
//! `(seed, subsystem, block)` triple can therefore be regenerated on its own,
//! in any order or concurrently, and always yields the same sequence.
//!
//! Key layout (little endian): bytes 0..8 seed, 8..16 subsystem tag,
//! 16..32 the ASCII constant `decoy-qkd/v1\0\0\0\0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as SimRng;

/// Independent consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Source = 1,
    Detection = 2,
    Clock = 3,
    Sifting = 4,
    Aggregate = 5,
}

const DOMAIN: &[u8; 16] = b"decoy-qkd/v1\0\0\0\0";

/// Generator for one block of one subsystem.
pub fn block_rng(seed: u64, stream: Stream, block_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..].copy_from_slice(DOMAIN);
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(block_index);
    rng
}
