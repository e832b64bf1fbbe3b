// SPDX-License-Identifier: Apache-2.0

//! Seeded random streams.
//!
//! Every independent unit of work (an instance, a tile, a sampling attempt)
//! draws from its own ChaCha stream keyed by `(seed, stream)`, so results do
//! not depend on the order or parallelism in which units are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream namespaces, so unrelated consumers of one seed never collide.
pub mod domain {
    pub const LIBRARY: u64 = 1 << 56;
    pub const INSTANCE: u64 = 2 << 56;
    pub const TILE: u64 = 3 << 56;
    pub const SWAPS: u64 = 4 << 56;
    pub const ORIENTATION: u64 = 5 << 56;
}
