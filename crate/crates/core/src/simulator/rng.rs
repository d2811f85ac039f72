//! Seeded substreams. Every random draw in the simulator comes from a ChaCha
//! stream keyed by `(master seed, scene index, purpose)`, so results do not
//! depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Scene = 1,
    AnchorNoise = 2,
    SharedNoise = 3,
    SparseQueries = 4,
    SampledAnchors = 5,
    GradientChecks = 6,
}

pub fn substream(seed: u64, scene: u64, purpose: Purpose) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream((scene << 8) | purpose as u64);
    rng
}
