//! Seeded random substreams.
//!
//! All randomness flows from one config seed; each consumer gets a named
//! ChaCha stream so adding draws in one place never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_DATA: u64 = 1;
pub const STREAM_PROJECTIONS: u64 = 2;
pub const STREAM_BATCH: u64 = 3;
pub const STREAM_VERIFY: u64 = 4;
pub const STREAM_PAIRS: u64 = 5;

/// A generator on substream `stream` of base `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_independent_and_reproducible() {
        let a: f64 = substream(7, STREAM_DATA).gen();
        let b: f64 = substream(7, STREAM_DATA).gen();
        let c: f64 = substream(7, STREAM_BATCH).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
