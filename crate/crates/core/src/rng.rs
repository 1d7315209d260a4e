//! Deterministic random streams derived from a single seed.
//!
//! Every consumer draws from its own `(seed, stream, index)` generator, so the
//! values it sees do not depend on how much randomness anyone else consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    LatentD = 2,
    LatentG = 3,
    DataGen = 4,
    Shuffle = 5,
    Sample = 6,
    Test = 7,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ stream as u64) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |s, st, i| stream_rng(s, st, i).random::<u64>();
        assert_eq!(draw(1, Stream::Init, 0), draw(1, Stream::Init, 0));
        assert_ne!(draw(1, Stream::Init, 0), draw(2, Stream::Init, 0));
        assert_ne!(draw(1, Stream::Init, 0), draw(1, Stream::Shuffle, 0));
        assert_ne!(draw(1, Stream::Init, 0), draw(1, Stream::Init, 1));
    }
}
