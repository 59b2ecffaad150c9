use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Independent streams derived from one user seed.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Data = 1,
    TestData = 2,
    Split = 3,
    Corrupt = 4,
    Sampling = 5,
    Noise = 6,
}

pub(crate) fn stream(seed: u64, which: Stream) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
