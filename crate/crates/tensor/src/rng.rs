use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one generator type used for initialization and data synthesis.
pub type UmeRng = ChaCha8Rng;

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn seeded(seed: u64, stream: u64) -> UmeRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
