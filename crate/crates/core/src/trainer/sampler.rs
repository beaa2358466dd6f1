use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffles `(image, text)` pairs with `seed` and cuts them into batches of
/// `batch_size`. A trailing batch with fewer than two pairs is dropped.
pub fn sample_batches(pairs: &[(usize, usize)], batch_size: usize, seed: u64) -> Vec<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled_batches(pairs, batch_size, &mut rng)
}

pub(crate) fn shuffled_batches(pairs: &[(usize, usize)], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let mut order = pairs.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(<[_]>::to_vec)
        .collect()
}
