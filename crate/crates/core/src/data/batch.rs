use crate::rng::{derive_seed, SeededRng};

/// Batches of `items` for one epoch: a permutation seeded by
/// `(shuffle_seed, epoch)` cut into chunks of `batch_size`, with a final
/// short batch.
pub fn batch_iter(
    items: &[usize],
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order = items.to_vec();
    SeededRng::new(derive_seed(shuffle_seed, &[epoch])).shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
