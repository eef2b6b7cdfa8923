use rand::SeedableRng;

use crate::datagen::generate::sample_indices;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng::Rng;

/// Masked view of one modality's token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedView<T> {
    /// Unmasked rows, in their original order.
    pub visible: Tensor<T>,
    pub visible_idx: Vec<usize>,
    /// Sorted masked row indices.
    pub masked_idx: Vec<usize>,
}

/// Number of rows masked at `ratio` out of `tokens`: `ceil(ratio * tokens)`.
/// A small slack absorbs representation error, so 0.7 * 10 masks 7 rows.
pub fn masked_count(ratio: f64, tokens: usize) -> usize {
    let x = ratio * tokens as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(tokens)
}

pub fn mask_view<T: Real>(tokens: &Tensor<T>, ratio: f64, seed: u64) -> Result<MaskedView<T>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n = tokens.rows();
    let mut rng = Rng::seed_from_u64(seed);
    let masked_idx = sample_indices(&mut rng, n, masked_count(ratio, n));
    let visible_idx: Vec<usize> = (0..n).filter(|i| masked_idx.binary_search(i).is_err()).collect();
    Ok(MaskedView {
        visible: tokens.select_rows(&visible_idx),
        visible_idx,
        masked_idx,
    })
}
