use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Indices into the positive and negative candidate pools for one
/// false-positive-reduction batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FpBatch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl FpBatch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw up to `batch` candidates, aiming for `1 : max_neg_ratio`
/// positives to negatives. When one pool runs short the other fills the
/// remaining slots, so scarce positives are padded out with negatives.
pub fn sample_fp_batch(
    n_pos: usize,
    n_neg: usize,
    batch: usize,
    max_neg_ratio: usize,
    rng: &mut impl Rng,
) -> Result<FpBatch> {
    if n_pos + n_neg == 0 || batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let target_pos = (batch / (1 + max_neg_ratio)).max(1);
    let mut take_pos = n_pos.min(target_pos);
    let take_neg = n_neg.min(batch - take_pos);
    take_pos = n_pos.min(batch - take_neg);
    let mut positives = sample(rng, n_pos, take_pos).into_vec();
    let mut negatives = sample(rng, n_neg, take_neg).into_vec();
    positives.sort_unstable();
    negatives.sort_unstable();
    Ok(FpBatch {
        positives,
        negatives,
    })
}
