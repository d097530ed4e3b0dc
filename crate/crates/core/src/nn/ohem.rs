//! Online hard negative mining.

use rand::seq::index::sample;
use rand::Rng;

/// Sample `m` negatives uniformly (all of them when fewer are available) and
/// keep the `k` with the highest classification score. Returned indices point
/// into `scores` and are ordered by descending score.
pub fn ohem_select(scores: &[f64], m: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let m = m.min(scores.len());
    let mut picked: Vec<usize> = if m == scores.len() {
        (0..m).collect()
    } else {
        let mut v = sample(rng, scores.len(), m).into_vec();
        v.sort_unstable();
        v
    };
    picked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    picked.truncate(k.min(m));
    picked
}
