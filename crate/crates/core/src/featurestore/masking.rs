use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MASK_RATIO: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedQuery {
    pub token_ids_with_mask: Vec<u32>,
    /// Ascending.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`, in the same order.
    pub gold_ids: Vec<u32>,
}

/// `max(1, floor(n·ratio))`, capped at `n`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    let k = (n as f64 * ratio + 1e-9).floor() as usize;
    k.max(1).min(n)
}

/// Masks `mask_count(N, ratio)` distinct positions drawn uniformly without
/// replacement. The mask sentinel is `mask_id` (by convention the last
/// vocabulary id).
pub fn mask_query(token_ids: &[u32], ratio: f64, seed: u64, mask_id: u32) -> Result<MaskedQuery> {
    if token_ids.is_empty() {
        return Err(Error::Invalid("cannot mask an empty query".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let n = token_ids.len();
    let k = mask_count(n, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let positions: BTreeSet<usize> = order[..k].iter().copied().collect();
    let mask_positions: Vec<usize> = positions.into_iter().collect();
    let gold_ids = mask_positions.iter().map(|&p| token_ids[p]).collect();
    let mut token_ids_with_mask = token_ids.to_vec();
    for &p in &mask_positions {
        token_ids_with_mask[p] = mask_id;
    }
    Ok(MaskedQuery {
        token_ids_with_mask,
        mask_positions,
        gold_ids,
    })
}
