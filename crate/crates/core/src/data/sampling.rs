//! Epoch index sequences, optionally class-balanced by random duplication.

use rand::seq::{IndexedRandom, SliceRandom};

use super::rng::{keyed_rng, Purpose};
use crate::error::{Error, Result};

/// Positions into `labels` for one epoch.
///
/// Disabled: a seeded permutation of `0..N`. Enabled: every class is brought
/// to `n_max` occurrences by keeping each of its samples once and drawing the
/// remainder with replacement, so the epoch has `C * n_max` entries; the
/// result is then shuffled globally.
pub fn oversample_indices(labels: &[usize], classes: usize, seed: u64, epoch: u64, enabled: bool) -> Result<Vec<usize>> {
    let mut rng = keyed_rng(seed, Purpose::Sampling, epoch, 0);
    if !enabled {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut rng);
        return Ok(idx);
    }
    let mut by_class = vec![Vec::new(); classes];
    for (row, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or(Error::LabelOutOfRange { row, label: l, classes })?
            .push(row);
    }
    if let Some(class) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::ZeroClassCount { class });
    }
    let n_max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut idx = Vec::with_capacity(classes * n_max);
    for members in &by_class {
        idx.extend_from_slice(members);
        for _ in members.len()..n_max {
            idx.push(*members.choose(&mut rng).expect("nonempty class"));
        }
    }
    idx.shuffle(&mut rng);
    Ok(idx)
}
