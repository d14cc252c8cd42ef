use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_for;

fn class_indices(labels: &[u8]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        out[usize::from(y == 1)].push(i);
    }
    out
}

/// Splits row indices into `k` folds whose class counts differ by at most
/// one. Each class is shuffled and dealt round-robin, continuing the deal
/// where the previous class stopped. Folds are returned sorted.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    let classes = class_indices(labels);
    for (class, idx) in classes.iter().enumerate() {
        if idx.len() < k {
            return Err(Error::ClassTooSmall {
                class: class as u8,
                count: idx.len(),
                k,
            });
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for (class, mut idx) in classes.into_iter().enumerate() {
        idx.shuffle(&mut rng_for(seed, &[class as u64]));
        for (j, i) in idx.iter().enumerate() {
            folds[(offset + j) % k].push(*i);
        }
        offset += idx.len();
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Stratified train/test split; each class puts `round(test_fraction · count)`
/// rows (at least one, and never all of them) in the test set.
pub fn stratified_split(
    labels: &[u8],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in class_indices(labels).into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::ClassTooSmall {
                class: class as u8,
                count: idx.len(),
                k: 2,
            });
        }
        idx.shuffle(&mut rng_for(seed, &[class as u64]));
        let n_test = ((test_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
