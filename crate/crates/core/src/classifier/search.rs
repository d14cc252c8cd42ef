use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cv::stratified_kfold;
use super::forest::fit_forest;
use super::pipeline::LeakageLog;
use super::scaler::fit_scaler;
use super::{MaxFeatures, RFHyperParams};
use crate::error::Result;
use crate::metrics::auc;
use crate::rng::{derive_seed, rng_for};

pub const MIN_SAMPLES_SPLIT_CHOICES: [usize; 3] = [2, 5, 10];
pub const MIN_SAMPLES_LEAF_CHOICES: [usize; 3] = [1, 2, 4];

pub fn sample_hyperparams<R: Rng>(rng: &mut R) -> RFHyperParams {
    let (lo, hi) = RFHyperParams::N_ESTIMATORS;
    let (dlo, dhi) = RFHyperParams::MAX_DEPTH;
    RFHyperParams {
        n_estimators: rng.random_range(lo..=hi),
        max_depth: rng.random_range(dlo..=dhi),
        min_samples_split: MIN_SAMPLES_SPLIT_CHOICES[rng.random_range(0..3)],
        min_samples_leaf: MIN_SAMPLES_LEAF_CHOICES[rng.random_range(0..3)],
        max_features: MaxFeatures::ALL[rng.random_range(0..MaxFeatures::ALL.len())],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub hyperparams: RFHyperParams,
    /// Mean inner-fold validation AUC.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: RFHyperParams,
    pub best_score: f64,
    pub trials: Vec<Trial>,
}

/// Fits scaler and forest on `train`, returns the AUC on `validation`.
/// Indices refer to `rows`.
pub(crate) fn holdout_auc(
    rows: &[Vec<f64>],
    labels: &[u8],
    train: &[usize],
    validation: &[usize],
    hp: &RFHyperParams,
    seed: u64,
    audit: Option<&LeakageLog>,
) -> Result<f64> {
    let scaler = fit_scaler(rows, train);
    let x = scaler.transform_columns(rows, train);
    let y: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
    let forest = fit_forest(&x, &y, hp, seed)?;
    let xv = scaler.transform_columns(rows, validation);
    if let Some(log) = audit {
        log.record(train, validation);
    }
    let scores = forest.predict_columns(&xv);
    let truth: Vec<bool> = validation.iter().map(|&i| labels[i] == 1).collect();
    auc(&scores, &truth)
}

/// Randomized search over the hyperparameter space, scored by mean AUC
/// over `inner_folds` stratified folds of `subset` (indices into `rows`).
/// The scaler is refitted on each inner training fold. Ties keep the
/// earliest trial.
pub fn randomized_search_rows(
    rows: &[Vec<f64>],
    labels: &[u8],
    subset: &[usize],
    n_iter: usize,
    inner_folds: usize,
    seed: u64,
    audit: Option<&LeakageLog>,
) -> Result<SearchResult> {
    let sub_labels: Vec<u8> = subset.iter().map(|&i| labels[i]).collect();
    let folds: Vec<Vec<usize>> =
        stratified_kfold(&sub_labels, inner_folds, derive_seed(seed, &[0]))?
            .into_iter()
            .map(|f| f.into_iter().map(|j| subset[j]).collect())
            .collect();
    let mut rng = rng_for(seed, &[1]);
    let candidates: Vec<RFHyperParams> = (0..n_iter.max(1))
        .map(|_| sample_hyperparams(&mut rng))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|t| (0..folds.len()).map(move |f| (t, f)))
        .collect();
    let aucs = jobs
        .par_iter()
        .map(|&(t, f)| {
            let validation = &folds[f];
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let s = derive_seed(seed, &[2, t as u64, f as u64]);
            holdout_auc(rows, labels, &train, validation, &candidates[t], s, audit)
        })
        .collect::<Result<Vec<f64>>>()?;

    let trials: Vec<Trial> = candidates
        .iter()
        .enumerate()
        .map(|(t, hp)| Trial {
            hyperparams: *hp,
            score: aucs[t * folds.len()..(t + 1) * folds.len()]
                .iter()
                .sum::<f64>()
                / folds.len() as f64,
        })
        .collect();
    let mut best = 0;
    for (t, trial) in trials.iter().enumerate() {
        if trial.score > trials[best].score {
            best = t;
        }
    }
    Ok(SearchResult {
        best: trials[best].hyperparams,
        best_score: trials[best].score,
        trials,
    })
}

/// Randomized search on a whole training set with 3 inner folds.
pub fn randomized_search(
    x: &[Vec<f64>],
    y: &[u8],
    n_iter: usize,
    seed: u64,
) -> Result<SearchResult> {
    let all: Vec<usize> = (0..x.len()).collect();
    randomized_search_rows(x, y, &all, n_iter, 3, seed, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut strategies = std::collections::HashSet::new();
        for _ in 0..500 {
            let hp = sample_hyperparams(&mut rng);
            hp.validate().unwrap();
            assert!(MIN_SAMPLES_SPLIT_CHOICES.contains(&hp.min_samples_split));
            assert!(MIN_SAMPLES_LEAF_CHOICES.contains(&hp.min_samples_leaf));
            strategies.insert(hp.max_features);
        }
        assert_eq!(strategies.len(), 5);
    }

    #[test]
    fn single_iteration_returns_its_sample() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![i as f64, (i * 7 % 5) as f64])
            .collect();
        let y: Vec<u8> = (0..30).map(|i| u8::from(i >= 15)).collect();
        let r = randomized_search(&rows, &y, 1, 9).unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.best, sample_hyperparams(&mut rng_for(9, &[1])));
        assert_eq!(r.best_score, 1.0);
        assert_eq!(r, randomized_search(&rows, &y, 1, 9).unwrap());
    }
}
