use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::cv::{stratified_kfold, stratified_split};
use super::forest::{fit_forest, RandomForestModel};
use super::scaler::fit_scaler;
use super::search::{holdout_auc, randomized_search_rows};
use super::{MaxFeatures, RFHyperParams};
use crate::error::{Error, Result};
use crate::matrix::{with_workers, FeatureMatrix};
use crate::metrics::auc;
use crate::rng::derive_seed;
use crate::trace::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Randomized {
        n_iter: usize,
        inner_folds: usize,
    },
    /// Skip the search and use these hyperparameters in every fold.
    Fixed(RFHyperParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub outer_folds: usize,
    pub test_fraction: f64,
    pub search: SearchMode,
    /// Thread count; `None` uses the ambient rayon pool.
    pub workers: Option<usize>,
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            outer_folds: 5,
            test_fraction: 0.2,
            search: SearchMode::Randomized {
                n_iter: 20,
                inner_folds: 3,
            },
            workers: None,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_seed(420)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub hyperparams: RFHyperParams,
    /// Mean inner AUC of the chosen hyperparameters; absent in fixed mode.
    pub search_score: Option<f64>,
    pub validation_auc: f64,
    pub n_train: usize,
    pub n_validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub seed: u64,
    pub n_features: usize,
    pub folds: Vec<FoldResult>,
    pub fold_auc_mean: f64,
    /// Population standard deviation over folds.
    pub fold_auc_std: f64,
    pub modal_hyperparams: RFHyperParams,
    pub n_train: usize,
    pub n_test: usize,
    pub heldout_auc: f64,
    /// Ids of the held-out rows, in matrix order.
    pub test_ids: Vec<String>,
}

/// One use of a fitted scaler on rows other than its own training rows.
/// Indices are rows of the member/nonmember matrix the pipeline ran on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalerUse {
    pub fitted_on: Vec<usize>,
    pub applied_to: Vec<usize>,
}

impl ScalerUse {
    pub fn overlap(&self) -> Vec<usize> {
        let fitted: std::collections::HashSet<_> = self.fitted_on.iter().collect();
        self.applied_to
            .iter()
            .filter(|i| fitted.contains(i))
            .copied()
            .collect()
    }
}

/// Records every scaler fit/apply pair made during training.
#[derive(Debug, Default)]
pub struct LeakageLog {
    uses: Mutex<Vec<ScalerUse>>,
}

impl LeakageLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record(&self, fitted_on: &[usize], applied_to: &[usize]) {
        self.uses
            .lock()
            .expect("leakage log poisoned")
            .push(ScalerUse {
                fitted_on: fitted_on.to_vec(),
                applied_to: applied_to.to_vec(),
            });
    }

    pub fn uses(&self) -> Vec<ScalerUse> {
        self.uses.lock().expect("leakage log poisoned").clone()
    }
}

fn mode_by<T: Copy + PartialEq, K: Ord>(
    values: impl Iterator<Item = T>,
    key: impl Fn(&T) -> K,
) -> T {
    let mut counts: Vec<(T, usize)> = Vec::new();
    for v in values {
        match counts.iter_mut().find(|(u, _)| *u == v) {
            Some((_, c)) => *c += 1,
            None => counts.push((v, 1)),
        }
    }
    // Highest count, then smallest key.
    counts
        .into_iter()
        .min_by(|(a, ca), (b, cb)| cb.cmp(ca).then_with(|| key(a).cmp(&key(b))))
        .expect("no values")
        .0
}

/// Most frequent value of each hyperparameter independently. Ties go to the
/// smaller value, or the earlier strategy in [`MaxFeatures::ALL`].
pub fn modal_hyperparams(all: &[RFHyperParams]) -> RFHyperParams {
    RFHyperParams {
        n_estimators: mode_by(all.iter().map(|h| h.n_estimators), |v| *v),
        max_depth: mode_by(all.iter().map(|h| h.max_depth), |v| *v),
        min_samples_split: mode_by(all.iter().map(|h| h.min_samples_split), |v| *v),
        min_samples_leaf: mode_by(all.iter().map(|h| h.min_samples_leaf), |v| *v),
        max_features: mode_by(all.iter().map(|h| h.max_features), |v: &MaxFeatures| *v),
    }
}

/// Nested cross-validation followed by a final fit.
///
/// Only member and nonmember rows are used. For each outer fold the scaler
/// is fitted on the fold's training rows, hyperparameters are searched on
/// them, and the fitted forest is scored on the fold's validation rows. The
/// final model uses the per-field modal hyperparameters and is trained on a
/// stratified 80% split, with AUC reported on the remaining 20%.
pub fn train_pipeline(
    matrix: &FeatureMatrix,
    config: &PipelineConfig,
) -> Result<(RandomForestModel, CVReport)> {
    train_pipeline_audited(matrix, config, &LeakageLog::new())
}

/// [`train_pipeline`], recording every scaler application in `log`.
pub fn train_pipeline_audited(
    matrix: &FeatureMatrix,
    config: &PipelineConfig,
    log: &LeakageLog,
) -> Result<(RandomForestModel, CVReport)> {
    let data = matrix.filter_labels(&[Label::Member, Label::Nonmember]);
    if data.is_empty() || data.n_features() == 0 {
        return Err(Error::EmptyDataset);
    }
    for (row, id) in data.rows.iter().zip(&data.ids) {
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeature {
                feature: data.names[c].clone(),
                trace: id.clone(),
            });
        }
    }
    if let SearchMode::Fixed(hp) = &config.search {
        hp.validate()?;
    }
    let labels: Vec<u8> = data
        .labels
        .iter()
        .map(|&l| u8::from(l == Label::Member))
        .collect();
    with_workers(config.workers, || run(&data, &labels, config, log))?
}

fn run(
    data: &FeatureMatrix,
    labels: &[u8],
    config: &PipelineConfig,
    log: &LeakageLog,
) -> Result<(RandomForestModel, CVReport)> {
    let rows = &data.rows;
    let seed = config.seed;
    let folds = stratified_kfold(labels, config.outer_folds, derive_seed(seed, &[0]))?;
    let mut results = Vec::with_capacity(folds.len());
    for (k, validation) in folds.iter().enumerate() {
        let mut train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        let (hp, search_score) = match config.search {
            SearchMode::Fixed(hp) => (hp, None),
            SearchMode::Randomized {
                n_iter,
                inner_folds,
            } => {
                let s = randomized_search_rows(
                    rows,
                    labels,
                    &train,
                    n_iter,
                    inner_folds,
                    derive_seed(seed, &[1, k as u64]),
                    Some(log),
                )?;
                (s.best, Some(s.best_score))
            }
        };
        let validation_auc = holdout_auc(
            rows,
            labels,
            &train,
            validation,
            &hp,
            derive_seed(seed, &[2, k as u64]),
            Some(log),
        )?;
        results.push(FoldResult {
            fold: k,
            hyperparams: hp,
            search_score,
            validation_auc,
            n_train: train.len(),
            n_validation: validation.len(),
        });
    }

    let modal = modal_hyperparams(&results.iter().map(|r| r.hyperparams).collect::<Vec<_>>());
    let (train, test) = stratified_split(labels, config.test_fraction, derive_seed(seed, &[3]))?;
    let scaler = fit_scaler(rows, &train);
    let x = scaler.transform_columns(rows, &train);
    let y: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
    let forest_seed = derive_seed(seed, &[4]);
    let forest = fit_forest(&x, &y, &modal, forest_seed)?;
    log.record(&train, &test);
    let test_scores = forest.predict_columns(&scaler.transform_columns(rows, &test));
    let truth: Vec<bool> = test.iter().map(|&i| labels[i] == 1).collect();
    let heldout_auc = auc(&test_scores, &truth)?;

    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.validation_auc).sum::<f64>() / n;
    let var = results
        .iter()
        .map(|r| (r.validation_auc - mean).powi(2))
        .sum::<f64>()
        / n;
    let report = CVReport {
        seed,
        n_features: data.n_features(),
        folds: results,
        fold_auc_mean: mean,
        fold_auc_std: var.sqrt(),
        modal_hyperparams: modal,
        n_train: train.len(),
        n_test: test.len(),
        heldout_auc,
        test_ids: test.iter().map(|&i| data.ids[i].clone()).collect(),
    };
    let model = RandomForestModel {
        feature_names: data.names.clone(),
        scaler,
        hyperparams: modal,
        master_seed: forest_seed,
        forest,
    };
    Ok((model, report))
}
