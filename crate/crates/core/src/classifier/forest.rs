use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scaler::{Columns, ScalerParams};
use super::tree::{check_training_set, fit_weighted, DecisionTree, Presorted};
use super::RFHyperParams;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Bagged trees without the scaler; inputs are already standardized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
}

/// Fits `hp.n_estimators` trees, each on a bootstrap sample of the rows.
/// Tree `i` draws from `rng_for(seed, [i])`, so the result does not depend
/// on how many threads run the fit.
pub fn fit_forest(x: &Columns, y: &[u8], hp: &RFHyperParams, seed: u64) -> Result<Forest> {
    check_training_set(x, y)?;
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::SingleClass);
    }
    let pre = Presorted::new(x);
    let n = x.n_rows;
    let trees = (0..hp.n_estimators)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, &[i as u64]);
            let mut weights = vec![0u32; n];
            for _ in 0..n {
                weights[rng.random_range(0..n)] += 1;
            }
            fit_weighted(x, y, &pre, &weights, hp, &mut rng)
        })
        .collect();
    Ok(Forest { trees })
}

impl Forest {
    /// Mean of the per-tree leaf proportions.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_proba(x)).sum();
        sum / self.trees.len() as f64
    }

    pub fn predict_columns(&self, x: &Columns) -> Vec<f64> {
        (0..x.n_rows)
            .map(|i| self.predict_proba(&x.row(i)))
            .collect()
    }

    pub fn feature_importances(&self) -> Vec<f64> {
        feature_importances(&self.trees)
    }
}

/// Impurity-decrease importances averaged over trees and normalized to sum
/// to 1 (uniform if no tree ever split).
pub fn feature_importances(trees: &[DecisionTree]) -> Vec<f64> {
    let f = trees.first().map_or(0, |t| t.n_features);
    let mut acc = vec![0.0; f];
    for t in trees {
        for (a, v) in acc.iter_mut().zip(t.raw_importances()) {
            *a += v;
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        acc.iter().map(|a| a / total).collect()
    } else {
        vec![1.0 / f as f64; f]
    }
}

/// A trained classifier: scaler, hyperparameters and trees, applied to raw
/// feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub feature_names: Vec<String>,
    pub scaler: ScalerParams,
    pub hyperparams: RFHyperParams,
    pub master_seed: u64,
    pub forest: Forest,
}

impl RandomForestModel {
    /// Membership probability for one raw feature row.
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        self.forest.predict_proba(&self.scaler.transform_row(row))
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.par_iter().map(|r| self.predict_proba(r)).collect()
    }

    pub fn feature_importances(&self) -> Vec<(String, f64)> {
        self.feature_names
            .iter()
            .cloned()
            .zip(self.forest.feature_importances())
            .collect()
    }

    /// Checks that `names` match the training columns exactly.
    pub fn check_columns(&self, names: &[String]) -> Result<()> {
        if names != self.feature_names.as_slice() {
            let first = names
                .iter()
                .zip(&self.feature_names)
                .position(|(a, b)| a != b)
                .unwrap_or(names.len().min(self.feature_names.len()));
            return Err(Error::Shape(format!(
                "feature columns differ from the model's at column {first} ({} vs {} columns)",
                names.len(),
                self.feature_names.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .map_err(Error::from)
            .and_then(|f| Ok(serde_json::to_writer(std::io::BufWriter::new(f), self)?))
            .map_err(|e| e.in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::File::open(path)
            .map_err(Error::from)
            .and_then(|f| Ok(serde_json::from_reader(std::io::BufReader::new(f))?))
            .map_err(|e| e.in_file(path))
    }
}
