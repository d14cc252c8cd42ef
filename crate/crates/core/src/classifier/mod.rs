//! Random forest membership classifier with z-score standardization, nested
//! stratified cross-validation and randomized hyperparameter search.

mod cv;
mod forest;
mod pipeline;
mod scaler;
mod search;
mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cv::{stratified_kfold, stratified_split};
pub use forest::{feature_importances, fit_forest, Forest, RandomForestModel};
pub use pipeline::{
    modal_hyperparams, train_pipeline, train_pipeline_audited, CVReport, FoldResult, LeakageLog,
    PipelineConfig, ScalerUse, SearchMode,
};
pub use scaler::{fit_scaler, Columns, ScalerParams};
pub use search::{
    randomized_search, randomized_search_rows, sample_hyperparams, SearchResult, Trial,
    MIN_SAMPLES_LEAF_CHOICES, MIN_SAMPLES_SPLIT_CHOICES,
};
pub use tree::{fit_tree, gini, DecisionTree, TreeNode};

/// Per-node feature subsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    Sqrt,
    Log2,
    Frac30,
    Frac50,
    Frac80,
}

impl MaxFeatures {
    /// Declaration order; also the tie-break order for modal selection.
    pub const ALL: [MaxFeatures; 5] = [
        MaxFeatures::Sqrt,
        MaxFeatures::Log2,
        MaxFeatures::Frac30,
        MaxFeatures::Frac50,
        MaxFeatures::Frac80,
    ];

    /// Features considered at each node out of `n_features`, in `[1, n_features]`.
    pub fn count(self, n_features: usize) -> usize {
        let f = n_features;
        let k = match self {
            MaxFeatures::Sqrt => {
                let mut r = (f as f64).sqrt() as usize;
                while r * r < f {
                    r += 1;
                }
                r
            }
            MaxFeatures::Log2 => {
                // ceil(log2 f) without float error.
                let mut bits = 0;
                while (1usize << bits) < f {
                    bits += 1;
                }
                bits
            }
            MaxFeatures::Frac30 => (30 * f).div_ceil(100),
            MaxFeatures::Frac50 => (50 * f).div_ceil(100),
            MaxFeatures::Frac80 => (80 * f).div_ceil(100),
        };
        k.clamp(1, f.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RFHyperParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
}

impl Default for RFHyperParams {
    /// The fixed configuration used when the search is skipped.
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 8,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
        }
    }
}

impl RFHyperParams {
    pub const N_ESTIMATORS: (usize, usize) = (100, 400);
    pub const MAX_DEPTH: (usize, usize) = (3, 10);

    pub fn validate(&self) -> Result<()> {
        let ok = (Self::N_ESTIMATORS.0..=Self::N_ESTIMATORS.1).contains(&self.n_estimators)
            && (Self::MAX_DEPTH.0..=Self::MAX_DEPTH.1).contains(&self.max_depth)
            && self.min_samples_split >= 2
            && self.min_samples_leaf >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "hyperparameters out of range: {self:?}"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_features_counts() {
        assert_eq!(MaxFeatures::Sqrt.count(127), 12);
        assert_eq!(MaxFeatures::Sqrt.count(16), 4);
        assert_eq!(MaxFeatures::Log2.count(127), 7);
        assert_eq!(MaxFeatures::Log2.count(128), 7);
        assert_eq!(MaxFeatures::Log2.count(1), 1);
        assert_eq!(MaxFeatures::Frac30.count(127), 39);
        assert_eq!(MaxFeatures::Frac50.count(127), 64);
        assert_eq!(MaxFeatures::Frac80.count(127), 102);
        assert_eq!(MaxFeatures::Frac80.count(1), 1);
    }

    #[test]
    fn hyperparameter_ranges() {
        assert!(RFHyperParams::default().validate().is_ok());
        let bad = RFHyperParams {
            n_estimators: 50,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
