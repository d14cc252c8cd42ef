//! AUC, thresholded precision/recall and layer-wise AUC curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_pipeline, PipelineConfig, RandomForestModel, SearchMode};
use crate::error::{Error, Result};
use crate::matrix::{extract_matrix, layer_columns, FeatureMatrix};
use crate::trace::{DatasetManifest, Label, ModelHead};

/// Twice the Mann-Whitney U statistic: each (positive, negative) pair scores
/// 2 if the positive ranks higher and 1 on a tie. Integer, so exact.
fn doubled_u(scores: &[f64], labels: &[bool]) -> (u64, u64, u64) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut u2, mut neg_below) = (0u64, 0u64);
    let (mut pos_total, mut neg_total) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        u2 += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        pos_total += pos;
        neg_total += neg;
        i = j;
    }
    (u2, pos_total, neg_total)
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let (u2, p, n) = doubled_u(scores, labels);
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Predicts positive iff `score >= threshold`. Precision is `None` when
/// nothing is predicted positive; recall is 0 when there are no positives.
pub fn precision_recall(scores: &[f64], labels: &[bool], threshold: f64) -> (Option<f64>, f64) {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = if tp + fnn > 0 {
        tp as f64 / (tp + fnn) as f64
    } else {
        0.0
    };
    (precision, recall)
}

/// Held-out AUC for one layer tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAuc {
    pub layer: usize,
    pub auc: f64,
}

/// Runs the training pipeline on the columns tagged with each layer in turn.
pub fn layerwise_from_matrix(
    full: &FeatureMatrix,
    n_layers: usize,
    config: &PipelineConfig,
) -> Result<Vec<LayerAuc>> {
    let dims = crate::trace::TraceDims::new(n_layers, 1, 2, 1, 1);
    let expected = crate::features::registry_len(&dims);
    if full.n_features() != expected {
        return Err(Error::Shape(format!(
            "matrix has {} columns, a {n_layers}-layer registry has {expected}",
            full.n_features()
        )));
    }
    (0..=n_layers)
        .into_par_iter()
        .map(|layer| {
            let sub = full.select_columns(&layer_columns(&dims, layer));
            let (_, report) = train_pipeline(&sub, config)?;
            Ok(LayerAuc {
                layer,
                auc: report.heldout_auc,
            })
        })
        .collect()
}

/// Layer-wise AUC straight from a manifest.
pub fn layerwise_auc(
    manifest: &DatasetManifest,
    head: &ModelHead,
    config: &PipelineConfig,
    workers: Option<usize>,
) -> Result<Vec<LayerAuc>> {
    let full = extract_matrix(manifest, head, None, workers)?;
    let first = manifest.resolve(&manifest.entries[0]);
    let n_layers = crate::io::read_trace_file(first)?.dims().n_layers;
    layerwise_from_matrix(&full, n_layers, config)
}

/// Layer-wise curve with fixed hyperparameters instead of a full search per layer.
pub fn fast_layerwise_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        search: SearchMode::Fixed(crate::classifier::RFHyperParams::default()),
        ..PipelineConfig::with_seed(seed)
    }
}

/// Contents of `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: f64,
    pub threshold: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_predicted_positive: usize,
}

fn evaluate_as(
    model: &RandomForestModel,
    matrix: &FeatureMatrix,
    threshold: f64,
    positive: Label,
) -> Result<EvalResult> {
    model.check_columns(&matrix.names)?;
    let keep: Vec<usize> = (0..matrix.n_rows())
        .filter(|&i| matrix.labels[i] == positive || matrix.labels[i] == Label::Nonmember)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores: Vec<f64> = keep
        .iter()
        .map(|&i| model.predict_proba(&matrix.rows[i]))
        .collect();
    let labels: Vec<bool> = keep.iter().map(|&i| matrix.labels[i] == positive).collect();
    let n_positive = labels.iter().filter(|&&l| l).count();
    let (precision, recall) = precision_recall(&scores, &labels, threshold);
    Ok(EvalResult {
        auc: auc(&scores, &labels).ok(),
        precision,
        recall,
        threshold,
        n_positive,
        n_negative: labels.len() - n_positive,
        n_predicted_positive: scores.iter().filter(|&&s| s >= threshold).count(),
    })
}

/// Scores member and nonmember rows; neighbor rows are ignored.
pub fn evaluate(
    model: &RandomForestModel,
    matrix: &FeatureMatrix,
    threshold: f64,
) -> Result<EvalResult> {
    evaluate_as(model, matrix, threshold, Label::Member)
}

/// Zero-shot check on neighbor rows, which count as positives. Nonmember rows
/// present in the same matrix are the negatives; member rows are ignored.
pub fn evaluate_neighbors(
    model: &RandomForestModel,
    matrix: &FeatureMatrix,
    threshold: f64,
) -> Result<EvalResult> {
    if !matrix.labels.contains(&Label::Neighbor) {
        return Err(Error::InvalidArgument("no rows labeled neighbor".into()));
    }
    evaluate_as(model, matrix, threshold, Label::Neighbor)
}

/// Labels for AUC: members are positive, everything else negative.
pub fn member_labels(labels: &[Label]) -> Vec<bool> {
    labels.iter().map(|&l| l == Label::Member).collect()
}
