//! Per-sequence behavioral features computed from a trace.
//!
//! Every feature is computed over valid (unpadded) positions only, so a trace
//! and the same trace with extra padding produce the same vector. The layout
//! of the vector is fixed by [`feature_registry`]:
//!
//! | group       | per                        | names |
//! |-------------|----------------------------|-------|
//! | transitions | block transition `i → i+1` | 18    |
//! | predictions | lens layer `0..=L`         | 16    |
//! | attention   | block `0..L`               | 14    |
//! | context     | hidden layer `0..=L`       | 5     |
//!
//! Standard deviations are population deviations throughout.

use crate::error::{Error, Result};
use crate::lens::{LayerPredictions, Lens};
use crate::trace::{valid_positions, validate_trace, ModelHead, SequenceTrace, TraceDims};

/// Added inside `log2` for attention entropy.
pub const ATTENTION_LOG_EPS: f64 = 1e-10;
/// Added to the denominator of confidence stability.
pub const CONF_STABILITY_EPS: f64 = 1e-8;
/// Entries count as sparse only when below the adaptive threshold by more
/// than this; traces are stored as `f32`, so exact ties must not flip.
pub const SPARSITY_MARGIN: f64 = crate::trace::ZERO_ATTENTION_TOLERANCE;
/// Half-width of the window used for local confidence variation.
pub const TOKEN_WINDOW: usize = 2;

pub const TRANSITION_FEATURES: usize = 18;
pub const PREDICTION_FEATURES: usize = 16;
pub const ATTENTION_FEATURES: usize = 14;
pub const CONTEXT_FEATURES: usize = 5;

const STATS6: [&str; 6] = ["mean", "min", "max", "std", "argmin", "argmax"];
const STATS4: [&str; 4] = ["mean", "min", "max", "std"];
const SPREAD4: [&str; 4] = ["mean", "std", "min", "max"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
    /// Index of the first minimum divided by `count - 1` (0 for one value).
    pub argmin_frac: f64,
    pub argmax_frac: f64,
}

impl StatSummary {
    /// Summary of a non-empty slice.
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "StatSummary of an empty slice");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &x) in values.iter().enumerate() {
            if x < values[argmin] {
                argmin = i;
            }
            if x > values[argmax] {
                argmax = i;
            }
        }
        let denom = (values.len() - 1).max(1) as f64;
        Self {
            // Rounding can push the mean a hair outside [min, max] for constant input.
            mean: mean.clamp(values[argmin], values[argmax]),
            min: values[argmin],
            max: values[argmax],
            std: var.sqrt(),
            argmin_frac: argmin as f64 / denom,
            argmax_frac: argmax as f64 / denom,
        }
    }

    fn six(&self) -> [f64; 6] {
        [
            self.mean,
            self.min,
            self.max,
            self.std,
            self.argmin_frac,
            self.argmax_frac,
        ]
    }

    fn four(&self) -> [f64; 4] {
        [self.mean, self.min, self.max, self.std]
    }

    fn spread(&self) -> [f64; 4] {
        [self.mean, self.std, self.min, self.max]
    }
}

/// A registry name and the hidden-state layer it is attributed to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureName {
    pub name: String,
    /// Transitions `i → i+1` and block `i`'s attention are tagged `i + 1`;
    /// lens and context features carry their own layer.
    pub layer_tag: usize,
}

pub fn tagged_registry(dims: &TraceDims) -> Vec<FeatureName> {
    let l_count = dims.n_layers;
    let mut out = Vec::with_capacity(registry_len(dims));
    let mut push = |name: String, layer_tag: usize| out.push(FeatureName { name, layer_tag });
    for i in 0..l_count {
        for metric in ["surprise", "nsurprise", "stability"] {
            for stat in STATS6 {
                push(format!("trans{i}_{metric}_{stat}"), i + 1);
            }
        }
    }
    for l in 0..=l_count {
        for metric in ["entropy", "conf", "gap"] {
            for stat in STATS4 {
                push(format!("pred{l}_{metric}_{stat}"), l);
            }
        }
        push(format!("pred{l}_conf_stability"), l);
        for k in ["first", "mid", "last"] {
            push(format!("pred{l}_tok{k}_confstd"), l);
        }
    }
    for l in 0..l_count {
        for metric in [
            "entropy",
            "concentration",
            "sparsity",
            "selfattn",
            "prevbias",
            "meandist",
        ] {
            push(format!("attn{l}_{metric}"), l + 1);
        }
        for metric in ["entropy", "focus"] {
            for stat in SPREAD4 {
                push(format!("attn{l}_head_{metric}_{stat}"), l + 1);
            }
        }
    }
    for l in 0..=l_count {
        for stat in SPREAD4 {
            push(format!("ctx{l}_{stat}"), l);
        }
        push(format!("pos{l}_firstlast"), l);
    }
    out
}

/// Ordered, duplicate-free feature names for a model shape.
pub fn feature_registry(dims: &TraceDims) -> Vec<String> {
    tagged_registry(dims).into_iter().map(|f| f.name).collect()
}

pub fn registry_len(dims: &TraceDims) -> usize {
    let l = dims.n_layers;
    TRANSITION_FEATURES * l
        + PREDICTION_FEATURES * (l + 1)
        + ATTENTION_FEATURES * l
        + CONTEXT_FEATURES * (l + 1)
}

/// Degenerate inputs that were mapped to a defined value rather than failing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureFlag {
    /// A zero hidden vector met a direction-based feature; it was treated as
    /// the zero direction and its cosine as 0.
    ZeroNorm { layer: usize, position: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub flags: Vec<FeatureFlag>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

fn hidden64(trace: &SequenceTrace, layer: usize, t: usize) -> Vec<f64> {
    trace.hidden(layer, t).iter().map(|&x| x as f64).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity clamped to [-1, 1]; `None` when either vector is zero.
fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Euclidean transition size, direction change and cosine stability between
/// hidden layers `i` and `i + 1`.
pub fn transition_features(
    trace: &SequenceTrace,
    i: usize,
    positions: &[usize],
    flags: &mut Vec<FeatureFlag>,
) -> [f64; TRANSITION_FEATURES] {
    let m = positions.len();
    let (mut surprise, mut nsurprise, mut stability) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for (j, &t) in positions.iter().enumerate() {
        let a = hidden64(trace, i, t);
        let b = hidden64(trace, i + 1, t);
        surprise[j] = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>()
            .sqrt();
        let (na, nb) = (norm(&a), norm(&b));
        for (layer, n) in [(i, na), (i + 1, nb)] {
            if n == 0.0 {
                flags.push(FeatureFlag::ZeroNorm { layer, position: t });
            }
        }
        let unit = |v: &[f64], n: f64| -> Vec<f64> {
            if n == 0.0 {
                vec![0.0; v.len()]
            } else {
                v.iter().map(|x| x / n).collect()
            }
        };
        let (ua, ub) = (unit(&a, na), unit(&b, nb));
        nsurprise[j] = ua
            .iter()
            .zip(&ub)
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>()
            .sqrt();
        stability[j] = cosine(&b, &a).unwrap_or(0.0);
    }
    let mut out = [0.0; TRANSITION_FEATURES];
    for (k, series) in [surprise, nsurprise, stability].iter().enumerate() {
        out[k * 6..(k + 1) * 6].copy_from_slice(&StatSummary::of(series).six());
    }
    out
}

/// Population std of confidence in a window of `TOKEN_WINDOW` valid
/// positions either side of index `k`.
fn window_std(confidence: &[f64], k: usize) -> f64 {
    let lo = k.saturating_sub(TOKEN_WINDOW);
    let hi = (k + TOKEN_WINDOW).min(confidence.len() - 1);
    StatSummary::of(&confidence[lo..=hi]).std
}

/// Lens entropy / confidence / gap statistics plus confidence stability and
/// local confidence variation at the first, middle and last valid tokens.
pub fn prediction_features(preds: &LayerPredictions) -> [f64; PREDICTION_FEATURES] {
    let mut out = [0.0; PREDICTION_FEATURES];
    let conf = StatSummary::of(&preds.confidence);
    out[0..4].copy_from_slice(&StatSummary::of(&preds.entropy).four());
    out[4..8].copy_from_slice(&conf.four());
    out[8..12].copy_from_slice(&StatSummary::of(&preds.gap).four());
    out[12] = conf.mean / (conf.std + CONF_STABILITY_EPS);
    let m = preds.confidence.len();
    for (slot, k) in [0, (m - 1) / 2, m - 1].into_iter().enumerate() {
        out[13 + slot] = window_std(&preds.confidence, k);
    }
    out
}

/// Entropy and max-weight of one row restricted to the given keys.
fn row_entropy_and_max(row: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut entropy = 0.0;
    let mut max = 0.0f64;
    for a in row {
        entropy -= a * (a + ATTENTION_LOG_EPS).log2();
        max = max.max(a);
    }
    (entropy, max)
}

/// Head-averaged attention statistics for block `layer`, plus per-head
/// entropy and focus reduced over heads.
pub fn attention_layer_features(
    trace: &SequenceTrace,
    layer: usize,
    positions: &[usize],
) -> [f64; ATTENTION_FEATURES] {
    let heads = trace.dims().n_heads;
    let m = positions.len();
    let mf = m as f64;

    // Head-mean attention over valid causal entries, stored row by row
    // (row j holds keys positions[0..=j]).
    let mut mean_attn: Vec<Vec<f64>> = positions
        .iter()
        .enumerate()
        .map(|(j, _)| vec![0.0; j + 1])
        .collect();
    let mut head_entropy = vec![0.0; heads];
    let mut head_focus = vec![0.0; heads];
    for h in 0..heads {
        let (mut ent, mut focus) = (0.0, 0.0);
        for (j, &t) in positions.iter().enumerate() {
            let row = trace.attention_row(layer, h, t);
            let keys = positions[..=j].iter().map(|&s| row[s] as f64);
            let (e, mx) = row_entropy_and_max(keys);
            ent += e;
            focus += mx;
            for (acc, &s) in mean_attn[j].iter_mut().zip(&positions[..=j]) {
                *acc += row[s] as f64;
            }
        }
        head_entropy[h] = ent / mf;
        head_focus[h] = focus / mf;
    }
    for row in mean_attn.iter_mut() {
        for a in row.iter_mut() {
            *a /= heads as f64;
        }
    }

    let (mut entropy, mut concentration, mut selfattn, mut prevbias) = (0.0, 0.0, 0.0, 0.0);
    let (mut total, mut count, mut weighted_dist) = (0.0, 0usize, 0.0);
    for (j, row) in mean_attn.iter().enumerate() {
        let (e, mx) = row_entropy_and_max(row.iter().copied());
        entropy += e;
        concentration += mx;
        selfattn += row[j];
        if j > 0 {
            prevbias += row[j - 1];
        }
        let t = positions[j];
        for (&a, &s) in row.iter().zip(&positions[..=j]) {
            total += a;
            weighted_dist += (t - s) as f64 * a;
        }
        count += row.len();
    }
    let tau = total / count as f64;
    let sparse = mean_attn
        .iter()
        .flatten()
        .filter(|&&a| a < tau - SPARSITY_MARGIN)
        .count();

    let mut out = [0.0; ATTENTION_FEATURES];
    out[0] = entropy / mf;
    out[1] = concentration / mf;
    out[2] = sparse as f64 / count as f64;
    out[3] = selfattn / mf;
    out[4] = prevbias / (mf - 1.0);
    out[5] = if total > 0.0 {
        weighted_dist / total
    } else {
        0.0
    };
    out[6..10].copy_from_slice(&StatSummary::of(&head_entropy).spread());
    out[10..14].copy_from_slice(&StatSummary::of(&head_focus).spread());
    out
}

/// Sizes of the running-mean updates as valid tokens are added, summarized
/// as mean / std / min / max.
pub fn context_evolution_features(
    trace: &SequenceTrace,
    layer: usize,
    positions: &[usize],
) -> [f64; 4] {
    let d = trace.dims().hidden_dim;
    let mut sum = hidden64(trace, layer, positions[0]);
    let mut steps = Vec::with_capacity(positions.len() - 1);
    for (j, &t) in positions.iter().enumerate().skip(1) {
        let h = trace.hidden(layer, t);
        let prev = j as f64;
        let next = (j + 1) as f64;
        let mut sq = 0.0;
        for k in 0..d {
            let before = sum[k] / prev;
            sum[k] += h[k] as f64;
            let after = sum[k] / next;
            sq += (after - before) * (after - before);
        }
        steps.push(sq.sqrt());
    }
    StatSummary::of(&steps).spread()
}

/// Cosine between the first and last valid hidden states of `layer`.
pub fn first_last_similarity(
    trace: &SequenceTrace,
    layer: usize,
    positions: &[usize],
    flags: &mut Vec<FeatureFlag>,
) -> f64 {
    let (first, last) = (positions[0], positions[positions.len() - 1]);
    let a = hidden64(trace, layer, first);
    let b = hidden64(trace, layer, last);
    match cosine(&a, &b) {
        Some(c) => c,
        None => {
            for (t, v) in [(first, &a), (last, &b)] {
                if norm(v) == 0.0 {
                    flags.push(FeatureFlag::ZeroNorm { layer, position: t });
                }
            }
            0.0
        }
    }
}

/// Full feature vector for one trace, in registry order.
pub fn extract_features(trace: &SequenceTrace, head: &ModelHead) -> Result<FeatureVector> {
    extract_with_lens(trace, &Lens::new(head)?, "<unnamed>")
}

/// As [`extract_features`] with a prepared lens; `id` names the trace in errors.
pub fn extract_with_lens(trace: &SequenceTrace, lens: &Lens, id: &str) -> Result<FeatureVector> {
    validate_trace(trace)
        .into_result()
        .map_err(|e| Error::InvalidTrace(format!("{id}: {e}")))?;
    let dims = *trace.dims();
    if dims.vocab_size != lens.vocab_size() {
        return Err(Error::Shape(format!(
            "{id}: head vocabulary {} differs from trace vocabulary {}",
            lens.vocab_size(),
            dims.vocab_size
        )));
    }
    let positions = valid_positions(trace)?;
    let mut values = Vec::with_capacity(registry_len(&dims));
    let mut flags = Vec::new();
    for i in 0..dims.n_layers {
        values.extend(transition_features(trace, i, &positions, &mut flags));
    }
    for l in 0..=dims.n_layers {
        let preds = lens.layer_predictions(trace, l)?;
        values.extend(prediction_features(&preds));
    }
    for l in 0..dims.n_layers {
        values.extend(attention_layer_features(trace, l, &positions));
    }
    for l in 0..=dims.n_layers {
        values.extend(context_evolution_features(trace, l, &positions));
        values.push(first_last_similarity(trace, l, &positions, &mut flags));
    }
    let names = feature_registry(&dims);
    debug_assert_eq!(names.len(), values.len());
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFeature {
            feature: names[i].clone(),
            trace: id.to_string(),
        });
    }
    Ok(FeatureVector {
        names,
        values,
        flags,
    })
}
