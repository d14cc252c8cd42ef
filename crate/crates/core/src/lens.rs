//! Logit lens: decode every layer's hidden state with the model's final
//! normalization and unembedding.
//!
//! Per-layer logits are never materialized for a whole sequence. Positions are
//! decoded in chunks and reduced to entropy / confidence / gap immediately.

use crate::error::Result;
use crate::trace::{valid_positions, ModelHead, NormKind, SequenceTrace};

pub const DEFAULT_CHUNK: usize = 32;

/// Model head upcast to `f64`, ready to decode hidden states.
#[derive(Debug, Clone)]
pub struct Lens {
    d: usize,
    v: usize,
    norm: NormKind,
    eps: f64,
    gain: Vec<f64>,
    bias: Vec<f64>,
    unembed: Vec<f64>,
    unembed_bias: Option<Vec<f64>>,
    chunk: usize,
}

fn upcast(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

impl Lens {
    pub fn new(head: &ModelHead) -> Result<Self> {
        head.check()?;
        Ok(Self {
            d: head.hidden_dim,
            v: head.vocab_size,
            norm: head.norm_kind,
            eps: head.norm_epsilon as f64,
            gain: upcast(&head.gain),
            bias: upcast(&head.bias),
            unembed: upcast(&head.unembed),
            unembed_bias: head.unembed_bias.as_deref().map(upcast),
            chunk: DEFAULT_CHUNK,
        })
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    /// Applies the head's final normalization to one hidden vector.
    pub fn normalize(&self, h: &[f64], out: &mut [f64]) {
        let d = self.d as f64;
        match self.norm {
            NormKind::Identity => out.copy_from_slice(h),
            NormKind::LayerNorm => {
                let mean = h.iter().sum::<f64>() / d;
                let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
                let rstd = 1.0 / (var + self.eps).sqrt();
                for k in 0..self.d {
                    out[k] = (h[k] - mean) * rstd * self.gain[k] + self.bias[k];
                }
            }
            NormKind::RmsNorm => {
                let ms = h.iter().map(|x| x * x).sum::<f64>() / d;
                let r = 1.0 / (ms + self.eps).sqrt();
                for k in 0..self.d {
                    out[k] = h[k] * r * self.gain[k];
                }
            }
        }
    }

    /// Logits for a batch of normalized rows (`rows.len() == count * d`).
    fn project(&self, rows: &[f64], logits: &mut [f64]) {
        let (d, v) = (self.d, self.v);
        for (z, out) in rows.chunks_exact(d).zip(logits.chunks_exact_mut(v)) {
            match &self.unembed_bias {
                Some(b) => out.copy_from_slice(b),
                None => out.fill(0.0),
            }
            for (i, &zi) in z.iter().enumerate() {
                let w = &self.unembed[i * v..(i + 1) * v];
                for (o, &wi) in out.iter_mut().zip(w) {
                    *o += zi * wi;
                }
            }
        }
    }

    pub fn logits(&self, hidden: &[f32]) -> Vec<f64> {
        let h = upcast(hidden);
        let mut z = vec![0.0; self.d];
        self.normalize(&h, &mut z);
        let mut out = vec![0.0; self.v];
        self.project(&z, &mut out);
        out
    }

    /// Decodes layer `layer` at the given positions, chunk by chunk, calling
    /// `visit(position_index, logits)` for each.
    fn for_each_logits(
        &self,
        trace: &SequenceTrace,
        layer: usize,
        positions: &[usize],
        mut visit: impl FnMut(usize, &[f64]),
    ) {
        let (d, v) = (self.d, self.v);
        let mut h = vec![0.0; d];
        let mut z = vec![0.0; self.chunk * d];
        let mut logits = vec![0.0; self.chunk * v];
        for (c, chunk) in positions.chunks(self.chunk).enumerate() {
            for (r, &t) in chunk.iter().enumerate() {
                for (dst, &src) in h.iter_mut().zip(trace.hidden(layer, t)) {
                    *dst = src as f64;
                }
                self.normalize(&h, &mut z[r * d..(r + 1) * d]);
            }
            let rows = chunk.len();
            self.project(&z[..rows * d], &mut logits[..rows * v]);
            for r in 0..rows {
                visit(c * self.chunk + r, &logits[r * v..(r + 1) * v]);
            }
        }
    }

    /// Entropy, confidence and gap at every valid position of `layer`.
    pub fn layer_predictions(
        &self,
        trace: &SequenceTrace,
        layer: usize,
    ) -> Result<LayerPredictions> {
        check_layer(trace, self, layer)?;
        let positions = valid_positions(trace)?;
        let m = positions.len();
        let mut out = LayerPredictions {
            layer,
            positions: positions.clone(),
            entropy: vec![0.0; m],
            confidence: vec![0.0; m],
            gap: vec![0.0; m],
        };
        let mut probs = vec![0.0; self.v];
        self.for_each_logits(trace, layer, &positions, |j, logits| {
            softmax_into(logits, &mut probs);
            let s = summarize(&probs);
            out.entropy[j] = s.entropy;
            out.confidence[j] = s.confidence;
            out.gap[j] = s.gap;
        });
        Ok(out)
    }

    /// `ln p(token at next valid position | current position)` for each pair
    /// of consecutive valid positions, decoded at `layer`.
    pub fn next_token_logprobs(&self, trace: &SequenceTrace, layer: usize) -> Result<Vec<f64>> {
        check_layer(trace, self, layer)?;
        let positions = valid_positions(trace)?;
        let sources = &positions[..positions.len() - 1];
        let mut out = vec![0.0; sources.len()];
        self.for_each_logits(trace, layer, sources, |j, logits| {
            let target = trace.token_ids()[positions[j + 1]] as usize;
            out[j] = log_softmax_at(logits, target);
        });
        Ok(out)
    }
}

fn check_layer(trace: &SequenceTrace, lens: &Lens, layer: usize) -> Result<()> {
    let dims = trace.dims();
    if lens.d != dims.hidden_dim || lens.v != dims.vocab_size {
        return Err(crate::Error::Shape(format!(
            "head (d={}, V={}) does not match trace (d={}, V={})",
            lens.d, lens.v, dims.hidden_dim, dims.vocab_size
        )));
    }
    if layer > dims.n_layers {
        return Err(crate::Error::InvalidArgument(format!(
            "layer {layer} out of range 0..={}",
            dims.n_layers
        )));
    }
    Ok(())
}

/// Logits of layer `l` at position `t`.
pub fn layer_logits(
    trace: &SequenceTrace,
    head: &ModelHead,
    layer: usize,
    t: usize,
) -> Result<Vec<f64>> {
    let lens = Lens::new(head)?;
    check_layer(trace, &lens, layer)?;
    if t >= trace.dims().seq_len || !trace.is_valid(t) {
        return Err(crate::Error::InvalidArgument(format!(
            "position {t} is not a valid token"
        )));
    }
    Ok(lens.logits(trace.hidden(layer, t)))
}

pub fn layer_predictions(
    trace: &SequenceTrace,
    head: &ModelHead,
    layer: usize,
) -> Result<LayerPredictions> {
    Lens::new(head)?.layer_predictions(trace, layer)
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

/// Max-subtracted softmax.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionSummary {
    /// Nats.
    pub entropy: f64,
    pub confidence: f64,
    /// Top-1 minus top-2 probability.
    pub gap: f64,
}

pub fn summarize(probs: &[f64]) -> PredictionSummary {
    let mut entropy = 0.0;
    let (mut top1, mut top2) = (0.0f64, 0.0f64);
    for &p in probs {
        if p > 0.0 {
            entropy -= p * p.ln();
        }
        if p > top1 {
            top2 = top1;
            top1 = p;
        } else if p > top2 {
            top2 = p;
        }
    }
    PredictionSummary {
        entropy: entropy.max(0.0),
        confidence: top1,
        gap: top1 - top2,
    }
}

/// Streamed per-position summaries of one layer's lens distribution, over
/// valid positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPredictions {
    pub layer: usize,
    pub positions: Vec<usize>,
    pub entropy: Vec<f64>,
    pub confidence: Vec<f64>,
    pub gap: Vec<f64>,
}
