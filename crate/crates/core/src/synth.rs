//! Synthetic traces with planted membership signatures.
//!
//! Nonmember hidden states are Gaussian random walks over layers and
//! attention is a softmax of random causal logits. Members go through the
//! same process with three optional modifications at the focus layers:
//! damped transitions (δ), transient confidence spikes aligned to an
//! unembedding column (ρ), and a self/previous-token attention bonus in the
//! first half of the heads (β). Neighbors use half of each effect.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::extract_with_lens;
use crate::io::{write_head_file, write_manifest_file, write_trace_file};
use crate::lens::Lens;
use crate::matrix::{with_workers, FeatureMatrix};
use crate::rng::rng_for;
use crate::trace::{
    DatasetManifest, Label, ManifestEntry, ModelHead, NormKind, SequenceTrace, TraceDims,
};

/// Std of each hidden-state step between consecutive layers.
pub const STEP_STD: f64 = 0.5;
/// Std of unembedding entries.
pub const UNEMBED_STD: f64 = 0.5;

/// Which hidden layers carry the planted effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every layer strictly between the embedding and the last layer.
    #[default]
    MiddleBand,
    /// Only layer `⌈L/2⌉`.
    MiddleLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub n_neighbors: usize,
    /// Surprise damping in `[0, 1)`.
    pub delta: f64,
    /// Confidence-spike rate in `[0, 1]`.
    pub rho: f64,
    /// Attention focus bonus, `≥ 0`.
    pub beta: f64,
    pub scope: Scope,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            seq_len: 16,
            hidden_dim: 16,
            vocab_size: 32,
            n_members: 500,
            n_nonmembers: 500,
            n_neighbors: 0,
            delta: 0.3,
            rho: 0.1,
            beta: 2.0,
            scope: Scope::MiddleBand,
            seed: 420,
        }
    }
}

impl SynthSpec {
    pub fn dims(&self) -> TraceDims {
        TraceDims::new(
            self.n_layers,
            self.n_heads,
            self.seq_len,
            self.hidden_dim,
            self.vocab_size,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().check()?;
        if self.seq_len < 2 {
            return Err(Error::InvalidArgument(
                "synthetic sequences need at least 2 positions".into(),
            ));
        }
        let ok = (0.0..1.0).contains(&self.delta)
            && (0.0..=1.0).contains(&self.rho)
            && self.beta >= 0.0
            && self.beta.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "effect sizes out of range: delta {} (need [0, 1)), rho {} (need [0, 1]), beta {} (need ≥ 0)",
                self.delta, self.rho, self.beta
            )));
        }
        Ok(())
    }

    /// Layers whose hidden states carry the effects.
    pub fn focus_layers(&self) -> Vec<usize> {
        let l = self.n_layers;
        match self.scope {
            Scope::MiddleBand => (1..l).collect(),
            Scope::MiddleLayer => vec![l.div_ceil(2)],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let spec: Self = std::fs::read(path)
            .map_err(Error::from)
            .and_then(|b| Ok(serde_json::from_slice(&b)?))
            .map_err(|e| e.in_file(path))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy)]
struct Effects {
    delta: f64,
    rho: f64,
    beta: f64,
}

impl Effects {
    fn for_label(spec: &SynthSpec, label: Label) -> Self {
        let scale = match label {
            Label::Member => 1.0,
            Label::Neighbor => 0.5,
            Label::Nonmember => 0.0,
        };
        Self {
            delta: spec.delta * scale,
            rho: spec.rho * scale,
            beta: spec.beta * scale,
        }
    }
}

/// RMS-norm head with Gaussian unembedding.
pub fn synth_head(spec: &SynthSpec) -> ModelHead {
    let mut rng = rng_for(spec.seed, &[9]);
    let normal = Normal::new(0.0, UNEMBED_STD).expect("valid std");
    ModelHead {
        hidden_dim: spec.hidden_dim,
        vocab_size: spec.vocab_size,
        norm_kind: NormKind::RmsNorm,
        norm_epsilon: 1e-5,
        gain: vec![1.0; spec.hidden_dim],
        bias: vec![0.0; spec.hidden_dim],
        unembed: (0..spec.hidden_dim * spec.vocab_size)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect(),
        unembed_bias: None,
    }
}

fn stream(label: Label) -> u64 {
    match label {
        Label::Member => 0,
        Label::Nonmember => 1,
        Label::Neighbor => 2,
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// The `index`-th trace of class `label`.
pub fn generate_trace(
    spec: &SynthSpec,
    head: &ModelHead,
    label: Label,
    index: usize,
) -> SequenceTrace {
    let fx = Effects::for_label(spec, label);
    let (l_max, nh, n, d, v) = (
        spec.n_layers,
        spec.n_heads,
        spec.seq_len,
        spec.hidden_dim,
        spec.vocab_size,
    );
    let focus = spec.focus_layers();
    let mut rng = rng_for(spec.seed, &[stream(label), index as u64]);

    let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();

    let mut hidden = vec![0f32; (l_max + 1) * n * d];
    let mut walk: Vec<f64> = (0..n * d).map(|_| gauss(&mut rng)).collect();
    for (i, &x) in walk.iter().enumerate() {
        hidden[i] = x as f32;
    }
    for l in 1..=l_max {
        let damp = if focus.contains(&l) {
            1.0 - fx.delta
        } else {
            1.0
        };
        for x in walk.iter_mut() {
            *x += damp * STEP_STD * gauss(&mut rng);
        }
        let layer = &mut hidden[l * n * d..(l + 1) * n * d];
        for (o, &x) in layer.iter_mut().zip(&walk) {
            *o = x as f32;
        }
        if focus.contains(&l) && fx.rho > 0.0 {
            for t in 0..n {
                if rng.random::<f64>() >= fx.rho {
                    continue;
                }
                // Spike: same norm, direction of one unembedding column.
                let c = rng.random_range(0..v);
                let h = &walk[t * d..(t + 1) * d];
                let hn = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                let col: Vec<f64> = (0..d).map(|k| head.unembed[k * v + c] as f64).collect();
                let cn = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                for k in 0..d {
                    layer[t * d + k] = (col[k] / cn * hn) as f32;
                }
            }
        }
    }

    let boosted_heads = nh.div_ceil(2);
    let mut attn = vec![0f32; l_max * nh * n * n];
    let mut logits = vec![0.0f64; n];
    for l in 0..l_max {
        let feeds_focus = focus.contains(&(l + 1));
        for h in 0..nh {
            let bonus = if feeds_focus && h < boosted_heads {
                fx.beta
            } else {
                0.0
            };
            for t in 0..n {
                for (u, z) in logits[..=t].iter_mut().enumerate() {
                    *z = gauss(&mut rng);
                    if u == t || u + 1 == t {
                        *z += bonus;
                    }
                }
                let max = logits[..=t]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits[..=t].iter().map(|z| (z - max).exp()).sum();
                let row = &mut attn[((l * nh + h) * n + t) * n..][..n];
                for u in 0..=t {
                    row[u] = ((logits[u] - max).exp() / sum) as f32;
                }
            }
        }
    }

    SequenceTrace::new(spec.dims(), tokens, vec![1; n], hidden, attn, None)
        .expect("shapes follow the spec")
}

/// Entry order: members, nonmembers, neighbors.
fn plan(spec: &SynthSpec) -> Vec<(Label, usize)> {
    let mut out = Vec::with_capacity(spec.n_members + spec.n_nonmembers + spec.n_neighbors);
    out.extend((0..spec.n_members).map(|i| (Label::Member, i)));
    out.extend((0..spec.n_nonmembers).map(|i| (Label::Nonmember, i)));
    out.extend((0..spec.n_neighbors).map(|i| (Label::Neighbor, i)));
    out
}

fn trace_id(label: Label, index: usize) -> String {
    format!("{}_{index:05}", label.as_str())
}

fn entry(label: Label, index: usize, trace: &SequenceTrace) -> ManifestEntry {
    let id = trace_id(label, index);
    ManifestEntry {
        trace: format!("traces/{id}.mtrc"),
        label,
        group: "synth".into(),
        id,
        text: Some(
            trace
                .token_ids()
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        ),
    }
}

/// Writes `head.mthd`, `traces/*.mtrc` and `manifest.jsonl` into `dir`.
pub fn generate(
    spec: &SynthSpec,
    dir: impl AsRef<Path>,
    workers: Option<usize>,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    let traces_dir = dir.join("traces");
    std::fs::create_dir_all(&traces_dir).map_err(|e| Error::from(e).in_file(&traces_dir))?;
    let head = synth_head(spec);
    write_head_file(&head, dir.join("head.mthd"))?;
    let entries = with_workers(workers, || {
        plan(spec)
            .par_iter()
            .map(|&(label, i)| {
                let trace = generate_trace(spec, &head, label, i);
                let e = entry(label, i, &trace);
                write_trace_file(&trace, dir.join(&e.trace))?;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let manifest = DatasetManifest::new(entries, dir)?;
    write_manifest_file(&manifest.entries, dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Generates and extracts in memory, skipping the files.
pub fn feature_matrix(spec: &SynthSpec, workers: Option<usize>) -> Result<FeatureMatrix> {
    spec.validate()?;
    let head = synth_head(spec);
    let lens = Lens::new(&head)?;
    let rows = with_workers(workers, || {
        plan(spec)
            .par_iter()
            .map(|&(label, i)| {
                let trace = generate_trace(spec, &head, label, i);
                let id = trace_id(label, i);
                let fv = extract_with_lens(&trace, &lens, &id)?;
                Ok((id, label, fv.values))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut m = FeatureMatrix::new(crate::features::feature_registry(&spec.dims()));
    for (id, label, values) in rows {
        m.push(id, label, values)?;
    }
    Ok(m)
}
