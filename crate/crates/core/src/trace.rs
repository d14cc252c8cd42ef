//! In-memory record of a model's internal processing of one sequence.
//!
//! A [`SequenceTrace`] holds everything the feature extractor reads: token
//! ids, the right-padding mask, the residual stream after the embedding layer
//! and after every block, every attention map, and optionally the model's own
//! final logits. Values are stored as `f32`; all feature math upcasts.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums of stored attention must be within this of one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
/// Future and padded keys must carry at most this much attention.
pub const ZERO_ATTENTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
}

impl TraceDims {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        seq_len: usize,
        hidden_dim: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            seq_len,
            hidden_dim,
            vocab_size,
        }
    }

    pub fn check(&self) -> Result<()> {
        let TraceDims {
            n_layers,
            n_heads,
            seq_len,
            hidden_dim,
            vocab_size,
        } = *self;
        if n_layers == 0 || n_heads == 0 || hidden_dim == 0 || vocab_size == 0 {
            return Err(Error::InvalidDims(format!(
                "all dims must be positive, got {self:?}"
            )));
        }
        if seq_len < 2 {
            return Err(Error::InvalidDims(format!(
                "seq_len must be at least 2, got {seq_len}"
            )));
        }
        Ok(())
    }

    /// Number of stored hidden-state layers (embedding output plus one per block).
    pub fn n_states(&self) -> usize {
        self.n_layers + 1
    }

    pub fn hidden_len(&self) -> usize {
        self.n_states() * self.seq_len * self.hidden_dim
    }

    pub fn attention_len(&self) -> usize {
        self.n_layers * self.n_heads * self.seq_len * self.seq_len
    }

    pub fn logits_len(&self) -> usize {
        self.seq_len * self.vocab_size
    }

    /// Same model shape, possibly different sequence length.
    pub fn same_model(&self, other: &TraceDims) -> bool {
        self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.hidden_dim == other.hidden_dim
            && self.vocab_size == other.vocab_size
    }
}

/// One sequence's hidden states, attention maps and (optionally) final logits.
///
/// Layouts are flat and row-major:
/// `hidden_states[(l * n + t) * d + k]`, `attentions[((l * H + h) * n + t) * n + s]`,
/// `final_logits[t * V + v]`. Hidden-state layer 0 is the embedding output.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTrace {
    dims: TraceDims,
    token_ids: Vec<u32>,
    mask: Vec<u8>,
    hidden_states: Vec<f32>,
    attentions: Vec<f32>,
    final_logits: Option<Vec<f32>>,
}

impl SequenceTrace {
    /// Builds a trace, checking only that buffer lengths match `dims`.
    /// Semantic invariants are reported by [`validate_trace`].
    pub fn new(
        dims: TraceDims,
        token_ids: Vec<u32>,
        mask: Vec<u8>,
        hidden_states: Vec<f32>,
        attentions: Vec<f32>,
        final_logits: Option<Vec<f32>>,
    ) -> Result<Self> {
        let n = dims.seq_len;
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Shape(format!(
                    "{what}: expected {want} values, got {got}"
                )))
            }
        };
        check("token_ids", token_ids.len(), n)?;
        check("mask", mask.len(), n)?;
        check("hidden_states", hidden_states.len(), dims.hidden_len())?;
        check("attentions", attentions.len(), dims.attention_len())?;
        if let Some(logits) = &final_logits {
            check("final_logits", logits.len(), dims.logits_len())?;
        }
        Ok(Self {
            dims,
            token_ids,
            mask,
            hidden_states,
            attentions,
            final_logits,
        })
    }

    /// Appends `extra` padded positions: token 0, mask 0, zero hidden states,
    /// zero attention rows and columns, zero logits.
    pub fn padded(&self, extra: usize) -> SequenceTrace {
        let d0 = self.dims;
        let (n, np) = (d0.seq_len, d0.seq_len + extra);
        let dims = TraceDims { seq_len: np, ..d0 };
        let mut hidden = vec![0f32; dims.hidden_len()];
        for l in 0..d0.n_states() {
            let src = &self.hidden_states[l * n * d0.hidden_dim..(l + 1) * n * d0.hidden_dim];
            hidden[l * np * d0.hidden_dim..][..src.len()].copy_from_slice(src);
        }
        let mut attn = vec![0f32; dims.attention_len()];
        for lh in 0..d0.n_layers * d0.n_heads {
            for t in 0..n {
                attn[(lh * np + t) * np..][..n]
                    .copy_from_slice(&self.attentions[(lh * n + t) * n..][..n]);
            }
        }
        let logits = self.final_logits.as_ref().map(|f| {
            let mut out = f.clone();
            out.resize(dims.logits_len(), 0.0);
            out
        });
        let mut tokens = self.token_ids.clone();
        tokens.resize(np, 0);
        let mut mask = self.mask.clone();
        mask.resize(np, 0);
        SequenceTrace {
            dims,
            token_ids: tokens,
            mask,
            hidden_states: hidden,
            attentions: attn,
            final_logits: logits,
        }
    }

    pub fn dims(&self) -> &TraceDims {
        &self.dims
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn hidden_states(&self) -> &[f32] {
        &self.hidden_states
    }

    pub fn attentions(&self) -> &[f32] {
        &self.attentions
    }

    pub fn final_logits(&self) -> Option<&[f32]> {
        self.final_logits.as_deref()
    }

    pub fn is_valid(&self, t: usize) -> bool {
        self.mask[t] == 1
    }

    /// Hidden state of layer `l` at position `t`.
    pub fn hidden(&self, l: usize, t: usize) -> &[f32] {
        let d = self.dims.hidden_dim;
        let start = (l * self.dims.seq_len + t) * d;
        &self.hidden_states[start..start + d]
    }

    /// Full attention row (all `n` keys) for query `t` of head `h` in block `l`.
    pub fn attention_row(&self, l: usize, h: usize, t: usize) -> &[f32] {
        let n = self.dims.seq_len;
        let start = ((l * self.dims.n_heads + h) * n + t) * n;
        &self.attentions[start..start + n]
    }

    pub fn attention(&self, l: usize, h: usize, t: usize, s: usize) -> f32 {
        self.attention_row(l, h, t)[s]
    }

    pub fn logits_row(&self, t: usize) -> Option<&[f32]> {
        let v = self.dims.vocab_size;
        self.final_logits.as_ref().map(|x| &x[t * v..(t + 1) * v])
    }
}

/// One violated trace invariant, with coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Dims(String),
    InvalidMask {
        t: usize,
        value: u8,
    },
    NonFinite {
        tensor: &'static str,
        index: usize,
    },
    RowSum {
        l: usize,
        h: usize,
        t: usize,
        sum: f64,
    },
    Causality {
        l: usize,
        h: usize,
        t: usize,
        s: usize,
        value: f64,
    },
    MaskedKey {
        l: usize,
        h: usize,
        t: usize,
        s: usize,
        value: f64,
    },
    TokenOutOfRange {
        t: usize,
        token: u32,
    },
    TooShort {
        n_valid: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dims(msg) => write!(f, "invalid dims: {msg}"),
            Violation::InvalidMask { t, value } => {
                write!(f, "mask value {value} at t={t} is not 0 or 1")
            }
            Violation::NonFinite { tensor, index } => {
                write!(f, "non-finite value in {tensor} at flat index {index}")
            }
            Violation::RowSum { l, h, t, sum } => {
                write!(f, "row sum {sum} ≠ 1 at (l={l},h={h},t={t})")
            }
            Violation::Causality { l, h, t, s, value } => {
                write!(
                    f,
                    "causality violation at ({l},{h},{t},{s}): weight {value}"
                )
            }
            Violation::MaskedKey { l, h, t, s, value } => {
                write!(
                    f,
                    "padded key receives attention at ({l},{h},{t},{s}): weight {value}"
                )
            }
            Violation::TokenOutOfRange { t, token } => {
                write!(f, "token id {token} at t={t} exceeds vocabulary")
            }
            Violation::TooShort { n_valid } => {
                write!(f, "sequence too short: {n_valid} valid positions")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let shown: Vec<String> = self
            .violations
            .iter()
            .take(5)
            .map(|v| v.to_string())
            .collect();
        let more = self.violations.len().saturating_sub(5);
        let mut msg = shown.join("; ");
        if more > 0 {
            msg.push_str(&format!("; and {more} more"));
        }
        Err(Error::InvalidTrace(msg))
    }
}

/// Reports every violated invariant. Rows of padded query positions are not
/// inspected.
pub fn validate_trace(trace: &SequenceTrace) -> ValidationReport {
    let mut violations = Vec::new();
    let dims = trace.dims;
    if let Err(e) = dims.check() {
        violations.push(Violation::Dims(e.to_string()));
        return ValidationReport { violations };
    }
    let n = dims.seq_len;

    for (t, &m) in trace.mask.iter().enumerate() {
        if m > 1 {
            violations.push(Violation::InvalidMask { t, value: m });
        }
    }
    let tensors: [(&'static str, &[f32]); 3] = [
        ("hidden_states", &trace.hidden_states),
        ("attentions", &trace.attentions),
        ("final_logits", trace.final_logits.as_deref().unwrap_or(&[])),
    ];
    for (name, values) in tensors {
        for (index, v) in values.iter().enumerate() {
            if !v.is_finite() {
                violations.push(Violation::NonFinite {
                    tensor: name,
                    index,
                });
            }
        }
    }

    for l in 0..dims.n_layers {
        for h in 0..dims.n_heads {
            for t in (0..n).filter(|&t| trace.is_valid(t)) {
                let row = trace.attention_row(l, h, t);
                let sum: f64 = row.iter().map(|&a| a as f64).sum();
                if !sum.is_finite() || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    violations.push(Violation::RowSum { l, h, t, sum });
                }
                for (s, &a) in row.iter().enumerate() {
                    let value = a as f64;
                    if s > t {
                        if value.abs() > ZERO_ATTENTION_TOLERANCE {
                            violations.push(Violation::Causality { l, h, t, s, value });
                        }
                    } else if !trace.is_valid(s) && value.abs() > ZERO_ATTENTION_TOLERANCE {
                        violations.push(Violation::MaskedKey { l, h, t, s, value });
                    }
                }
            }
        }
    }

    for (t, &token) in trace.token_ids.iter().enumerate() {
        if token as usize >= dims.vocab_size {
            violations.push(Violation::TokenOutOfRange { t, token });
        }
    }
    let n_valid = trace.mask.iter().filter(|&&m| m == 1).count();
    if n_valid < 2 {
        violations.push(Violation::TooShort { n_valid });
    }
    ValidationReport { violations }
}

/// Ascending indices of real (unpadded) tokens.
pub fn valid_positions(trace: &SequenceTrace) -> Result<Vec<usize>> {
    let positions: Vec<usize> = (0..trace.dims.seq_len)
        .filter(|&t| trace.is_valid(t))
        .collect();
    if positions.len() < 2 {
        return Err(Error::SequenceTooShort(positions.len()));
    }
    Ok(positions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
    Identity,
}

impl NormKind {
    pub fn code(self) -> u32 {
        match self {
            NormKind::LayerNorm => 0,
            NormKind::RmsNorm => 1,
            NormKind::Identity => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(NormKind::LayerNorm),
            1 => Ok(NormKind::RmsNorm),
            2 => Ok(NormKind::Identity),
            other => Err(Error::UnknownNormKind(other)),
        }
    }
}

/// Final normalization and unembedding of a model; decodes any layer's hidden
/// state into vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHead {
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub norm_epsilon: f32,
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
    /// `hidden_dim × vocab_size`, row-major (`unembed[i * V + v]`).
    pub unembed: Vec<f32>,
    pub unembed_bias: Option<Vec<f32>>,
}

impl ModelHead {
    pub fn check(&self) -> Result<()> {
        let (d, v) = (self.hidden_dim, self.vocab_size);
        if d == 0 || v == 0 {
            return Err(Error::InvalidDims(format!("head dims d={d}, V={v}")));
        }
        if self.gain.len() != d || self.bias.len() != d {
            return Err(Error::Shape(format!(
                "gain/bias lengths {}/{} differ from hidden_dim {d}",
                self.gain.len(),
                self.bias.len()
            )));
        }
        if self.unembed.len() != d * v {
            return Err(Error::Shape(format!(
                "unembed has {} values, expected {}",
                self.unembed.len(),
                d * v
            )));
        }
        if let Some(b) = &self.unembed_bias {
            if b.len() != v {
                return Err(Error::Shape(format!(
                    "unembed_bias has {} values, expected {v}",
                    b.len()
                )));
            }
        }
        if self.norm_epsilon.is_nan() || self.norm_epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "norm epsilon {} must be positive",
                self.norm_epsilon
            )));
        }
        Ok(())
    }

    pub fn check_compatible(&self, dims: &TraceDims) -> Result<()> {
        if self.hidden_dim != dims.hidden_dim || self.vocab_size != dims.vocab_size {
            return Err(Error::Shape(format!(
                "head (d={}, V={}) does not match trace (d={}, V={})",
                self.hidden_dim, self.vocab_size, dims.hidden_dim, dims.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Member,
    Nonmember,
    Neighbor,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Member => "member",
            Label::Nonmember => "nonmember",
            Label::Neighbor => "neighbor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "member" => Some(Label::Member),
            "nonmember" => Some(Label::Nonmember),
            "neighbor" => Some(Label::Neighbor),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Trace file, relative to the manifest's directory unless absolute.
    pub trace: String,
    pub label: Label,
    pub group: String,
    pub id: String,
    /// Raw text bytes (UTF-8), used only by the compression baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory trace paths are resolved against.
    pub base_dir: std::path::PathBuf,
}

impl DatasetManifest {
    pub fn new(
        entries: Vec<ManifestEntry>,
        base_dir: impl Into<std::path::PathBuf>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> std::path::PathBuf {
        let p = std::path::Path::new(&entry.trace);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// A training run needs both classes.
    pub fn check_trainable(&self) -> Result<()> {
        if self.count(Label::Member) == 0 || self.count(Label::Nonmember) == 0 {
            return Err(Error::SingleClass);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}
