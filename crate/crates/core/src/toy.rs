//! A small decoder-only transformer with hand-written backward pass, used to
//! produce real traces from a model that has memorized its training set.
//!
//! Pre-norm blocks (`x += Attn(LN(x))`, `x += MLP(LN(x))`), ReLU MLP of width
//! `4d`, learned absolute positions and an untied unembedding. All math is
//! `f64`; traces are stored as `f32`.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_head_file, write_manifest_file, write_trace_file};
use crate::rng::rng_for;
use crate::trace::{
    DatasetManifest, Label, ManifestEntry, ModelHead, NormKind, SequenceTrace, TraceDims,
};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const PARAMS_MAGIC: [u8; 4] = *b"MTPM";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.vocab_size > 0
            && self.max_len > 0
            && self.n_layers > 0
            && self.n_heads > 0
            && self.hidden_dim > 0;
        if !all_positive || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid toy config {self:?}"
            )));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_in: Vec<f64>,
    pub b_in: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

/// Weights are row-major `in × out` and multiply row vectors from the right.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub config: ToyConfig,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub blocks: Vec<Block>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    pub unembed: Vec<f64>,
}

impl ToyParams {
    /// All parameters zero, with the shapes `config` implies.
    pub fn zeros(config: ToyConfig) -> Self {
        let (v, n, d, m) = (
            config.vocab_size,
            config.max_len,
            config.hidden_dim,
            config.mlp_dim(),
        );
        let block = Block {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w_in: vec![0.0; d * m],
            b_in: vec![0.0; m],
            w_out: vec![0.0; m * d],
            b_out: vec![0.0; d],
        };
        Self {
            config,
            tok_emb: vec![0.0; v * d],
            pos_emb: vec![0.0; n * d],
            blocks: vec![block; config.n_layers],
            lnf_gain: vec![0.0; d],
            lnf_bias: vec![0.0; d],
            unembed: vec![0.0; d * v],
        }
    }

    /// Named tensors in a fixed order (also the on-disk order).
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let named: [(&str, &Vec<f64>); 12] = [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("w_in", &b.w_in),
                ("b_in", &b.b_in),
                ("w_out", &b.w_out),
                ("b_out", &b.b_out),
            ];
            out.extend(
                named
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{l}.{n}"), t)),
            );
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Same order as [`ToyParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in self.blocks.iter_mut() {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_in,
                &mut b.b_in,
                &mut b.w_out,
                &mut b.b_out,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.unembed]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn add_scaled(&mut self, other: &ToyParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.1) {
                *x += scale * y;
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(64 + 8 * self.n_params());
        bytes.extend_from_slice(&PARAMS_MAGIC);
        bytes.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.vocab_size, c.max_len, c.n_layers, c.n_heads, c.hidden_dim] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&c.seed.to_le_bytes());
        for (_, t) in self.tensors() {
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::from(e).in_file(path))?;
        Self::decode(&bytes).map_err(|e| e.in_file(path))
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 8 + 6 * 8;
        if bytes.len() < HEADER {
            return Err(Error::Truncated {
                expected: HEADER as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != PARAMS_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != PARAMS_VERSION {
            return Err(Error::BadVersion(version));
        }
        let word = |i: usize| {
            u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"))
        };
        let as_usize = |v: u64| usize::try_from(v).map_err(|_| Error::DimOverflow);
        let config = ToyConfig {
            vocab_size: as_usize(word(0))?,
            max_len: as_usize(word(1))?,
            n_layers: as_usize(word(2))?,
            n_heads: as_usize(word(3))?,
            hidden_dim: as_usize(word(4))?,
            seed: word(5),
        };
        config.validate()?;
        let mut params = ToyParams::zeros(config);
        let expected = HEADER as u64 + 8 * params.n_params() as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 > expected {
            return Err(Error::TrailingBytes {
                expected,
                found: bytes.len() as u64,
            });
        }
        let mut values = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(params)
    }
}

/// Seeded Gaussian init with std [`INIT_STD`]; norm gains 1, all biases 0.
pub fn init_params(config: &ToyConfig) -> Result<ToyParams> {
    init_with_std(config, INIT_STD)
}

/// [`init_params`] with a different weight scale.
pub fn init_with_std(config: &ToyConfig, std: f64) -> Result<ToyParams> {
    config.validate()?;
    let mut p = ToyParams::zeros(*config);
    let mut rng = rng_for(config.seed, &[0]);
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut fill = |t: &mut Vec<f64>| t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    fill(&mut p.tok_emb);
    fill(&mut p.pos_emb);
    for b in p.blocks.iter_mut() {
        for t in [
            &mut b.wq,
            &mut b.wk,
            &mut b.wv,
            &mut b.wo,
            &mut b.w_in,
            &mut b.w_out,
        ] {
            fill(t);
        }
        b.ln1_gain.fill(1.0);
        b.ln2_gain.fill(1.0);
    }
    p.lnf_gain.fill(1.0);
    fill(&mut p.unembed);
    Ok(p)
}

/// `a (n×k) · w (k×m)`.
fn matmul(a: &[f64], n: usize, k: usize, w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &wv) in row.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                *o += aip * wv;
            }
        }
    }
    out
}

/// `g (n×m) · wᵀ` where `w` is `k×m`.
fn matmul_bt(g: &[f64], n: usize, m: usize, w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let gi = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = gi
                .iter()
                .zip(&w[p * m..(p + 1) * m])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// `dw (k×m) += aᵀ (n×k) · g (n×m)`.
fn acc_at_b(a: &[f64], n: usize, k: usize, g: &[f64], m: usize, dw: &mut [f64]) {
    for i in 0..n {
        let gi = &g[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &gv) in dw[p * m..(p + 1) * m].iter_mut().zip(gi) {
                *o += aip * gv;
            }
        }
    }
}

fn acc_rows(g: &[f64], m: usize, db: &mut [f64]) {
    for row in g.chunks_exact(m) {
        for (o, v) in db.iter_mut().zip(row) {
            *o += v;
        }
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[t * d + j] = h;
            y[t * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &[f64],
    d: usize,
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for t in 0..n {
        let (dyr, xh) = (&dy[t * d..(t + 1) * d], &cache.xhat[t * d..(t + 1) * d]);
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[t * d + j] = cache.rstd[t] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `H × n × n`, zero above the diagonal.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
}

struct Cache {
    /// Residual stream: embedding output, then each block's output.
    states: Vec<Vec<f64>>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    f: Vec<f64>,
    logits: Vec<f64>,
}

fn check_tokens(params: &ToyParams, tokens: &[u32]) -> Result<()> {
    let c = &params.config;
    if tokens.is_empty() {
        return Err(Error::SequenceTooShort(0));
    }
    if tokens.len() > c.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} exceeds context length {}",
            tokens.len(),
            c.max_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {t} ≥ vocab size {}",
            c.vocab_size
        )));
    }
    Ok(())
}

fn run_forward(params: &ToyParams, tokens: &[u32]) -> Cache {
    let c = &params.config;
    let (n, d, m, nh, dh, vsz) = (
        tokens.len(),
        c.hidden_dim,
        c.mlp_dim(),
        c.n_heads,
        c.head_dim(),
        c.vocab_size,
    );
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = vec![0.0; n * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        for j in 0..d {
            x[t * d + j] = params.tok_emb[tok * d + j] + params.pos_emb[t * d + j];
        }
    }
    let mut states = vec![x.clone()];
    let mut blocks = Vec::with_capacity(c.n_layers);
    for b in &params.blocks {
        let (a, ln1) = layer_norm(&x, d, &b.ln1_gain, &b.ln1_bias);
        let q = matmul(&a, n, d, &b.wq, d);
        let k = matmul(&a, n, d, &b.wk, d);
        let v = matmul(&a, n, d, &b.wv, d);
        let mut probs = vec![0.0; nh * n * n];
        let mut o = vec![0.0; n * d];
        for h in 0..nh {
            let off = h * dh;
            for t in 0..n {
                let p = &mut probs[(h * n + t) * n..(h * n + t + 1) * n];
                let qt = &q[t * d + off..t * d + off + dh];
                for u in 0..=t {
                    p[u] = scale
                        * qt.iter()
                            .zip(&k[u * d + off..u * d + off + dh])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                }
                let max = p[..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for pu in p[..=t].iter_mut() {
                    *pu = (*pu - max).exp();
                    sum += *pu;
                }
                for pu in p[..=t].iter_mut() {
                    *pu /= sum;
                }
                let ot = &mut o[t * d + off..t * d + off + dh];
                for u in 0..=t {
                    for (oj, vj) in ot.iter_mut().zip(&v[u * d + off..u * d + off + dh]) {
                        *oj += p[u] * vj;
                    }
                }
            }
        }
        let attn = matmul(&o, n, d, &b.wo, d);
        for (xi, ai) in x.iter_mut().zip(&attn) {
            *xi += ai;
        }
        let (cn, ln2) = layer_norm(&x, d, &b.ln2_gain, &b.ln2_bias);
        let mut z = matmul(&cn, n, d, &b.w_in, m);
        for row in z.chunks_exact_mut(m) {
            for (zj, bj) in row.iter_mut().zip(&b.b_in) {
                *zj += bj;
            }
        }
        let r: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        let out = matmul(&r, n, m, &b.w_out, d);
        for (t, row) in out.chunks_exact(d).enumerate() {
            for j in 0..d {
                x[t * d + j] += row[j] + b.b_out[j];
            }
        }
        states.push(x.clone());
        blocks.push(BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            c: cn,
            z,
            r,
        });
    }
    let (f, lnf) = layer_norm(&x, d, &params.lnf_gain, &params.lnf_bias);
    let logits = matmul(&f, n, d, &params.unembed, vsz);
    Cache {
        states,
        blocks,
        lnf,
        f,
        logits,
    }
}

/// `−ln p(tokens[t+1] | ≤ t)` for each position but the last, and the
/// gradient of their mean with respect to the logits.
fn next_token_losses(
    logits: &[f64],
    tokens: &[u32],
    vsz: usize,
    want_grad: bool,
) -> (Vec<f64>, Vec<f64>) {
    let n = tokens.len();
    let mut terms = Vec::with_capacity(n.saturating_sub(1));
    let mut grad = if want_grad {
        vec![0.0; n * vsz]
    } else {
        Vec::new()
    };
    for t in 0..n.saturating_sub(1) {
        let row = &logits[t * vsz..(t + 1) * vsz];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let target = tokens[t + 1] as usize;
        terms.push(lse - row[target]);
        if want_grad {
            let inv = 1.0 / (n - 1) as f64;
            let g = &mut grad[t * vsz..(t + 1) * vsz];
            for (gv, &lv) in g.iter_mut().zip(row) {
                *gv = (lv - lse).exp() * inv;
            }
            g[target] -= inv;
        }
    }
    (terms, grad)
}

/// Runs the model and packages the result as a trace. With `pad_to`, the
/// trace is right-padded to that length: padded positions have token 0,
/// mask 0, zero hidden states, zero attention rows and zero logits.
pub fn forward(
    params: &ToyParams,
    tokens: &[u32],
    pad_to: Option<usize>,
) -> Result<(SequenceTrace, Vec<f64>)> {
    check_tokens(params, tokens)?;
    let c = &params.config;
    let n = tokens.len();
    let np = pad_to.unwrap_or(n);
    if np < n {
        return Err(Error::InvalidArgument(format!(
            "cannot pad length {n} to {np}"
        )));
    }
    let cache = run_forward(params, tokens);
    let (terms, _) = next_token_losses(&cache.logits, tokens, c.vocab_size, false);
    let (d, nh, v) = (c.hidden_dim, c.n_heads, c.vocab_size);
    let dims = TraceDims::new(c.n_layers, nh, np, d, v);

    let mut hidden = vec![0f32; (c.n_layers + 1) * np * d];
    for (l, s) in cache.states.iter().enumerate() {
        for (i, &val) in s.iter().enumerate() {
            hidden[l * np * d + i] = val as f32;
        }
    }
    let mut attn = vec![0f32; c.n_layers * nh * np * np];
    for (l, bc) in cache.blocks.iter().enumerate() {
        for h in 0..nh {
            for t in 0..n {
                let src = &bc.probs[(h * n + t) * n..(h * n + t + 1) * n];
                let dst = ((l * nh + h) * np + t) * np;
                for (u, &p) in src.iter().enumerate() {
                    attn[dst + u] = p as f32;
                }
            }
        }
    }
    let mut logits = vec![0f32; np * v];
    for (i, &val) in cache.logits.iter().enumerate() {
        logits[i] = val as f32;
    }
    let mut ids = tokens.to_vec();
    ids.resize(np, 0);
    let mut mask = vec![1u8; n];
    mask.resize(np, 0);
    let trace = SequenceTrace::new(dims, ids, mask, hidden, attn, Some(logits))?;
    Ok((trace, terms))
}

/// Mean next-token cross-entropy in nats.
pub fn loss(params: &ToyParams, tokens: &[u32]) -> Result<f64> {
    check_tokens(params, tokens)?;
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort(tokens.len()));
    }
    let cache = run_forward(params, tokens);
    let (terms, _) = next_token_losses(&cache.logits, tokens, params.config.vocab_size, false);
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn backward(params: &ToyParams, tokens: &[u32]) -> Result<(f64, ToyParams)> {
    check_tokens(params, tokens)?;
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort(tokens.len()));
    }
    let c = &params.config;
    let (n, d, m, nh, dh, vsz) = (
        tokens.len(),
        c.hidden_dim,
        c.mlp_dim(),
        c.n_heads,
        c.head_dim(),
        c.vocab_size,
    );
    let scale = 1.0 / (dh as f64).sqrt();
    let cache = run_forward(params, tokens);
    let (terms, dlogits) = next_token_losses(&cache.logits, tokens, vsz, true);
    let loss = terms.iter().sum::<f64>() / terms.len() as f64;

    let mut g = ToyParams::zeros(*c);
    acc_at_b(&cache.f, n, d, &dlogits, vsz, &mut g.unembed);
    let df = matmul_bt(&dlogits, n, vsz, &params.unembed, d);
    let mut dx = layer_norm_back(
        &df,
        d,
        &cache.lnf,
        &params.lnf_gain,
        &mut g.lnf_gain,
        &mut g.lnf_bias,
    );

    for l in (0..c.n_layers).rev() {
        let (b, bc, gb) = (&params.blocks[l], &cache.blocks[l], &mut g.blocks[l]);
        // MLP branch.
        acc_at_b(&bc.r, n, m, &dx, d, &mut gb.w_out);
        acc_rows(&dx, d, &mut gb.b_out);
        let mut dz = matmul_bt(&dx, n, d, &b.w_out, m);
        for (dzi, &zi) in dz.iter_mut().zip(&bc.z) {
            if zi <= 0.0 {
                *dzi = 0.0;
            }
        }
        acc_at_b(&bc.c, n, d, &dz, m, &mut gb.w_in);
        acc_rows(&dz, m, &mut gb.b_in);
        let dc = matmul_bt(&dz, n, m, &b.w_in, d);
        let dmid = layer_norm_back(
            &dc,
            d,
            &bc.ln2,
            &b.ln2_gain,
            &mut gb.ln2_gain,
            &mut gb.ln2_bias,
        );
        for (a, v) in dx.iter_mut().zip(&dmid) {
            *a += v;
        }

        // Attention branch.
        acc_at_b(&bc.o, n, d, &dx, d, &mut gb.wo);
        let d_o = matmul_bt(&dx, n, d, &b.wo, d);
        let (mut dq, mut dk, mut dv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
        let mut dp = vec![0.0; n];
        for h in 0..nh {
            let off = h * dh;
            for t in 0..n {
                let p = &bc.probs[(h * n + t) * n..(h * n + t + 1) * n];
                let dot = &d_o[t * d + off..t * d + off + dh];
                let mut s = 0.0;
                for u in 0..=t {
                    let vu = &bc.v[u * d + off..u * d + off + dh];
                    dp[u] = dot.iter().zip(vu).map(|(a, b)| a * b).sum();
                    s += p[u] * dp[u];
                    for (dvj, oj) in dv[u * d + off..u * d + off + dh].iter_mut().zip(dot) {
                        *dvj += p[u] * oj;
                    }
                }
                for u in 0..=t {
                    let ds = p[u] * (dp[u] - s) * scale;
                    for j in 0..dh {
                        dq[t * d + off + j] += ds * bc.k[u * d + off + j];
                        dk[u * d + off + j] += ds * bc.q[t * d + off + j];
                    }
                }
            }
        }
        acc_at_b(&bc.a, n, d, &dq, d, &mut gb.wq);
        acc_at_b(&bc.a, n, d, &dk, d, &mut gb.wk);
        acc_at_b(&bc.a, n, d, &dv, d, &mut gb.wv);
        let mut da = matmul_bt(&dq, n, d, &b.wq, d);
        for (src, w) in [(&dk, &b.wk), (&dv, &b.wv)] {
            for (a, v) in da.iter_mut().zip(matmul_bt(src, n, d, w, d)) {
                *a += v;
            }
        }
        let din = layer_norm_back(
            &da,
            d,
            &bc.ln1,
            &b.ln1_gain,
            &mut gb.ln1_gain,
            &mut gb.ln1_bias,
        );
        for (a, v) in dx.iter_mut().zip(&din) {
            *a += v;
        }
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        for j in 0..d {
            g.tok_emb[tok * d + j] += dx[t * d + j];
            g.pos_emb[t * d + j] += dx[t * d + j];
        }
    }
    Ok((loss, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ToyParams,
    /// Mean batch loss at each step, before that step's update.
    pub losses: Vec<f64>,
}

/// Adam (β₁ 0.9, β₂ 0.999, ε 1e-8) on mean batch loss. Batches walk through
/// a fresh seeded permutation of the members each epoch.
pub fn train(
    params: &ToyParams,
    members: &[Vec<u32>],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    if members.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 || config.lr.is_nan() || config.lr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "invalid training config {config:?}"
        )));
    }
    for s in members {
        check_tokens(params, s)?;
        if s.len() < 2 {
            return Err(Error::SequenceTooShort(s.len()));
        }
    }
    let mut p = params.clone();
    let mut m1 = ToyParams::zeros(p.config);
    let mut m2 = ToyParams::zeros(p.config);
    let mut losses = Vec::with_capacity(config.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..members.len()).collect();
                order.shuffle(&mut rng_for(config.seed, &[epoch]));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        // Per-sequence gradients in parallel, summed in batch order.
        let results = batch
            .par_iter()
            .map(|&i| backward(&p, &members[i]))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = ToyParams::zeros(p.config);
        let mut loss = 0.0;
        let inv = 1.0 / batch.len() as f64;
        for (l, g) in &results {
            loss += l * inv;
            grad.add_scaled(g, inv);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);

        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
        let moments = m1.tensors_mut().into_iter().zip(m2.tensors_mut());
        for ((w, (ma, mb)), (_, gr)) in p.tensors_mut().into_iter().zip(moments).zip(grad.tensors())
        {
            for i in 0..w.len() {
                ma[i] = B1 * ma[i] + (1.0 - B1) * gr[i];
                mb[i] = B2 * mb[i] + (1.0 - B2) * gr[i] * gr[i];
                w[i] -= config.lr * (ma[i] / c1) / ((mb[i] / c2).sqrt() + EPS);
            }
        }
        if !p.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainOutcome { params: p, losses })
}

/// The final normalization and unembedding, as used by the logit lens.
pub fn model_head(params: &ToyParams) -> ModelHead {
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    ModelHead {
        hidden_dim: params.config.hidden_dim,
        vocab_size: params.config.vocab_size,
        norm_kind: NormKind::LayerNorm,
        norm_epsilon: LN_EPS as f32,
        gain: f32s(&params.lnf_gain),
        bias: f32s(&params.lnf_bias),
        unembed: f32s(&params.unembed),
        unembed_bias: None,
    }
}

/// A token sequence with an id, one JSON object per line in `.jsonl` files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl SequenceRecord {
    /// Record whose text is the token ids separated by spaces.
    pub fn from_tokens(id: impl Into<String>, tokens: Vec<u32>) -> Self {
        let text = tokens
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        Self {
            id: id.into(),
            tokens,
            text: Some(text),
        }
    }
}

pub fn read_sequences(path: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    let path = path.as_ref();
    let read = || -> Result<Vec<SequenceRecord>> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    };
    read().map_err(|e| e.in_file(path))
}

pub fn write_sequences(records: &[SequenceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let write = || -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| e.in_file(path))
}

/// Writes `head.mthd`, one `traces/<id>.mtrc` per sequence and
/// `manifest.jsonl` into `dir`. Members are listed first.
pub fn export_dataset(
    params: &ToyParams,
    members: &[SequenceRecord],
    nonmembers: &[SequenceRecord],
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let traces_dir = dir.join("traces");
    std::fs::create_dir_all(&traces_dir).map_err(|e| Error::from(e).in_file(&traces_dir))?;
    write_head_file(&model_head(params), dir.join("head.mthd"))?;
    let labelled: Vec<(&SequenceRecord, Label)> = members
        .iter()
        .map(|r| (r, Label::Member))
        .chain(nonmembers.iter().map(|r| (r, Label::Nonmember)))
        .collect();
    let entries = labelled
        .par_iter()
        .map(|(r, label)| {
            if r.id.is_empty() || r.id.contains(['/', '\\']) || r.id.starts_with('.') {
                return Err(Error::InvalidArgument(format!(
                    "id {:?} cannot be used as a file name",
                    r.id
                )));
            }
            if r.tokens.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "sequence {} has {} tokens; features need at least 2",
                    r.id,
                    r.tokens.len()
                )));
            }
            let (trace, _) = forward(params, &r.tokens, None)?;
            let rel = format!("traces/{}.mtrc", r.id);
            write_trace_file(&trace, dir.join(&rel))?;
            Ok(ManifestEntry {
                trace: rel,
                label: *label,
                group: "toy".into(),
                id: r.id.clone(),
                text: r.text.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(entries, dir)?;
    write_manifest_file(&manifest.entries, dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// A first-order Markov chain over the vocabulary: every state moves to
/// `successors` distinct next tokens with Dirichlet(1) probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub successors: usize,
    pub seed: u64,
}

pub struct MarkovChain {
    spec: MarkovSpec,
    /// Per state: (next token, cumulative probability).
    table: Vec<Vec<(u32, f64)>>,
}

impl MarkovChain {
    pub fn new(spec: MarkovSpec) -> Result<Self> {
        if spec.vocab_size == 0
            || spec.successors == 0
            || spec.successors > spec.vocab_size
            || spec.seq_len < 2
        {
            return Err(Error::InvalidArgument(format!(
                "invalid Markov spec {spec:?}"
            )));
        }
        let mut rng = rng_for(spec.seed, &[0]);
        let table = (0..spec.vocab_size)
            .map(|_| {
                let mut states: Vec<u32> = (0..spec.vocab_size as u32).collect();
                let (picked, _) = states.partial_shuffle(&mut rng, spec.successors);
                let picked = picked.to_vec();
                let w: Vec<f64> = picked.iter().map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = w.iter().sum();
                let mut acc = 0.0;
                picked
                    .into_iter()
                    .zip(w)
                    .map(|(s, wi)| {
                        acc += wi / total;
                        (s, acc)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { spec, table })
    }

    /// `count` sequences from an independent stream.
    pub fn sample(&self, count: usize, stream: u64) -> Vec<Vec<u32>> {
        let mut rng = rng_for(self.spec.seed, &[1, stream]);
        (0..count)
            .map(|_| {
                let mut s = vec![rng.random_range(0..self.spec.vocab_size as u32)];
                while s.len() < self.spec.seq_len {
                    let row = &self.table[*s.last().expect("nonempty") as usize];
                    let u: f64 = rng.random();
                    let next = row
                        .iter()
                        .find(|(_, c)| u < *c)
                        .unwrap_or(row.last().expect("nonempty"))
                        .0;
                    s.push(next);
                }
                s
            })
            .collect()
    }
}

/// Everything needed to reproduce a trained toy model and its data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecipe {
    pub model: ToyConfig,
    pub corpus: MarkovSpec,
    pub n_members: usize,
    pub n_heldout: usize,
    pub train: TrainConfig,
}

impl ToyRecipe {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::read(path)
            .map_err(Error::from)
            .and_then(|b| Ok(serde_json::from_slice(&b)?))
            .map_err(|e| e.in_file(path))
    }
}

pub struct RecipeOutput {
    pub outcome: TrainOutcome,
    pub members: Vec<SequenceRecord>,
    pub heldout: Vec<SequenceRecord>,
}

/// Samples members and held-out sequences from the same chain, then trains
/// on the members only.
pub fn run_recipe(recipe: &ToyRecipe) -> Result<RecipeOutput> {
    if recipe.corpus.vocab_size != recipe.model.vocab_size
        || recipe.corpus.seq_len > recipe.model.max_len
    {
        return Err(Error::InvalidArgument(
            "corpus does not fit the model".into(),
        ));
    }
    let chain = MarkovChain::new(recipe.corpus)?;
    let members = chain.sample(recipe.n_members, 0);
    let heldout = chain.sample(recipe.n_heldout, 1);
    let params = init_params(&recipe.model)?;
    let outcome = train(&params, &members, &recipe.train)?;
    let records = |seqs: Vec<Vec<u32>>, prefix: &str| -> Vec<SequenceRecord> {
        seqs.into_iter()
            .enumerate()
            .map(|(i, s)| SequenceRecord::from_tokens(format!("{prefix}{i:04}"), s))
            .collect()
    };
    Ok(RecipeOutput {
        outcome,
        members: records(members, "m"),
        heldout: records(heldout, "h"),
    })
}

/// Per-tensor result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub tensor: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Central differences with step `h` on every parameter. The relative error
/// of one entry is `|a − f| / max(|a|, |f|, floor)`.
pub fn gradient_check(
    params: &ToyParams,
    tokens: &[u32],
    h: f64,
    floor: f64,
) -> Result<Vec<GradCheck>> {
    let (_, analytic) = backward(params, tokens)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic.tensors()[ti].1.len();
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for i in 0..len {
            let mut p = params.clone();
            let orig = p.tensors_mut()[ti][i];
            p.tensors_mut()[ti][i] = orig + h;
            let up = loss(&p, tokens)?;
            p.tensors_mut()[ti][i] = orig - h;
            let down = loss(&p, tokens)?;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.tensors()[ti].1[i];
            let err = (a - fd).abs();
            abs = abs.max(err);
            rel = rel.max(err / a.abs().max(fd.abs()).max(floor));
        }
        out.push(GradCheck {
            tensor: name,
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }
    Ok(out)
}

/// Dimensions of the trace `forward` produces for a sequence of length `n`.
pub fn trace_dims(config: &ToyConfig, n: usize) -> TraceDims {
    TraceDims::new(
        config.n_layers,
        config.n_heads,
        n,
        config.hidden_dim,
        config.vocab_size,
    )
}
