//! Random traces and heads, and a direct-formula feature oracle that shares
//! no code with the extractor.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tracemia_core::{ModelHead, NormKind, SequenceTrace, TraceDims};

pub fn random_dims<R: Rng>(rng: &mut R) -> TraceDims {
    TraceDims::new(
        rng.random_range(1..=3),
        rng.random_range(1..=2),
        rng.random_range(2..=16),
        rng.random_range(1..=8),
        rng.random_range(2..=12),
    )
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// A valid trace with an arbitrary mask (at least two valid positions),
/// occasional zero hidden vectors, and a mix of random, uniform and one-hot
/// attention rows. Rows of padded queries hold junk the extractor must ignore.
pub fn random_trace<R: Rng>(rng: &mut R, dims: TraceDims, with_logits: bool) -> SequenceTrace {
    let (l_count, h_count, n, d, v) = (
        dims.n_layers,
        dims.n_heads,
        dims.seq_len,
        dims.hidden_dim,
        dims.vocab_size,
    );
    let mut mask: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.75))).collect();
    while mask.iter().filter(|&&m| m == 1).count() < 2 {
        let t = rng.random_range(0..n);
        mask[t] = 1;
    }
    let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
    let scale = [0.1, 1.0, 4.0][rng.random_range(0..3)];
    let mut hidden = Vec::with_capacity((l_count + 1) * n * d);
    for _ in 0..=l_count {
        for _ in 0..n {
            let zero = rng.random_bool(0.05);
            for _ in 0..d {
                hidden.push(if zero {
                    0.0
                } else {
                    (scale * normal(rng)) as f32
                });
            }
        }
    }
    let mut attn = vec![0f32; l_count * h_count * n * n];
    for lh in 0..l_count * h_count {
        for t in 0..n {
            let row = &mut attn[(lh * n + t) * n..][..n];
            if mask[t] == 0 {
                for a in row.iter_mut() {
                    *a = rng.random_range(-1.0..1.0);
                }
                continue;
            }
            let keys: Vec<usize> = (0..=t).filter(|&s| mask[s] == 1).collect();
            let weights: Vec<f64> = match rng.random_range(0..6) {
                0 => vec![1.0; keys.len()],
                1 => keys.iter().map(|&s| f64::from(u8::from(s == t))).collect(),
                _ => keys
                    .iter()
                    .map(|_| rng.random::<f64>().powi(3) + 1e-3)
                    .collect(),
            };
            let total: f64 = weights.iter().sum();
            for (&s, w) in keys.iter().zip(weights) {
                row[s] = (w / total) as f32;
            }
        }
    }
    let logits = with_logits.then(|| (0..n * v).map(|_| normal(rng) as f32).collect());
    SequenceTrace::new(dims, tokens, mask, hidden, attn, logits).unwrap()
}

pub fn random_head<R: Rng>(rng: &mut R, d: usize, v: usize) -> ModelHead {
    let norm_kind =
        [NormKind::LayerNorm, NormKind::RmsNorm, NormKind::Identity][rng.random_range(0..3)];
    ModelHead {
        hidden_dim: d,
        vocab_size: v,
        norm_kind,
        norm_epsilon: [1e-5, 1e-6, 0.1][rng.random_range(0..3)],
        gain: (0..d).map(|_| (1.0 + 0.3 * normal(rng)) as f32).collect(),
        bias: (0..d).map(|_| (0.2 * normal(rng)) as f32).collect(),
        unembed: (0..d * v).map(|_| normal(rng) as f32).collect(),
        unembed_bias: rng
            .random_bool(0.5)
            .then(|| (0..v).map(|_| normal(rng) as f32).collect()),
    }
}

/// Relative comparison with an absolute floor of 1 on the scale.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn h64(trace: &SequenceTrace, l: usize, t: usize) -> Vec<f64> {
    trace.hidden(l, t).iter().map(|&x| f64::from(x)).collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn cos_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn unit(a: &[f64]) -> Vec<f64> {
    let n = l2(a);
    a.iter()
        .map(|x| if n == 0.0 { 0.0 } else { x / n })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn pstd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

fn min(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn first_index_of(x: &[f64], target: f64) -> f64 {
    let i = x.iter().position(|&v| v == target).unwrap();
    i as f64 / (x.len() - 1).max(1) as f64
}

/// Lens distribution of one hidden vector, computed densely.
fn lens_probs(head: &ModelHead, h: &[f64]) -> Vec<f64> {
    let d = head.hidden_dim;
    let gain: Vec<f64> = head.gain.iter().map(|&x| f64::from(x)).collect();
    let bias: Vec<f64> = head.bias.iter().map(|&x| f64::from(x)).collect();
    let eps = f64::from(head.norm_epsilon);
    let z: Vec<f64> = match head.norm_kind {
        NormKind::Identity => h.to_vec(),
        NormKind::LayerNorm => {
            let mu = mean(h);
            let var = h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|k| (h[k] - mu) / (var + eps).sqrt() * gain[k] + bias[k])
                .collect()
        }
        NormKind::RmsNorm => {
            let ms = h.iter().map(|x| x * x).sum::<f64>() / d as f64;
            (0..d).map(|k| h[k] / (ms + eps).sqrt() * gain[k]).collect()
        }
    };
    let logits: Vec<f64> = (0..head.vocab_size)
        .map(|v| {
            let b = head.unembed_bias.as_ref().map_or(0.0, |b| f64::from(b[v]));
            b + (0..d)
                .map(|k| z[k] * f64::from(head.unembed[k * head.vocab_size + v]))
                .sum::<f64>()
        })
        .collect();
    let top = max(&logits);
    let e: Vec<f64> = logits.iter().map(|x| (x - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Every feature by name, straight from the definitions.
pub fn oracle_features(trace: &SequenceTrace, head: &ModelHead) -> HashMap<String, f64> {
    let dims = *trace.dims();
    let l_count = dims.n_layers;
    let valid: Vec<usize> = (0..dims.seq_len)
        .filter(|&t| trace.mask()[t] == 1)
        .collect();
    let m = valid.len();
    let mut out = HashMap::new();
    let six = |prefix: String, x: &[f64], out: &mut HashMap<String, f64>| {
        out.insert(format!("{prefix}_mean"), mean(x));
        out.insert(format!("{prefix}_min"), min(x));
        out.insert(format!("{prefix}_max"), max(x));
        out.insert(format!("{prefix}_std"), pstd(x));
        out.insert(format!("{prefix}_argmin"), first_index_of(x, min(x)));
        out.insert(format!("{prefix}_argmax"), first_index_of(x, max(x)));
    };

    for i in 0..l_count {
        let mut sur = Vec::new();
        let mut nsur = Vec::new();
        let mut stab = Vec::new();
        for &t in &valid {
            let (a, b) = (h64(trace, i, t), h64(trace, i + 1, t));
            sur.push(dist(&b, &a));
            nsur.push(dist(&unit(&b), &unit(&a)));
            stab.push(cos_or_zero(&b, &a));
        }
        six(format!("trans{i}_surprise"), &sur, &mut out);
        six(format!("trans{i}_nsurprise"), &nsur, &mut out);
        six(format!("trans{i}_stability"), &stab, &mut out);
    }

    for l in 0..=l_count {
        let (mut ent, mut conf, mut gap) = (Vec::new(), Vec::new(), Vec::new());
        for &t in &valid {
            let mut p = lens_probs(head, &h64(trace, l, t));
            ent.push(
                -p.iter()
                    .filter(|&&q| q > 0.0)
                    .map(|q| q * q.ln())
                    .sum::<f64>(),
            );
            p.sort_by(|a, b| b.total_cmp(a));
            conf.push(p[0]);
            gap.push(p[0] - p[1]);
        }
        for (name, x) in [("entropy", &ent), ("conf", &conf), ("gap", &gap)] {
            out.insert(format!("pred{l}_{name}_mean"), mean(x));
            out.insert(format!("pred{l}_{name}_min"), min(x));
            out.insert(format!("pred{l}_{name}_max"), max(x));
            out.insert(format!("pred{l}_{name}_std"), pstd(x));
        }
        out.insert(
            format!("pred{l}_conf_stability"),
            mean(&conf) / (pstd(&conf) + 1e-8),
        );
        for (name, k) in [("first", 0), ("mid", (m - 1) / 2), ("last", m - 1)] {
            let window: Vec<f64> = (0..m)
                .filter(|&j| j + 2 >= k && j <= k + 2)
                .map(|j| conf[j])
                .collect();
            out.insert(format!("pred{l}_tok{name}_confstd"), pstd(&window));
        }
    }

    let heads = dims.n_heads;
    for l in 0..l_count {
        let a = |h: usize, t: usize, s: usize| f64::from(trace.attention(l, h, t, s));
        let abar = |t: usize, s: usize| (0..heads).map(|h| a(h, t, s)).sum::<f64>() / heads as f64;
        let row_entropy = |w: &[f64]| -w.iter().map(|x| x * (x + 1e-10).log2()).sum::<f64>();
        let causal = |j: usize| valid[..=j].to_vec();

        let mut entries = Vec::new();
        let (mut ent, mut conc, mut selfa) = (0.0, 0.0, 0.0);
        let (mut num, mut den) = (0.0, 0.0);
        for (j, &t) in valid.iter().enumerate() {
            let w: Vec<f64> = causal(j).iter().map(|&s| abar(t, s)).collect();
            ent += row_entropy(&w);
            conc += max(&w);
            selfa += abar(t, t);
            for &s in &causal(j) {
                num += (t - s) as f64 * abar(t, s);
                den += abar(t, s);
            }
            entries.extend(w);
        }
        let tau = mean(&entries);
        // Same tie margin as the extractor (f32 storage).
        let sparse = entries.iter().filter(|&&e| e < tau - 1e-6).count();
        let prev: Vec<f64> = (1..m).map(|j| abar(valid[j], valid[j - 1])).collect();
        out.insert(format!("attn{l}_entropy"), ent / m as f64);
        out.insert(format!("attn{l}_concentration"), conc / m as f64);
        out.insert(
            format!("attn{l}_sparsity"),
            sparse as f64 / entries.len() as f64,
        );
        out.insert(format!("attn{l}_selfattn"), selfa / m as f64);
        out.insert(format!("attn{l}_prevbias"), mean(&prev));
        out.insert(
            format!("attn{l}_meandist"),
            if den > 0.0 { num / den } else { 0.0 },
        );

        let mut head_ent = Vec::new();
        let mut head_focus = Vec::new();
        for h in 0..heads {
            let rows: Vec<Vec<f64>> = valid
                .iter()
                .enumerate()
                .map(|(j, &t)| causal(j).iter().map(|&s| a(h, t, s)).collect())
                .collect();
            head_ent.push(rows.iter().map(|w| row_entropy(w)).sum::<f64>() / m as f64);
            head_focus.push(rows.iter().map(|w| max(w)).sum::<f64>() / m as f64);
        }
        for (name, x) in [("entropy", &head_ent), ("focus", &head_focus)] {
            out.insert(format!("attn{l}_head_{name}_mean"), mean(x));
            out.insert(format!("attn{l}_head_{name}_std"), pstd(x));
            out.insert(format!("attn{l}_head_{name}_min"), min(x));
            out.insert(format!("attn{l}_head_{name}_max"), max(x));
        }
    }

    for l in 0..=l_count {
        let prefix_mean = |j: usize| -> Vec<f64> {
            let mut acc = vec![0.0; dims.hidden_dim];
            for &t in &valid[..=j] {
                for (a, x) in acc.iter_mut().zip(h64(trace, l, t)) {
                    *a += x;
                }
            }
            acc.iter().map(|a| a / (j + 1) as f64).collect()
        };
        let steps: Vec<f64> = (1..m)
            .map(|j| dist(&prefix_mean(j), &prefix_mean(j - 1)))
            .collect();
        out.insert(format!("ctx{l}_mean"), mean(&steps));
        out.insert(format!("ctx{l}_std"), pstd(&steps));
        out.insert(format!("ctx{l}_min"), min(&steps));
        out.insert(format!("ctx{l}_max"), max(&steps));
        out.insert(
            format!("pos{l}_firstlast"),
            cos_or_zero(&h64(trace, l, valid[0]), &h64(trace, l, valid[m - 1])),
        );
    }
    out
}
