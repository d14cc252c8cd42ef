//! Inputs shared by the benchmarks.

use tracemia_core::classifier::Columns;
use tracemia_core::synth::{feature_matrix, generate_trace, synth_head, SynthSpec};
use tracemia_core::{Label, ModelHead, SequenceTrace};

pub fn spec(n_layers: usize, seq_len: usize, per_class: usize) -> SynthSpec {
    SynthSpec {
        n_layers,
        seq_len,
        hidden_dim: 64,
        vocab_size: 512,
        n_members: per_class,
        n_nonmembers: per_class,
        ..SynthSpec::default()
    }
}

pub fn traces(spec: &SynthSpec, n: usize) -> (ModelHead, Vec<SequenceTrace>) {
    let head = synth_head(spec);
    let label = |i: usize| {
        if i % 2 == 0 {
            Label::Member
        } else {
            Label::Nonmember
        }
    };
    let traces = (0..n)
        .map(|i| generate_trace(spec, &head, label(i), i))
        .collect();
    (head, traces)
}

/// Column-major features and 0/1 labels for a default synthetic dataset.
pub fn training_set(per_class: usize) -> (Columns, Vec<u8>) {
    let m = feature_matrix(
        &SynthSpec {
            n_members: per_class,
            n_nonmembers: per_class,
            ..SynthSpec::default()
        },
        None,
    )
    .expect("valid spec");
    let y = m
        .labels
        .iter()
        .map(|&l| u8::from(l == Label::Member))
        .collect();
    (Columns::from_rows(&m.rows), y)
}

/// Scores with many ties and their labels, from a fixed multiplicative hash.
pub fn scored(n: usize) -> (Vec<f64>, Vec<bool>) {
    let h = |i: usize| (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
    let scores = (0..n).map(|i| (h(i) % 1000) as f64).collect();
    let labels = (0..n).map(|i| h(i + n) % 2 == 0).collect();
    (scores, labels)
}
