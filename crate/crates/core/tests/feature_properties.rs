mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracemia_core::{extract_features, SequenceTrace};

use common::{close, oracle_features, random_dims, random_head, random_trace};

#[test]
fn matches_oracle_on_random_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..200 {
        let dims = random_dims(&mut rng);
        let trace = random_trace(&mut rng, dims, false);
        let head = random_head(&mut rng, dims.hidden_dim, dims.vocab_size);
        let got = extract_features(&trace, &head).unwrap();
        let want = oracle_features(&trace, &head);
        assert_eq!(want.len(), got.values.len());
        for (name, &v) in got.names.iter().zip(&got.values) {
            let w = want[name];
            assert!(close(v, w, 1e-9), "trial {trial}: {name} = {v}, oracle {w}");
        }
    }
}

fn scaled(trace: &SequenceTrace, layers: &[usize], c: f32) -> SequenceTrace {
    let dims = *trace.dims();
    let block = dims.seq_len * dims.hidden_dim;
    let mut hidden = trace.hidden_states().to_vec();
    for &l in layers {
        for x in &mut hidden[l * block..(l + 1) * block] {
            *x *= c;
        }
    }
    SequenceTrace::new(
        dims,
        trace.token_ids().to_vec(),
        trace.mask().to_vec(),
        hidden,
        trace.attentions().to_vec(),
        None,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranges_hold(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = random_dims(&mut rng);
        let trace = random_trace(&mut rng, dims, false);
        let head = random_head(&mut rng, dims.hidden_dim, dims.vocab_size);
        let fv = extract_features(&trace, &head).unwrap();
        let n_valid = trace.mask().iter().filter(|&&m| m == 1).count() as f64;
        for (name, &v) in fv.names.iter().zip(&fv.values) {
            prop_assert!(v.is_finite());
            let unit = ["_concentration", "_selfattn", "_prevbias", "_sparsity", "argmin", "argmax"];
            if unit.iter().any(|s| name.ends_with(s)) {
                prop_assert!((-1e-9..=1.0 + 1e-6).contains(&v), "{name} = {v}");
            }
            if name.contains("stability_") || name.ends_with("_firstlast") {
                prop_assert!((-1.0..=1.0).contains(&v), "{name} = {v}");
            }
            if name.starts_with("attn") && name.ends_with("_entropy") {
                prop_assert!(v >= -1e-9 && v <= n_valid.log2() + 1e-6, "{name} = {v}");
            }
        }
        for stat_base in fv.names.iter().filter_map(|n| n.strip_suffix("_mean")) {
            let get = |s: &str| fv.get(&format!("{stat_base}_{s}")).unwrap();
            prop_assert!(get("min") <= get("mean") && get("mean") <= get("max"), "{stat_base}");
            prop_assert!(get("std") >= 0.0);
        }
    }

    #[test]
    fn scaling_two_layers_scales_only_surprise(seed in any::<u64>(), c in 0.25f32..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = random_dims(&mut rng);
        let trace = random_trace(&mut rng, dims, false);
        let head = random_head(&mut rng, dims.hidden_dim, dims.vocab_size);
        let before = extract_features(&trace, &head).unwrap();
        let after = extract_features(&scaled(&trace, &[0, 1], c), &head).unwrap();
        let c = f64::from(c);
        for stat in ["mean", "min", "max", "std"] {
            let get = |fv: &tracemia_core::FeatureVector, m: &str| fv.get(&format!("trans0_{m}_{stat}")).unwrap();
            prop_assert!(close(get(&after, "surprise"), c * get(&before, "surprise"), 1e-5));
            prop_assert!(close(get(&after, "stability"), get(&before, "stability"), 1e-5));
            prop_assert!(close(get(&after, "nsurprise"), get(&before, "nsurprise"), 1e-5));
        }
    }
}
