//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs under `cargo test`; expect several minutes in release mode.

mod common;

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracemia_core::baselines::{score_manifest, Method};
use tracemia_core::classifier::{train_pipeline_audited, LeakageLog};
use tracemia_core::io::{
    encode_head, encode_trace, read_head_file, read_trace_file, write_head_file, write_trace_file,
};
use tracemia_core::metrics::{evaluate_neighbors, fast_layerwise_config, layerwise_auc};
use tracemia_core::synth::{self, Scope, SynthSpec};
use tracemia_core::toy::{self, ToyConfig, ToyRecipe};
use tracemia_core::{
    auc, extract_features, extract_matrix, CVReport, FeatureMatrix, Label, PipelineConfig,
    RandomForestModel,
};

use common::{close, oracle_features, random_dims, random_head, random_trace};

type Check = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let mut result = f();
        let took = start.elapsed();
        if let (Ok(detail), Some(limit)) = (&result, limit) {
            if took > limit {
                result = Err(format!("{detail}; took {took:.1?}, limit {limit:?}"));
            }
        }
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{:.1}s]", took.as_secs_f64()),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL {name}: {detail} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn feature_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(420);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let dims = random_dims(&mut rng);
        let trace = random_trace(&mut rng, dims, false);
        let head = random_head(&mut rng, dims.hidden_dim, dims.vocab_size);
        let got = extract_features(&trace, &head).map_err(|e| format!("trial {trial}: {e}"))?;
        let want = oracle_features(&trace, &head);
        if want.len() != got.names.len() {
            return Err(format!(
                "trial {trial}: {} features, oracle has {}",
                got.names.len(),
                want.len()
            ));
        }
        for (name, &v) in got.names.iter().zip(&got.values) {
            let w = *want
                .get(name)
                .ok_or_else(|| format!("trial {trial}: oracle lacks {name}"))?;
            worst = worst.max((v - w).abs() / v.abs().max(w.abs()).max(1.0));
            if !close(v, w, 1e-9) {
                return Err(format!("trial {trial}: {name} = {v}, oracle {w}"));
            }
        }
    }
    Ok(format!("1000 traces, worst scaled error {worst:.1e}"))
}

fn auc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(420);
    for set in 0..500 {
        let n = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..5u8)) * 0.5)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        labels.shuffle(&mut rng);
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        let got = auc(&scores, &labels).map_err(|e| e.to_string())?;
        if got != wins / pairs {
            return Err(format!("set {set}: auc {got}, pairwise {}", wins / pairs));
        }
    }
    Ok("500 sets equal exactly".into())
}

fn gradient_check() -> Check {
    let config = ToyConfig {
        vocab_size: 16,
        max_len: 6,
        n_layers: 2,
        n_heads: 2,
        hidden_dim: 8,
        seed: 420,
    };
    // At the 0.02 init scale some ReLU inputs sit within one step of zero,
    // where central differences straddle the kink.
    let params = toy::init_with_std(&config, 0.3).map_err(|e| e.to_string())?;
    let tokens = [3, 14, 1, 5, 9, 2];
    let report = toy::gradient_check(&params, &tokens, 1e-4, 1e-6).map_err(|e| e.to_string())?;
    let worst = report
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    ensure(
        worst.max_rel_error <= 1e-3,
        format!(
            "{} tensors, worst {} at {:.2e}",
            report.len(),
            worst.tensor,
            worst.max_rel_error
        ),
    )
}

fn padding_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(421);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let dims = random_dims(&mut rng);
        let with_logits = rng.random_bool(0.5);
        let trace = random_trace(&mut rng, dims, with_logits);
        let head = random_head(&mut rng, dims.hidden_dim, dims.vocab_size);
        let a = extract_features(&trace, &head).map_err(|e| e.to_string())?;
        let b =
            extract_features(&trace.padded(8), &head).map_err(|e| format!("trial {trial}: {e}"))?;
        for (x, y) in a.values.iter().zip(&b.values) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(
        worst <= 1e-6,
        format!("100 traces, max difference {worst:.1e}"),
    )
}

fn round_trip(dir: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(422);
    let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for i in 0..100 {
        let dims = random_dims(&mut rng);
        let with_logits = rng.random_bool(0.5);
        let trace = random_trace(&mut rng, dims, with_logits);
        let path = dir.join(format!("{i}.mtrc"));
        write_trace_file(&trace, &path).map_err(|e| e.to_string())?;
        let back = read_trace_file(&path).map_err(|e| e.to_string())?;
        let same = back.dims() == trace.dims()
            && back.token_ids() == trace.token_ids()
            && back.mask() == trace.mask()
            && bits(back.hidden_states()) == bits(trace.hidden_states())
            && bits(back.attentions()) == bits(trace.attentions())
            && back.final_logits().map(bits) == trace.final_logits().map(bits)
            && std::fs::read(&path).map_err(|e| e.to_string())?
                == encode_trace(&back).map_err(|e| e.to_string())?;
        if !same {
            return Err(format!("trace {i} changed"));
        }

        let head = random_head(&mut rng, dims.hidden_dim, dims.vocab_size);
        let path = dir.join(format!("{i}.mthd"));
        write_head_file(&head, &path).map_err(|e| e.to_string())?;
        let hb = read_head_file(&path).map_err(|e| e.to_string())?;
        let same = hb.norm_kind == head.norm_kind
            && hb.norm_epsilon.to_bits() == head.norm_epsilon.to_bits()
            && bits(&hb.gain) == bits(&head.gain)
            && bits(&hb.bias) == bits(&head.bias)
            && bits(&hb.unembed) == bits(&head.unembed)
            && hb.unembed_bias.as_deref().map(bits) == head.unembed_bias.as_deref().map(bits)
            && std::fs::read(&path).map_err(|e| e.to_string())?
                == encode_head(&hb).map_err(|e| e.to_string())?;
        if !same {
            return Err(format!("head {i} changed"));
        }
    }
    Ok("100 traces and 100 heads bit-identical".into())
}

fn with_shuffled_labels(m: &FeatureMatrix, seed: u64) -> FeatureMatrix {
    let mut out = m.filter_labels(&[Label::Member, Label::Nonmember]);
    out.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

struct SynthRuns {
    matrix: FeatureMatrix,
    model: RandomForestModel,
    report: CVReport,
    log: LeakageLog,
}

fn synth_pipeline(runs: &mut Option<SynthRuns>) -> Check {
    let spec = SynthSpec {
        n_neighbors: 500,
        ..SynthSpec::default()
    };
    let config = PipelineConfig::with_seed(420);
    let matrix = synth::feature_matrix(&spec, None).map_err(|e| e.to_string())?;
    let log = LeakageLog::new();
    let (model, report) =
        train_pipeline_audited(&matrix, &config, &log).map_err(|e| e.to_string())?;

    let null = SynthSpec {
        delta: 0.0,
        rho: 0.0,
        beta: 0.0,
        ..SynthSpec::default()
    };
    let null_matrix = synth::feature_matrix(&null, None).map_err(|e| e.to_string())?;
    let (_, null_report) = train_pipeline_audited(&null_matrix, &config, &LeakageLog::new())
        .map_err(|e| e.to_string())?;
    let shuffled = with_shuffled_labels(&matrix, 7);
    let (_, shuffled_report) = train_pipeline_audited(&shuffled, &config, &LeakageLog::new())
        .map_err(|e| e.to_string())?;

    let (a, b, c) = (
        report.heldout_auc,
        null_report.heldout_auc,
        shuffled_report.heldout_auc,
    );
    let detail = format!("planted {a:.4}, zero-effect {b:.4}, shuffled {c:.4}");
    let control = |x: f64| (0.40..=0.60).contains(&x);
    *runs = Some(SynthRuns {
        matrix,
        model,
        report,
        log,
    });
    ensure(a >= 0.95 && control(b) && control(c), detail)
}

fn toy_end_to_end(dir: &Path) -> Check {
    let recipe_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../recipes/toy.json");
    let recipe = ToyRecipe::load(&recipe_path).map_err(|e| e.to_string())?;
    let out = toy::run_recipe(&recipe).map_err(|e| e.to_string())?;
    let manifest = toy::export_dataset(&out.outcome.params, &out.members, &out.heldout, dir)
        .map_err(|e| e.to_string())?;
    let head = read_head_file(dir.join("head.mthd")).map_err(|e| e.to_string())?;
    let matrix = extract_matrix(&manifest, &head, None, None).map_err(|e| e.to_string())?;
    let (_, report) = tracemia_core::train_pipeline(&matrix, &PipelineConfig::with_seed(420))
        .map_err(|e| e.to_string())?;

    let ppl = score_manifest(&manifest, &head, Method::Perplexity, None, None)
        .map_err(|e| e.to_string())?;
    let held_out: HashSet<&String> = report.test_ids.iter().collect();
    let test: Vec<_> = ppl.iter().filter(|r| held_out.contains(&r.id)).collect();
    let ppl_auc = auc(
        &test.iter().map(|r| r.score).collect::<Vec<_>>(),
        &test
            .iter()
            .map(|r| r.label == Label::Member)
            .collect::<Vec<_>>(),
    )
    .map_err(|e| e.to_string())?;
    let final_loss = out.outcome.losses.last().copied().unwrap_or(f64::NAN);
    let ours = report.heldout_auc;
    ensure(
        ours >= 0.75 && ours >= ppl_auc,
        format!(
            "held-out AUC {ours:.4} vs perplexity {ppl_auc:.4} on the same {} traces (final train loss {final_loss:.3})",
            test.len()
        ),
    )
}

fn determinism(runs: &SynthRuns, dir: &Path) -> Check {
    let config = PipelineConfig {
        workers: Some(3),
        ..PipelineConfig::with_seed(420)
    };
    let (model, report) = train_pipeline_audited(&runs.matrix, &config, &LeakageLog::new())
        .map_err(|e| e.to_string())?;
    let (a, b) = (dir.join("a.json"), dir.join("b.json"));
    runs.model.save(&a).map_err(|e| e.to_string())?;
    model.save(&b).map_err(|e| e.to_string())?;
    let models_equal = std::fs::read(&a).map_err(|e| e.to_string())?
        == std::fs::read(&b).map_err(|e| e.to_string())?;
    let reports_equal = serde_json::to_vec_pretty(&runs.report).map_err(|e| e.to_string())?
        == serde_json::to_vec_pretty(&report).map_err(|e| e.to_string())?;
    let std = report.fold_auc_std;
    ensure(
        models_equal && reports_equal && std <= 0.05,
        format!("model equal {models_equal}, report equal {reports_equal}, fold AUC std {std:.4}"),
    )
}

fn leakage(runs: &SynthRuns) -> Check {
    let uses = runs.log.uses();
    let leaks = uses.iter().filter(|u| !u.overlap().is_empty()).count();
    // 5 outer folds × (20 trials × 3 inner folds + 1 validation) + final split.
    let expected = 5 * (20 * 3 + 1) + 1;
    ensure(
        leaks == 0 && uses.len() == expected,
        format!(
            "{} scaler applications, {leaks} touching their own fit rows",
            uses.len()
        ),
    )
}

fn layerwise(dir: &Path) -> Check {
    let spec = SynthSpec {
        n_layers: 4,
        rho: 0.0,
        scope: Scope::MiddleLayer,
        ..SynthSpec::default()
    };
    let target = spec.focus_layers()[0];
    let manifest = synth::generate(&spec, dir, None).map_err(|e| e.to_string())?;
    let head = read_head_file(dir.join("head.mthd")).map_err(|e| e.to_string())?;
    let curve = layerwise_auc(&manifest, &head, &fast_layerwise_config(420), None)
        .map_err(|e| e.to_string())?;
    let peak = curve.iter().max_by(|a, b| a.auc.total_cmp(&b.auc)).unwrap();
    let runner_up = curve
        .iter()
        .filter(|c| c.layer != target)
        .map(|c| c.auc)
        .fold(0.0, f64::max);
    let at_target = curve.iter().find(|c| c.layer == target).unwrap().auc;
    let shown: Vec<String> = curve
        .iter()
        .map(|c| format!("{}:{:.3}", c.layer, c.auc))
        .collect();
    ensure(
        peak.layer == target && at_target - runner_up >= 0.1,
        format!(
            "curve [{}], margin {:.3} at layer {target}",
            shown.join(" "),
            at_target - runner_up
        ),
    )
}

fn neighbors(runs: &SynthRuns) -> Check {
    let e = evaluate_neighbors(&runs.model, &runs.matrix, 0.5).map_err(|e| e.to_string())?;
    let p = e
        .precision
        .ok_or("no neighbor predicted member; precision undefined")?;
    ensure(
        (0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&e.recall),
        format!(
            "precision {p:.3}, recall {:.3} over {} neighbors and {} nonmembers",
            e.recall, e.n_positive, e.n_negative
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let sub = |name: &str| {
        let p = tmp.path().join(name);
        std::fs::create_dir_all(&p).expect("temp subdir");
        p
    };
    let mut suite = Suite { failed: 0 };
    let minute = Duration::from_secs(60);

    suite.run("feature oracle", Some(minute), feature_oracle);
    suite.run("auc oracle", Some(minute), auc_oracle);
    suite.run("gradient check", Some(2 * minute), gradient_check);
    let mut runs = None;
    suite.run(
        "synthetic planted signal and controls",
        Some(5 * minute),
        || synth_pipeline(&mut runs),
    );
    suite.run("toy end-to-end", Some(10 * minute), || {
        toy_end_to_end(&sub("toy"))
    });
    suite.run("padding invariance", None, padding_invariance);
    suite.run("round trip", None, || round_trip(&sub("roundtrip")));
    match &runs {
        Some(r) => {
            suite.run("determinism", None, || determinism(r, &sub("determinism")));
            suite.run("leakage guard", None, || leakage(r));
            suite.run("neighbor zero-shot", None, || neighbors(r));
        }
        None => {
            for name in ["determinism", "leakage guard", "neighbor zero-shot"] {
                suite.run(name, None, || Err("synthetic run did not complete".into()));
            }
        }
    }
    suite.run("layer-wise curve", None, || layerwise(&sub("layerwise")));

    println!("{} criteria failed", suite.failed);
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
