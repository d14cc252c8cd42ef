use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracemia_core::baselines::{score_manifest, write_baseline_csv, Method};
use tracemia_core::io::{read_head_file, read_manifest_file};
use tracemia_core::metrics::{
    evaluate, evaluate_neighbors, fast_layerwise_config, layerwise_auc, LayerAuc,
};
use tracemia_core::synth::{self, SynthSpec};
use tracemia_core::toy::{self, ToyParams, ToyRecipe};
use tracemia_core::{
    extract_matrix, train_pipeline, CVReport, FeatureMatrix, PipelineConfig, RandomForestModel,
};

#[derive(Parser)]
#[command(
    name = "tracemia",
    version,
    about = "Membership inference from hidden states and attention maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract one feature row per manifest entry into a CSV.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only columns tagged with this layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Nested cross-validation, then a final forest on a stratified 80% split.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 420)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score member and nonmember rows with a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out AUC using one layer's features at a time.
    Layerwise {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long, default_value_t = 420)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Default hyperparameters instead of a search per layer.
        #[arg(long)]
        fast: bool,
    },
    /// Zero-shot evaluation on rows labeled neighbor.
    Neighbors {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Output-only reference attacks.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Percent of lowest-probability tokens for mink.
        #[arg(long, default_value_t = 20.0)]
        k: f64,
        /// Manifest of lowercased traces, paired by id.
        #[arg(long)]
        paired: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted-signal dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model from a recipe. The sampled member and held-out
    /// sequences are written next to the parameters.
    ToyTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export toy-model traces for member and nonmember sequences.
    ToyExport {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        members: PathBuf,
        #[arg(long)]
        nonmembers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ppl,
    Mink,
    Zlib,
    Lowercase,
}

type AnyResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

#[derive(Serialize)]
struct Importance<'a> {
    name: &'a str,
    importance: f64,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    #[serde(flatten)]
    cv: &'a CVReport,
    feature_importances: Vec<Importance<'a>>,
}

fn create(path: &Path) -> AnyResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    let f = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> AnyResult {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_layerwise_csv(curve: &[LayerAuc], path: &Path) -> AnyResult {
    let mut w = create(path)?;
    writeln!(w, "layer,auc")?;
    for c in curve {
        writeln!(w, "{},{}", c.layer, c.auc)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> AnyResult {
    match cli.command {
        Command::Extract {
            manifest,
            head,
            out,
            layer,
            workers,
        } => {
            let manifest = read_manifest_file(&manifest)?;
            let head = read_head_file(&head)?;
            let m = extract_matrix(&manifest, &head, layer, workers)?;
            m.write_csv_file(&out)?;
            eprintln!(
                "{} rows × {} features → {}",
                m.n_rows(),
                m.n_features(),
                out.display()
            );
        }
        Command::Train {
            features,
            seed,
            out,
            report,
            workers,
        } => {
            let m = FeatureMatrix::read_csv_file(&features)?;
            let config = PipelineConfig {
                workers,
                ..PipelineConfig::with_seed(seed)
            };
            let (model, cv) = train_pipeline(&m, &config)?;
            let raw = model.forest.feature_importances();
            let mut importances: Vec<Importance> = model
                .feature_names
                .iter()
                .zip(raw)
                .map(|(name, importance)| Importance { name, importance })
                .collect();
            importances.sort_by(|a, b| b.importance.total_cmp(&a.importance));
            model.save(&out)?;
            write_json(
                &TrainReport {
                    cv: &cv,
                    feature_importances: importances,
                },
                &report,
            )?;
            eprintln!(
                "fold AUC {:.4} ± {:.4}, held-out AUC {:.4}",
                cv.fold_auc_mean, cv.fold_auc_std, cv.heldout_auc
            );
        }
        Command::Eval {
            model,
            features,
            out,
        } => {
            let model = RandomForestModel::load(&model)?;
            let m = FeatureMatrix::read_csv_file(&features)?;
            write_json(&evaluate(&model, &m, 0.5)?, &out)?;
        }
        Command::Layerwise {
            manifest,
            head,
            seed,
            out,
            workers,
            fast,
        } => {
            let manifest = read_manifest_file(&manifest)?;
            let head = read_head_file(&head)?;
            let config = if fast {
                fast_layerwise_config(seed)
            } else {
                PipelineConfig::with_seed(seed)
            };
            let curve = layerwise_auc(&manifest, &head, &config, workers)?;
            write_layerwise_csv(&curve, &out)?;
        }
        Command::Neighbors {
            model,
            features,
            threshold,
            out,
        } => {
            let model = RandomForestModel::load(&model)?;
            let m = FeatureMatrix::read_csv_file(&features)?;
            let e = evaluate_neighbors(&model, &m, threshold)?;
            write_json(&e, &out)?;
            let precision = e
                .precision
                .map_or("undefined".to_string(), |p| format!("{p:.4}"));
            eprintln!("precision {precision}, recall {:.4}", e.recall);
        }
        Command::Baseline {
            manifest,
            head,
            method,
            k,
            paired,
            out,
        } => {
            let manifest = read_manifest_file(&manifest)?;
            let head = read_head_file(&head)?;
            let paired = paired.map(|p| read_manifest_file(&p)).transpose()?;
            let method = match method {
                MethodArg::Ppl => Method::Perplexity,
                MethodArg::Mink => Method::MinK { k_percent: k },
                MethodArg::Zlib => Method::Zlib,
                MethodArg::Lowercase => Method::Lowercase,
            };
            let rows = score_manifest(&manifest, &head, method, paired.as_ref(), None)?;
            let mut w = create(&out)?;
            write_baseline_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Command::Synth { spec, out } => {
            let spec = SynthSpec::load(&spec)?;
            let manifest = synth::generate(&spec, &out, None)?;
            eprintln!("{} traces → {}", manifest.entries.len(), out.display());
        }
        Command::ToyTrain { config, out } => {
            let recipe = ToyRecipe::load(&config)?;
            let result = toy::run_recipe(&recipe)?;
            let dir = out
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            result.outcome.params.save(&out)?;
            toy::write_sequences(&result.members, dir.join("members.jsonl"))?;
            toy::write_sequences(&result.heldout, dir.join("heldout.jsonl"))?;
            if let Some(loss) = result.outcome.losses.last() {
                eprintln!("final batch loss {loss:.4}");
            }
        }
        Command::ToyExport {
            params,
            members,
            nonmembers,
            out,
        } => {
            let params = ToyParams::load(&params)?;
            let members = toy::read_sequences(&members)?;
            let nonmembers = toy::read_sequences(&nonmembers)?;
            let manifest = toy::export_dataset(&params, &members, &nonmembers, &out)?;
            eprintln!("{} traces → {}", manifest.entries.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors exit with 2 inside `parse`.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
