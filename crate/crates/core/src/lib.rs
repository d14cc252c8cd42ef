//! Membership inference from a language model's internal processing.
//!
//! Traces of hidden states and attention maps are turned into fixed-length
//! behavioral feature vectors, and a random forest learns to tell sequences
//! the model was trained on from sequences it was not.
//!
//! The crate is organized bottom-up:
//!
//! - [`trace`] / [`io`]: the trace data model and its binary file formats
//! - [`lens`]: per-layer next-token distributions via the logit lens
//! - [`features`] / [`matrix`]: the feature extractor and feature matrices
//! - [`classifier`]: CART random forest, scaler, nested cross-validation
//! - [`metrics`], [`baselines`]: evaluation and output-only reference attacks
//! - [`toy`], [`synth`]: trace generators (a trainable toy transformer and a
//!   planted-signal simulator)

pub mod baselines;
pub mod classifier;
pub mod error;
pub mod features;
pub mod io;
pub mod lens;
pub mod matrix;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod toy;
pub mod trace;

pub use classifier::{
    train_pipeline, CVReport, MaxFeatures, PipelineConfig, RFHyperParams, RandomForestModel,
    ScalerParams,
};
pub use error::{Error, Result};
pub use features::{extract_features, feature_registry, FeatureVector, StatSummary};
pub use lens::{LayerPredictions, Lens};
pub use matrix::{extract_matrix, FeatureMatrix};
pub use metrics::auc;
pub use trace::{
    valid_positions, validate_trace, DatasetManifest, Label, ManifestEntry, ModelHead, NormKind,
    SequenceTrace, TraceDims, ValidationReport,
};
