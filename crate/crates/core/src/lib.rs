//! Linear probes for perceptual voice-quality dimensions (VQDs) on frozen
//! audio embeddings.
//!
//! The crate covers the whole evaluation loop: annotated manifests
//! ([`corpus`]), the `VQDE` embedding file format ([`embedstore`]), Lasso and
//! L2-logistic probe solvers ([`linmod`]), validation-split model selection
//! ([`modelsel`]), evaluation statistics with bootstrap intervals
//! ([`metrics`]), experiment drivers ([`harness`]) and a synthetic corpus
//! generator for ground-truth testing ([`synth`]).

pub mod cli;
pub mod corpus;
pub mod embedstore;
pub mod harness;
pub mod linmod;
pub mod metrics;
pub mod modelsel;
pub mod synth;

pub use corpus::{Category, Dimension, Emotion, Manifest, Split, UtteranceRecord};
pub use embedstore::{DesignMatrix, EmbeddingTable};
pub use linmod::{ProbeModel, ProbeTask, Standardizer};
pub use metrics::{MetricKind, MetricReport};
