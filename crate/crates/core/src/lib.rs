//! Desk-scale laboratory for training classifiers on a weighted mix of real
//! and synthetic in-distribution data and measuring post-hoc OOD detection.
//!
//! Modules, bottom up:
//! - [`datasets`]: synthetic benchmarks (ID train/test, near- and far-OOD) and CSV IO.
//! - [`generator`]: class-conditional Gaussians, synthetic pools, Fréchet distance.
//! - [`nnet`]: rectifier MLP with exact gradients, CE / OE / LogitNorm losses, Nesterov SGD.
//! - [`trainer`]: in-batch real/synthetic composition and the training loop.
//! - [`scoring`]: post-hoc OOD scorers and the threshold detector.
//! - [`metrics`], [`harness`], [`config`], [`report`]: evaluation and experiment sweeps.

pub mod config;
pub mod datasets;
pub mod error;
pub mod generator;
pub mod harness;
pub mod metrics;
pub mod nnet;
pub mod report;
pub mod scoring;
pub mod seed;
pub mod trainer;

pub use config::{ExperimentConfig, GeneratorSettings, SweepAxis};
pub use datasets::{make_benchmark, BenchmarkSpec, BenchmarkSuite, LabeledSet};
pub use error::{Error, Result};
pub use generator::{ClassGaussianModel, Gaussian, SyntheticPool};
pub use harness::{evaluate, run_experiment, MetricReport, ResultRow, Split};
pub use metrics::{auroc, fpr_at_tpr};
pub use nnet::{LossMode, MlpClassifier};
pub use scoring::{FitStats, ScoreMethod, ScorerParams};
pub use trainer::{train, SioConfig, TrainRun};
