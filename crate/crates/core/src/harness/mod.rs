//! Experiment layer: synthetic datasets, the toy training loop, compression
//! sweeps, toy iterative magnitude pruning, pass accounting and report
//! emission. The config file schema is documented in [`config`].

pub mod config;
pub mod dataset;
pub mod report;
pub mod suite;
pub mod sweep;
pub mod train;

pub use config::{ExperimentConfig, OutputFormat, ScorerSpec, ScheduleSpec};
pub use dataset::{gen_synthetic, Dataset};
pub use report::{SweepCell, SweepReport};
pub use suite::{run_verifiers, VerifyItem, VerifyReport};
pub use sweep::{imp_toy, pass_count, run_sweep, ImpReport};
pub use train::{evaluate_accuracy, train, Hyperparams, LossSpec, TrainHistory};
