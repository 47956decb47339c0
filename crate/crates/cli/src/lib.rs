//! Experiment driver for `hamgp`: configuration, training runs, flow-map
//! evaluation, forward prediction and chain diagnostics.
//!
//! Every subcommand is a pure function of its config, seeds and input
//! artifacts, so reruns reproduce files byte for byte.

pub mod artifacts;
pub mod config;
pub mod diagnose;
pub mod flowmap;
pub mod predict;
pub mod train;

pub use artifacts::{ChainRecord, Manifest, RunStatus};
pub use config::ExperimentConfig;
pub use diagnose::{diagnose, DiagnosticsReport};
pub use flowmap::{eval_flowmap, FlowMapReport, MeanModel};
pub use predict::{predict, PredictionReport};
pub use train::{train, TrainOutcome};
