//! Federated class-incremental learning simulator.
//!
//! A desk-scale implementation of a multi-level forgetting-mitigation
//! protocol for federated class-incremental learning:
//!
//! * [`nn`]: a small MLP feature extractor plus linear classifier with
//!   per-loss, per-parameter-group analytic gradients and Adam.
//! * [`data`]: synthetic Gaussian-cluster datasets, CSV feature files,
//!   disjoint task schedules and Dirichlet Non-IID client partitions.
//! * [`memory`]: online class prototypes, class-quota reservoir replay
//!   buffer and prototype-guided drift compensation.
//! * [`client`]: local training with class-reweighted loss, distillation,
//!   drift-compensated replay, forgetting-aware loss weights and gradient
//!   projection on the feature extractor.
//! * [`server`]: feature-extractor averaging, class-aware classifier
//!   aggregation, prototype fusion and communication-cost accounting.
//! * [`orchestrator`]: the task/round loop, evaluation, metrics and the
//!   baseline / ablation / Non-IID suites.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod memory;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod server;

pub use client::{ClientState, ClientTrace, ClientUpdate};
pub use config::{DataSource, ExperimentConfig, MethodFlags};
pub use data::{ClientPartition, Dataset, Split, TaskSchedule};
pub use error::{Error, Result};
pub use memory::{DriftTable, PrototypeStore, ReplayBuffer};
pub use nn::{GradientVector, ModelParams, OptimizerState, ParamGroup};
pub use orchestrator::{run_experiment, MetricsReport, RunOutput};
