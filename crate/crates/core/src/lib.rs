//! Simulator for heterogeneous analog/digital inference of mixture-of-experts
//! (MoE) blocks.
//!
//! The crate models the two dominant analog in-memory computing (AIMC)
//! nonidealities, weight-programming noise and DAC/ADC quantization, runs MoE
//! blocks with a per-expert choice of digital or analog backend, ranks experts
//! by their maximum neuron norm score, and trains a small expert-choice MoE on
//! a synthetic sequence task to study which experts are noise sensitive.
//!
//! Layout:
//!
//! - [`numerics`]: dense matrices and seeded random streams.
//! - [`quantizer`]: DAC/ADC quantization and input-range calibration.
//! - [`prognoise`]: PCM weight-programming noise.
//! - [`analog`]: tiled analog matrix-vector products.
//! - [`moe`]: experts, routing and the block forward pass.
//! - [`partition`]: expert scoring and digital/analog placement.
//! - [`synthetic`]: the sequence classification task.
//! - [`trainer`]: hinge-loss SGD, specialization probes and the noise studies.
//! - [`perfmodel`]: throughput and energy estimates.
//! - [`config`] and [`recipes`]: experiment configuration and runners used by
//!   the command-line tool.

pub mod analog;
pub mod config;
pub mod error;
pub mod moe;
pub mod numerics;
pub mod partition;
pub mod perfmodel;
pub mod prognoise;
pub mod quantizer;
pub mod recipes;
pub mod report;
pub mod synthetic;
pub mod trainer;

pub use analog::{build_tile_plan, AnalogLayer, TileBlock, TilePlan};
pub use error::{Error, Result};
pub use moe::{
    Activation, Backend, BackendAssignment, ExpertKind, ExpertWeights, MoeBlock, RoutingMode,
};
pub use numerics::{Matrix, RngStream};
pub use partition::{ExpertScoreReport, Metric, PartitionPlan};
pub use prognoise::NoiseSpec;
pub use quantizer::{CalibState, QuantizerConfig};
pub use synthetic::{SequenceSample, TaskSpec};
pub use trainer::{TheoryModel, TrainConfig};
