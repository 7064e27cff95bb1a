//! GoRA: gradient-driven adaptive rank allocation and pseudo-inverse
//! initialization for low-rank adapters, at desk scale.
//!
//! The crate covers the full pipeline: a gradient probe over frozen base
//! weights, importance-driven rank allocation under a smoothed parameter
//! budget, pseudo-inverse adapter initialization scaled to a gamma-sized
//! gradient step, adapter training, and a deterministic simulation of the
//! data-parallel variant of the protocol.

pub mod adapter;
pub mod allocate;
pub mod config;
pub mod ddp;
pub mod error;
pub mod init;
pub mod manifest;
pub mod net;
pub mod numerics;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod tasks;
pub mod train;
pub mod verify;

pub use adapter::{AdapterSet, AdapterState, ScalingMode};
pub use allocate::{AllocConfig, ImportanceMetric, RankPlan};
pub use config::{parse_config, RunConfig};
pub use error::{GoraError, Result};
pub use net::{Batch, Network};
pub use numerics::{Matrix, Rng};
pub use probe::{ProbeConfig, ProbeResult};
pub use train::{OptimConfig, TrainRecord};
