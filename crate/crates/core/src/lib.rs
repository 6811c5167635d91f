//! Numerical tools for the diffusion model of many-server queues.

pub mod diffusion;
pub mod convergence;
pub mod coupling;
pub mod distributions;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod noise;
pub mod queue;
pub mod stationary;
pub mod stats;
pub mod tables;

pub use distributions::{
    check_assumptions, AgeGrid, AssumptionReport, AssumptionThresholds, DistributionConfig, Family,
    ServiceDistribution,
};
pub use diffusion::{BuildOptions, DiffusionModel, DiffusionPath};
pub use error::{Error, Result};
pub use grid::{Grid, GridFunction, H1GridFunction, Perturbation, StatePoint, TailRule, TimePath};
pub use kernels::{RenewalKernel, RenewalSolution};
pub use noise::{NoiseAccumulator, NoiseField, Weight};
pub use queue::{run_queue, scale_state, InitialState, QueueConfig, QueuePath};
pub use tables::GridTables;
