//! Robust downlink beamforming for multi-user MISO systems.
//!
//! Solvers for weighted-sum-rate maximization under a total power budget:
//!
//! - [`fp`]: fractional programming with closed-form auxiliary updates and a
//!   bisected power multiplier,
//! - [`baselines`]: WMMSE and regularized zero-forcing,
//! - [`unfolding`]: the deep-unfolded network with trainable projected
//!   gradient step sizes,
//! - [`training`]: quantile-based training of those step sizes against
//!   sampled channel estimation errors,
//! - [`experiments`]: robust-rate evaluation and the layer, error and timing
//!   sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod channel;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fp;
pub mod model;
pub mod training;
pub mod unfolding;

pub use channel::{inject_uncertainty, sample_channels, Seed, Stream, UncertaintyBatch};
pub use error::{Error, Result};
pub use model::{
    interference_plus_noise, project_power, qt_objective, signal_power, sinr, wsr, AuxiliaryState, BeamformingMatrix,
    CMatrix, ChannelMatrix, ObjectiveMode, SystemConfig,
};
pub use unfolding::{StepSizeSchedule, UnfoldTrace};
