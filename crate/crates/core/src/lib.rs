//! Multiband time-of-arrival delay estimation.
//!
//! The crate simulates multiband OFDM channel-frequency-response measurements
//! with hardware phase distortions and estimates the line-of-sight path delay
//! with a two-stage global estimation (TSGE) scheme:
//!
//! 1. a coarse stage running turbo Bayesian inference (`turbo`) on a sparse
//!    delay-grid representation of a carrier-free signal model, and
//! 2. a refined stage minimizing the exact-model MAP objective by particle
//!    swarm optimization with closed-form least-squares gain elimination
//!    (`refine`).
//!
//! The `pipeline` module wires the two stages together, hosts the
//! gradient-descent baselines, and provides a seeded Monte-Carlo benchmark
//! harness with RMSE/CDF metrics and likelihood-landscape scans.

pub mod error;
pub mod grid;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod seeds;
pub mod turbo;

pub use error::{Error, Result};
pub use grid::{basis_matrix, measurement_matrix, steering_vector, timing_offset_diag, DelayGrid};
pub use model::{
    cfr_sample, observe, sample_channel, snr_to_noise_var, ChannelRealization, MultibandConfig,
    NoiseSpec, Observation, Subband,
};
pub use refine::{
    build_h, fitness, ls_gains, run_gradient_descent, run_pso_joint, run_pso_ls,
    search_space_from_coarse, GdOpts, ParamLayout, PsoOpts, RefinedEstimate, RefinedObjective,
    RefinedParams, SearchSpace,
};
pub use turbo::{
    e_step, extrinsic_a, extrinsic_b, lmmse_update, run_turbo_bi, support_messages, BGPrior,
    CoarseEstimate, EStepOpts, ModuleAState, ModuleBState, Surrogate, TurboOpts,
};
