//! Interacting particle systems simulated with the full `O(N²)` scheme, the
//! random batch method, and the random batch method with a control-variate
//! correction.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod batch;
pub mod control_variate;
pub mod ensemble;
mod error;
mod fastmath;
pub mod integrate;
pub mod models;
pub mod rng;

pub use analysis::{
    entropy_h, kde, l1_distance, mean_error, moments, rmse_over_repeats, DensityGrid, Grid,
    KdeConfig, Moments, RepeatSummary,
};
pub use batch::{draw_plan, make_batches, make_particle_batches, BatchMode, BatchPlan, Divisor};
pub use control_variate::{
    estimate_lambda, Clusters, CvConfig, CvState, LambdaEstimate, LambdaMode, ReferenceMean,
};
pub use ensemble::{init_ensemble, Ensemble, InitialLaw};
pub use error::{Error, Result};
pub use integrate::{
    coupled_run, coupled_run_configs, run, step, step_with_plan, ErrorReference, Method,
    PhaseTimes, RunOutput, SimConfig, Simulation, Snapshot, StepStats,
};
pub use models::{
    beta_equilibrium_density, maxwellian_density, Diffusion, Kernel, ModelSpec, Surrogate,
};
pub use rng::RngKey;
