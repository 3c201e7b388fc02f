//! Stochastic policies for both players and the estimators built on them.
//!
//! Squashing of raw actions into action boxes happens in the environment; the
//! stored pre-squash action and its Gaussian log-density are used in every
//! score term, so no change-of-variables correction is applied.

mod estimators;
mod gaussian;
mod params;
mod tabular;

pub use estimators::{
    adapt, adapt_steps, hessian_estimate, hessian_parts, meta_gradient, pg_estimate,
    trajectory_log_prob_hessian, trajectory_score, Baseline, GradEstimate, GradientMode, HessianParts,
    MetaGradient, HESSIAN_DIM_CAP,
};
pub use gaussian::LOG_STD_FLOOR;
pub use params::{Arch, PolicyParams, CHECKPOINT_VERSION};
