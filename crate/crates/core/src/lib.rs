//! Off-policy evaluation for human-centric environments, where the true
//! state is only partially observed and rewards arrive aggregated at the end
//! of an episode.
//!
//! The pipeline reconstructs per-step rewards from aggregated ones, calibrates
//! them on critical observations by averaging over nearest-neighbor events,
//! and feeds the result to weighted importance sampling. Classical
//! estimators, validation metrics and a synthetic sepsis simulator with exact
//! oracle values are included for benchmarking.

pub mod critical_obs;
pub mod env_sepsis;
pub mod estimators;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod neighbors;
pub mod policy;
pub mod reward_reconstruction;
pub mod tabular_mdp;
pub mod trajectory;

pub use policy::Policy;
pub use trajectory::{Dataset, StepRewards, Trajectory, Transition};
