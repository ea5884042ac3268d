//! Off-policy value estimators sharing one importance-weight engine.
//!
//! Every estimator is a pure function of a dataset, a per-step reward
//! channel, precomputed importance ratios and a list of trajectory indices.
//! Passing `0..N` evaluates the full dataset; passing a resample with
//! repetitions evaluates one bootstrap replica without copying data.

mod hope;
mod importance;
mod model_based;

pub use hope::{
    rand_hope_channel, reconstruct_rewards, soft_hope_channel, sparse_hope_channel, HopeOptions,
    QBackup, Reconstruction, ThresholdMode,
};
pub use importance::{
    importance_weight, is_estimate, pdis_estimate, phwis_estimate, wis_estimate, Behavior,
    ImportanceWeights,
};
pub use model_based::{dr_estimate, fqe_estimate, wdr_estimate};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neighbors::NeighborError;
use crate::reward_reconstruction::ReconstructionError;
use crate::trajectory::{Dataset, StepRewards};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EstimatorError {
    #[error("behavior probability is 0 where the target acts: trajectory {trajectory}, step {step}, observation {observation}, action {action}")]
    SupportViolation {
        trajectory: usize,
        step: usize,
        observation: usize,
        action: usize,
    },
    #[error("trajectory {0} has no stored behavior probabilities")]
    MissingBehaviorProbs(usize),
    #[error("importance weights sum to zero")]
    DegenerateWeights,
    #[error("no trajectories to evaluate")]
    EmptySample,
    #[error("reward channel does not match the dataset shape")]
    ChannelShape,
    #[error("unknown estimator {0:?}")]
    UnknownEstimator(String),
    #[error("normalized return needs g_ub > g_lb, got [{lb}, {ub}]")]
    InvalidBounds { lb: f64, ub: f64 },
    #[error("return {value} outside [{lb}, {ub}]")]
    OutOfBounds { value: f64, lb: f64, ub: f64 },
    #[error("target-policy Q backup requested without a target policy")]
    MissingTarget,
    #[error(transparent)]
    Reconstruction(#[from] ReconstructionError),
    #[error(transparent)]
    Neighbors(#[from] NeighborError),
}

/// Inputs shared by the importance-sampling family.
#[derive(Debug, Clone, Copy)]
pub struct OpeData<'a> {
    pub dataset: &'a Dataset,
    pub weights: &'a ImportanceWeights,
    pub rewards: &'a StepRewards,
    pub gamma: f64,
}

impl OpeData<'_> {
    fn check(&self, sample: &[usize]) -> Result<(), EstimatorError> {
        if sample.is_empty() {
            return Err(EstimatorError::EmptySample);
        }
        if !self.rewards.matches_shape(self.dataset) {
            return Err(EstimatorError::ChannelShape);
        }
        Ok(())
    }
}

/// Every trajectory index, in order.
pub fn full_sample(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Affine rescaling of a return into `[0, 1]`.
pub fn normalized_return(value: f64, g_lb: f64, g_ub: f64) -> Result<f64, EstimatorError> {
    if !(g_ub > g_lb) {
        return Err(EstimatorError::InvalidBounds { lb: g_lb, ub: g_ub });
    }
    if !(g_lb..=g_ub).contains(&value) {
        return Err(EstimatorError::OutOfBounds {
            value,
            lb: g_lb,
            ub: g_ub,
        });
    }
    Ok((value - g_lb) / (g_ub - g_lb))
}

/// Which per-step rewards an estimator consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// Reconstructed rewards of the estimator's own variant.
    Reconstructed,
    /// Aggregated reward on the final step, 0 elsewhere.
    Sparse,
    /// Simulator rewards; only available on synthetic data.
    GroundTruth,
}

impl fmt::Display for RewardSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reconstructed => "reconstructed",
            Self::Sparse => "sparse",
            Self::GroundTruth => "ground_truth",
        })
    }
}

/// Registered estimators, selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Estimator {
    Is,
    Wis,
    Pdis,
    Phwis,
    Fqe,
    Dr,
    Wdr,
    Hope,
    SparseHope,
    SoftHope,
    RandHope,
}

impl Estimator {
    pub const ALL: [Estimator; 11] = [
        Self::Is,
        Self::Wis,
        Self::Pdis,
        Self::Phwis,
        Self::Fqe,
        Self::Dr,
        Self::Wdr,
        Self::Hope,
        Self::SparseHope,
        Self::SoftHope,
        Self::RandHope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Is => "is",
            Self::Wis => "wis",
            Self::Pdis => "pdis",
            Self::Phwis => "phwis",
            Self::Fqe => "fqe",
            Self::Dr => "dr",
            Self::Wdr => "wdr",
            Self::Hope => "hope",
            Self::SparseHope => "sparse_hope",
            Self::SoftHope => "soft_hope",
            Self::RandHope => "rand_hope",
        }
    }

    pub fn is_hope_variant(self) -> bool {
        matches!(self, Self::Hope | Self::SparseHope | Self::SoftHope | Self::RandHope)
    }

    /// Baselines read the sparse channel; HOPE variants their reconstruction.
    pub fn default_source(self) -> RewardSource {
        if self.is_hope_variant() {
            RewardSource::Reconstructed
        } else {
            RewardSource::Sparse
        }
    }

    /// Whether the estimator needs importance weights.
    pub fn uses_weights(self) -> bool {
        self != Self::Fqe
    }

    /// Whether the estimator fits a Q model.
    pub fn uses_q(self) -> bool {
        matches!(self, Self::Fqe | Self::Dr | Self::Wdr)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|e| e.name() == key)
            .ok_or_else(|| EstimatorError::UnknownEstimator(s.to_string()))
    }
}

impl TryFrom<String> for Estimator {
    type Error = EstimatorError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Estimator> for String {
    fn from(e: Estimator) -> Self {
        e.name().to_string()
    }
}

/// Parses a comma-separated estimator list.
pub fn parse_estimators(list: &str) -> Result<Vec<Estimator>, EstimatorError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// One estimator's output for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateResult {
    pub estimator: Estimator,
    pub policy: String,
    pub reward_source: RewardSource,
    pub point_estimate: f64,
    pub bootstrap_samples: Option<Vec<f64>>,
    /// Resamples on which the estimator failed and that were dropped.
    pub bootstrap_failures: usize,
}
