//! Reward reconstruction for HOPE and its ablations. The estimators
//! themselves are WIS on the channels built here.

use serde::{Deserialize, Serialize};

use super::EstimatorError;
use crate::critical_obs::{
    critical_set, elbow_threshold, fit_q, Backup, CriticalSet, QFitOptions, QTable,
};
use crate::neighbors::{build_index, build_random_index, reconstruct, NeighborIndex, ObservationMetric};
use crate::policy::Policy;
use crate::reward_reconstruction::FitOptions;
use crate::trajectory::{Dataset, StepRewards};

/// How the critical-observation threshold `h` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum ThresholdMode {
    /// Knee of the sorted Q-gap curve.
    Elbow,
    Fixed { h: f64 },
    /// Every visited observation is critical.
    AllCritical,
}

/// Policy whose Q-values define the gaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QBackup {
    /// Behavior policy cloned from the data.
    Behavior,
    /// The policy under evaluation.
    Target,
    /// Greedy over observed actions.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopeOptions {
    pub fit: FitOptions,
    pub k: usize,
    pub threshold: ThresholdMode,
    pub q_backup: QBackup,
    pub q_fit: QFitOptions,
    /// Additive smoothing of the cloned behavior policy used in Q backups.
    pub behavior_smoothing: f64,
    /// Random neighbor draws averaged by Rand-HOPE.
    pub rand_repetitions: usize,
}

impl Default for HopeOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            k: crate::neighbors::DEFAULT_K,
            threshold: ThresholdMode::AllCritical,
            q_backup: QBackup::Behavior,
            q_fit: QFitOptions::default(),
            behavior_smoothing: 0.0,
            rand_repetitions: 100,
        }
    }
}

/// Intermediate products of one reconstruction.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub preliminary: StepRewards,
    /// Absent in all-critical mode, where no Q fit is needed.
    pub qtable: Option<QTable>,
    pub critical: CriticalSet,
    pub index: NeighborIndex,
    pub rhat: StepRewards,
}

fn all_visited(dataset: &Dataset) -> CriticalSet {
    CriticalSet {
        threshold: -1.0,
        observations: dataset.visited_observations().into_iter().collect(),
    }
}

/// Q fit, critical set, neighbor search and calibration on top of a
/// preliminary channel. `target` is required for [`QBackup::Target`].
pub fn reconstruct_rewards(
    dataset: &Dataset,
    preliminary: StepRewards,
    options: &HopeOptions,
    metric: &dyn ObservationMetric,
    target: Option<&Policy>,
) -> Result<Reconstruction, EstimatorError> {
    if !preliminary.matches_shape(dataset) {
        return Err(EstimatorError::ChannelShape);
    }
    let (qtable, critical) = match options.threshold {
        ThresholdMode::AllCritical => (None, all_visited(dataset)),
        mode => {
            let cloned;
            let backup = match (options.q_backup, target) {
                (QBackup::Behavior, _) => {
                    cloned = dataset.estimate_behavior_policy(options.behavior_smoothing);
                    Backup::Expected(&cloned)
                }
                (QBackup::Target, Some(pi)) => Backup::Expected(pi),
                (QBackup::Target, None) => return Err(EstimatorError::MissingTarget),
                (QBackup::Max, _) => Backup::Max,
            };
            let q = fit_q(dataset, &preliminary, dataset.gamma, backup, &options.q_fit);
            let h = match mode {
                ThresholdMode::Fixed { h } => h,
                _ => elbow_threshold(&q),
            };
            let set = critical_set(&q, h);
            (Some(q), set)
        }
    };
    let index = build_index(dataset, options.k, metric, |o| critical.contains(o))?;
    let rhat = reconstruct(dataset, &preliminary, &critical, &index)?;
    Ok(Reconstruction {
        preliminary,
        qtable,
        critical,
        index,
        rhat,
    })
}

/// Sparse-HOPE: the sparse channel takes the place of the fitted rewards.
pub fn sparse_hope_channel(
    dataset: &Dataset,
    options: &HopeOptions,
    metric: &dyn ObservationMetric,
    target: Option<&Policy>,
) -> Result<Reconstruction, EstimatorError> {
    reconstruct_rewards(dataset, StepRewards::sparse(dataset), options, metric, target)
}

/// Soft-HOPE: neighbor averaging at every step.
pub fn soft_hope_channel(
    dataset: &Dataset,
    preliminary: &StepRewards,
    options: &HopeOptions,
    metric: &dyn ObservationMetric,
) -> Result<StepRewards, EstimatorError> {
    let critical = all_visited(dataset);
    let index = build_index(dataset, options.k, metric, |_| true)?;
    Ok(reconstruct(dataset, preliminary, &critical, &index)?)
}

/// Rand-HOPE: neighbor trajectories drawn at random, `rand_repetitions`
/// times; returns the per-step mean of the reconstructed channels. WIS is
/// linear in the returns, so WIS on the mean channel equals the mean of the
/// repeated WIS estimates.
pub fn rand_hope_channel(
    dataset: &Dataset,
    preliminary: &StepRewards,
    critical: &CriticalSet,
    options: &HopeOptions,
    metric: &dyn ObservationMetric,
    seed: u64,
) -> Result<StepRewards, EstimatorError> {
    let reps = options.rand_repetitions.max(1);
    let channels = (0..reps as u64)
        .map(|r| {
            let index = build_random_index(
                dataset,
                options.k,
                metric,
                |o| critical.contains(o),
                seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            )?;
            Ok(reconstruct(dataset, preliminary, critical, &index)?)
        })
        .collect::<Result<Vec<_>, EstimatorError>>()?;
    Ok(StepRewards::mean_of(&channels).expect("at least one repetition"))
}
