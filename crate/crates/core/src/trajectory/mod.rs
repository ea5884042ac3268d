//! Trajectories, datasets, aggregated-reward bookkeeping and empirical
//! statistics derived from logged data.
//!
//! A [`Trajectory`] is what a human-centric environment actually hands us:
//! a sequence of observations and actions, usually without per-step rewards,
//! plus one aggregated reward at the end. Simulated trajectories additionally
//! carry the hidden per-step rewards in a ground-truth sidecar so that
//! reconstruction quality can be audited.

mod channel;
mod io;

pub use channel::StepRewards;
pub use io::{DatasetHeader, RewardSidecar, SidecarEntry, TrajectoryRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Policy;

/// Tolerance for `aggregated_reward == sum_t gamma^(t-1) r_t` on ground truth.
pub const AGGREGATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset must contain at least one trajectory")]
    Empty,
    #[error("trajectory {index} is empty")]
    EmptyTrajectory { index: usize },
    #[error("trajectory {index}: observation {id} outside space of size {n_obs}")]
    ObservationOutOfRange { index: usize, id: usize, n_obs: usize },
    #[error("trajectory {index}: action {id} outside space of size {n_act}")]
    ActionOutOfRange { index: usize, id: usize, n_act: usize },
    #[error("trajectory {index}: {field} has length {got}, expected {expected}")]
    LengthMismatch {
        index: usize,
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("trajectory {index}: aggregated reward {aggregated} disagrees with ground truth {recomputed}")]
    AggregateMismatch {
        index: usize,
        aggregated: f64,
        recomputed: f64,
    },
    #[error("trajectory {index}: step {step} starts at {got}, but the previous step ended at {expected}")]
    BrokenChain {
        index: usize,
        step: usize,
        got: usize,
        expected: usize,
    },
    #[error("trajectory {index}: per-step rewards must be all present or all absent")]
    MixedRewards { index: usize },
    #[error("trajectory {index}: no ground-truth rewards")]
    MissingGroundTruth { index: usize },
    #[error("aggregation window must be at least 1")]
    ZeroWindow,
    #[error("sidecar has {got} entries for {expected} trajectories")]
    SidecarMismatch { got: usize, expected: usize },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing header line")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One logged step `(o_t, a_t, r_t, o'_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: usize,
    pub action: usize,
    /// Observable per-step reward; `None` when only the aggregate is revealed.
    pub reward: Option<f64>,
    pub next_observation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Discounted sum of the (possibly hidden) per-step rewards.
    pub aggregated_reward: f64,
    /// Hidden per-step rewards, only known to a simulator.
    pub ground_truth_rewards: Option<Vec<f64>>,
    /// `beta(a_t | o_t)` as logged by the generating policy.
    pub behavior_probs: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = usize> + '_ {
        self.transitions.iter().map(|tr| tr.observation)
    }

    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.transitions.iter().map(|tr| tr.action)
    }

    pub fn initial_observation(&self) -> usize {
        self.transitions[0].observation
    }

    /// Per-step rewards for windowed aggregation, preferring the ground-truth
    /// sidecar over the observable channel.
    fn true_rewards(&self) -> Option<Vec<f64>> {
        if let Some(r) = &self.ground_truth_rewards {
            return Some(r.clone());
        }
        self.transitions.iter().map(|tr| tr.reward).collect()
    }
}

/// `sum_t gamma^(t-1) r_t` with the first step undiscounted.
pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for &r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// Aggregated rewards issued every `window` steps (default: once per
/// episode). Within a window the exponent is the offset from the window
/// start; the episode end closes a trailing partial window.
pub fn aggregate_rewards(
    trajectory: &Trajectory,
    gamma: f64,
    window: Option<usize>,
) -> Result<Vec<f64>, DatasetError> {
    let rewards = trajectory
        .true_rewards()
        .ok_or(DatasetError::MissingGroundTruth { index: 0 })?;
    let window = window.unwrap_or(rewards.len().max(1));
    if window == 0 {
        return Err(DatasetError::ZeroWindow);
    }
    Ok(rewards
        .chunks(window)
        .map(|chunk| discounted_sum(chunk, gamma))
        .collect())
}

/// Empirical visitation frequencies of one trajectory, stored sparsely and
/// sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Visitation {
    pub observations: Vec<(usize, f64)>,
    pub actions: Vec<(usize, f64)>,
}

fn frequencies(ids: impl Iterator<Item = usize>) -> Vec<(usize, f64)> {
    let mut ids: Vec<usize> = ids.collect();
    let n = ids.len() as f64;
    ids.sort_unstable();
    let mut out: Vec<(usize, f64)> = Vec::new();
    for id in ids {
        match out.last_mut() {
            Some((last, count)) if *last == id => *count += 1.0,
            _ => out.push((id, 1.0)),
        }
    }
    for (_, c) in &mut out {
        *c /= n;
    }
    out
}

/// Observation and action frequency vectors over the steps of `trajectory`.
pub fn visitation_distribution(trajectory: &Trajectory) -> Visitation {
    Visitation {
        observations: frequencies(trajectory.observations()),
        actions: frequencies(trajectory.actions()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub n_obs: usize,
    pub n_act: usize,
    pub gamma: f64,
}

impl Dataset {
    pub fn new(
        trajectories: Vec<Trajectory>,
        n_obs: usize,
        n_act: usize,
        gamma: f64,
    ) -> Result<Self, DatasetError> {
        let ds = Self {
            trajectories,
            n_obs,
            n_act,
            gamma,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).max().unwrap_or(0)
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.trajectories.is_empty() {
            return Err(DatasetError::Empty);
        }
        for (index, traj) in self.trajectories.iter().enumerate() {
            if traj.is_empty() {
                return Err(DatasetError::EmptyTrajectory { index });
            }
            let has_reward = traj.transitions[0].reward.is_some();
            for tr in &traj.transitions {
                for id in [tr.observation, tr.next_observation] {
                    if id >= self.n_obs {
                        return Err(DatasetError::ObservationOutOfRange {
                            index,
                            id,
                            n_obs: self.n_obs,
                        });
                    }
                }
                if tr.action >= self.n_act {
                    return Err(DatasetError::ActionOutOfRange {
                        index,
                        id: tr.action,
                        n_act: self.n_act,
                    });
                }
                if tr.reward.is_some() != has_reward {
                    return Err(DatasetError::MixedRewards { index });
                }
            }
            for (step, pair) in traj.transitions.windows(2).enumerate() {
                if pair[1].observation != pair[0].next_observation {
                    return Err(DatasetError::BrokenChain {
                        index,
                        step: step + 1,
                        got: pair[1].observation,
                        expected: pair[0].next_observation,
                    });
                }
            }
            if let Some(beta) = &traj.behavior_probs {
                if beta.len() != traj.len() {
                    return Err(DatasetError::LengthMismatch {
                        index,
                        field: "beta",
                        got: beta.len(),
                        expected: traj.len(),
                    });
                }
            }
            if let Some(truth) = &traj.ground_truth_rewards {
                if truth.len() != traj.len() {
                    return Err(DatasetError::LengthMismatch {
                        index,
                        field: "ground truth",
                        got: truth.len(),
                        expected: traj.len(),
                    });
                }
                let recomputed = discounted_sum(truth, self.gamma);
                if (recomputed - traj.aggregated_reward).abs() > AGGREGATE_TOLERANCE {
                    return Err(DatasetError::AggregateMismatch {
                        index,
                        aggregated: traj.aggregated_reward,
                        recomputed,
                    });
                }
            }
        }
        Ok(())
    }

    /// Removes every per-step reward, keeping aggregated rewards. The hidden
    /// rewards travel in the returned sidecar, which [`Dataset::attach_rewards`]
    /// puts back.
    pub fn strip_rewards(&self) -> (Dataset, RewardSidecar) {
        let mut stripped = self.clone();
        let mut entries = Vec::with_capacity(self.len());
        for traj in &mut stripped.trajectories {
            let step: Option<Vec<f64>> = traj.transitions.iter().map(|tr| tr.reward).collect();
            for tr in &mut traj.transitions {
                tr.reward = None;
            }
            entries.push(SidecarEntry {
                rew: step,
                truth: traj.ground_truth_rewards.take(),
            });
        }
        (stripped, RewardSidecar { entries })
    }

    pub fn attach_rewards(&self, sidecar: &RewardSidecar) -> Result<Dataset, DatasetError> {
        if sidecar.entries.len() != self.len() {
            return Err(DatasetError::SidecarMismatch {
                got: sidecar.entries.len(),
                expected: self.len(),
            });
        }
        let mut out = self.clone();
        for (index, (traj, entry)) in out
            .trajectories
            .iter_mut()
            .zip(&sidecar.entries)
            .enumerate()
        {
            if let Some(step) = &entry.rew {
                if step.len() != traj.len() {
                    return Err(DatasetError::LengthMismatch {
                        index,
                        field: "rew",
                        got: step.len(),
                        expected: traj.len(),
                    });
                }
                for (tr, &r) in traj.transitions.iter_mut().zip(step) {
                    tr.reward = Some(r);
                }
            }
            traj.ground_truth_rewards = entry.truth.clone();
        }
        out.validate()?;
        Ok(out)
    }

    /// Returns a new dataset made of the trajectories at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            n_obs: self.n_obs,
            n_act: self.n_act,
            gamma: self.gamma,
        }
    }

    /// Tabular behavior cloning:
    /// `beta(a|o) = (count(o,a) + s) / (count(o) + s |A|)`, uniform on unseen `o`.
    pub fn estimate_behavior_policy(&self, smoothing: f64) -> Policy {
        let (n_obs, n_act) = (self.n_obs, self.n_act);
        let mut counts = vec![0.0f64; n_obs * n_act];
        for tr in self.trajectories.iter().flat_map(|t| &t.transitions) {
            counts[tr.observation * n_act + tr.action] += 1.0;
        }
        let mut probs = vec![0.0; n_obs * n_act];
        for o in 0..n_obs {
            let row = &counts[o * n_act..(o + 1) * n_act];
            let total: f64 = row.iter().sum::<f64>() + smoothing * n_act as f64;
            let out = &mut probs[o * n_act..(o + 1) * n_act];
            if total > 0.0 {
                for (p, &c) in out.iter_mut().zip(row) {
                    *p = (c + smoothing) / total;
                }
            } else {
                out.fill(1.0 / n_act as f64);
            }
        }
        Policy::from_table(n_obs, n_act, probs).expect("counts produce valid rows")
    }

    /// Distinct observations appearing at some step of the dataset, sorted.
    pub fn visited_observations(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_obs];
        for o in self.trajectories.iter().flat_map(Trajectory::observations) {
            seen[o] = true;
        }
        (0..self.n_obs).filter(|&o| seen[o]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn traj(steps: &[(usize, usize)], truth: Option<Vec<f64>>, gamma: f64) -> Trajectory {
        let transitions = steps
            .iter()
            .enumerate()
            .map(|(t, &(o, a))| Transition {
                observation: o,
                action: a,
                reward: None,
                next_observation: steps.get(t + 1).map_or(o, |s| s.0),
            })
            .collect();
        let aggregated_reward = truth.as_deref().map_or(0.0, |r| discounted_sum(r, gamma));
        Trajectory {
            transitions,
            aggregated_reward,
            ground_truth_rewards: truth,
            behavior_probs: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let t = traj(&[(0, 0), (1, 0), (2, 0)], Some(vec![0.0, 0.0, 1.0]), 1.0);
        assert_eq!(aggregate_rewards(&t, 1.0, Some(3)).unwrap(), vec![1.0]);
        let t = traj(&[(0, 0), (1, 0)], Some(vec![1.0, 1.0]), 0.5);
        assert_eq!(aggregate_rewards(&t, 0.5, None).unwrap(), vec![1.5]);
        let t = traj(&[(0, 0), (1, 0), (2, 1)], Some(vec![0.3, -1.0, 2.0]), 0.9);
        assert_eq!(aggregate_rewards(&t, 0.9, Some(1)).unwrap(), vec![0.3, -1.0, 2.0]);
    }

    #[test]
    fn aggregate_window_offsets_restart() {
        let t = traj(&[(0, 0); 5], Some(vec![1.0, 2.0, 3.0, 4.0, 5.0]), 0.5);
        let agg = aggregate_rewards(&t, 0.5, Some(2)).unwrap();
        assert_eq!(agg, vec![1.0 + 0.5 * 2.0, 3.0 + 0.5 * 4.0, 5.0]);
    }

    #[test]
    fn aggregate_requires_rewards() {
        let t = traj(&[(0, 0)], None, 1.0);
        assert!(matches!(
            aggregate_rewards(&t, 1.0, None),
            Err(DatasetError::MissingGroundTruth { .. })
        ));
        let t = traj(&[(0, 0)], Some(vec![1.0]), 1.0);
        assert!(matches!(aggregate_rewards(&t, 1.0, Some(0)), Err(DatasetError::ZeroWindow)));
    }

    #[test]
    fn behavior_cloning_frequencies() {
        let t = traj(&[(0, 0), (0, 0), (0, 0), (0, 1)], None, 1.0);
        let ds = Dataset::new(vec![t], 2, 2, 1.0).unwrap();
        let beta = ds.estimate_behavior_policy(0.0);
        assert_eq!(beta.prob(0, 0), 0.75);
        assert_eq!(beta.row(1), &[0.5, 0.5]);
        let smoothed = ds.estimate_behavior_policy(0.5);
        assert!(smoothed.row(0).iter().all(|&p| p > 0.0));
        assert!((smoothed.prob(0, 1) - 1.5 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn visitation_examples() {
        let single = traj(&[(4, 1)], None, 1.0);
        let v = visitation_distribution(&single);
        assert_eq!(v.observations, vec![(4, 1.0)]);
        assert_eq!(v.actions, vec![(1, 1.0)]);

        let t = traj(&[(1, 0), (1, 1), (2, 0)], None, 1.0);
        let v = visitation_distribution(&t);
        assert!((v.observations[0].1 - 2.0 / 3.0).abs() < 1e-15);
        let total: f64 = v.observations.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn strip_and_attach_are_inverse() {
        let mut t = traj(&[(0, 0), (1, 1)], Some(vec![0.0, 1.0]), 0.9);
        t.behavior_probs = Some(vec![0.5, 0.5]);
        let ds = Dataset::new(vec![t], 2, 2, 0.9).unwrap();
        let (stripped, sidecar) = ds.strip_rewards();
        assert!(stripped.trajectories[0].ground_truth_rewards.is_none());
        assert!(stripped.trajectories[0].transitions.iter().all(|tr| tr.reward.is_none()));
        assert_eq!(stripped.trajectories[0].aggregated_reward, ds.trajectories[0].aggregated_reward);
        assert_eq!(stripped.attach_rewards(&sidecar).unwrap(), ds);
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut t = traj(&[(0, 0)], Some(vec![1.0]), 1.0);
        t.aggregated_reward = 0.5;
        assert!(matches!(
            Dataset::new(vec![t], 1, 1, 1.0),
            Err(DatasetError::AggregateMismatch { .. })
        ));
        assert!(matches!(Dataset::new(vec![], 1, 1, 1.0), Err(DatasetError::Empty)));
        let t = traj(&[(3, 0)], None, 1.0);
        assert!(matches!(
            Dataset::new(vec![t], 2, 1, 1.0),
            Err(DatasetError::ObservationOutOfRange { .. })
        ));
    }
}
