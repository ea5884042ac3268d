//! Synthetic sepsis POMDP.
//!
//! Patients are described by a diabetic flag, four discretized vitals and
//! three treatment flags (1440 states). Eight actions toggle the treatments.
//! An episode ends on discharge (+1), death (-1) or at the horizon (0). With
//! the default mask the diabetic flag is hidden, so the agent only sees a
//! partial observation of the state.
//!
//! Everything here is a pure function of the configuration and an explicit
//! random stream, so datasets are reproducible bit for bit from a seed.

mod dynamics;
mod solve;
mod state;

pub use dynamics::{
    initial_distribution, sample_initial_state, step, transition_distribution, SimConfig, Step,
    TransitionParams,
};
pub use solve::{
    behavior_policy, evaluation_policies, monte_carlo_value, solve_optimal_policy,
    true_policy_value, SepsisModel, DEFAULT_BEHAVIOR_EPSILON,
};
pub use state::{
    encode_state, observation_distance, GlucoseLevel, Level, ObservationMask, Outcome,
    OxygenLevel, PatientState, StateComponent, Treatments, Vital, NUM_ACTIONS, NUM_STATES,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Policy;
use crate::trajectory::{discounted_sum, Dataset, DatasetError, Trajectory, Transition};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
    #[error("action {0} outside [0, 8)")]
    InvalidAction(usize),
    #[error("cannot step from terminal state {0:?}")]
    TerminalState(PatientState),
    #[error("policy covers {n_obs} observations x {n_act} actions, expected 1440 x 8")]
    PolicyShape { n_obs: usize, n_act: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Random stream for trajectory `index` under `master_seed`.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master_seed ^ index)
}

fn check_policy(policy: &Policy) -> Result<(), SimError> {
    if policy.n_obs() != NUM_STATES || policy.n_act() != NUM_ACTIONS {
        return Err(SimError::PolicyShape {
            n_obs: policy.n_obs(),
            n_act: policy.n_act(),
        });
    }
    Ok(())
}

/// A simulated episode together with the hidden states it visited.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub states: Vec<PatientState>,
    pub outcome: Outcome,
}

/// Rolls out `policy` for one episode. The trajectory carries no observable
/// per-step rewards; the true rewards sit in its ground-truth sidecar and the
/// aggregated reward is their discounted sum. Behavior probabilities of the
/// chosen actions are logged.
pub fn simulate_episode<R: Rng + ?Sized>(
    policy: &Policy,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Episode, SimError> {
    check_policy(policy)?;
    let mask = &config.observation_mask;
    let mut state = sample_initial_state(&config.transition_params, rng);
    let mut states = vec![state];
    let mut transitions = Vec::with_capacity(config.horizon);
    let mut rewards = Vec::with_capacity(config.horizon);
    let mut probs = Vec::with_capacity(config.horizon);
    let mut outcome = Outcome::None;
    for t in 1..=config.horizon {
        let observation = mask.observe(&state);
        let action = policy.sample_with(observation, rng.gen());
        let s = step(&state, action, t, config, rng)?;
        transitions.push(Transition {
            observation,
            action,
            reward: None,
            next_observation: mask.observe(&s.next_state),
        });
        rewards.push(s.reward);
        probs.push(policy.prob(observation, action));
        state = s.next_state;
        states.push(state);
        outcome = s.outcome;
        if s.done {
            break;
        }
    }
    let trajectory = Trajectory {
        transitions,
        aggregated_reward: discounted_sum(&rewards, config.gamma),
        ground_truth_rewards: Some(rewards),
        behavior_probs: Some(probs),
    };
    Ok(Episode {
        trajectory,
        states,
        outcome,
    })
}

pub fn simulate_trajectory<R: Rng + ?Sized>(
    policy: &Policy,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Trajectory, SimError> {
    simulate_episode(policy, config, rng).map(|e| e.trajectory)
}

/// Outcome counts of a simulated batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub discharge: usize,
    pub death: usize,
    pub none: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.discharge + self.death + self.none
    }
}

/// Simulates `n` episodes in parallel; episode `i` uses [`trajectory_rng`]`(seed, i)`
/// so the result does not depend on scheduling.
pub fn simulate_dataset(
    policy: &Policy,
    config: &SimConfig,
    n: usize,
) -> Result<(Dataset, OutcomeCounts), SimError> {
    config.validate()?;
    check_policy(policy)?;
    let episodes: Vec<Episode> = (0..n)
        .into_par_iter()
        .map(|i| simulate_episode(policy, config, &mut trajectory_rng(config.seed, i as u64)))
        .collect::<Result<_, _>>()?;
    let mut counts = OutcomeCounts::default();
    for e in &episodes {
        match e.outcome {
            Outcome::Discharge => counts.discharge += 1,
            Outcome::Death => counts.death += 1,
            Outcome::None => counts.none += 1,
        }
    }
    let dataset = Dataset::new(
        episodes.into_iter().map(|e| e.trajectory).collect(),
        NUM_STATES,
        NUM_ACTIONS,
        config.gamma,
    )?;
    Ok((dataset, counts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SimConfig {
            seed: 11,
            ..SimConfig::default()
        };
        let beta = Policy::uniform(NUM_STATES, NUM_ACTIONS);
        let (a, ca) = simulate_dataset(&beta, &cfg, 200).unwrap();
        let (b, cb) = simulate_dataset(&beta, &cfg, 200).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(ca.total(), 200);
    }

    #[test]
    fn simulated_trajectories_are_consistent() {
        let cfg = SimConfig::default();
        let beta = Policy::uniform(NUM_STATES, NUM_ACTIONS);
        let (ds, _) = simulate_dataset(&beta, &cfg, 500).unwrap();
        for t in &ds.trajectories {
            assert!(t.len() <= cfg.horizon);
            assert!(t.transitions.iter().all(|tr| tr.reward.is_none()));
            let truth = t.ground_truth_rewards.as_ref().unwrap();
            // only the last step may carry a nonzero reward
            assert!(truth[..truth.len() - 1].iter().all(|&r| r == 0.0));
            assert!([-1.0, 0.0, 1.0].contains(truth.last().unwrap()));
            assert!((t.aggregated_reward - discounted_sum(truth, cfg.gamma)).abs() < 1e-12);
            assert!(t.behavior_probs.as_ref().unwrap().iter().all(|&p| p == 0.125));
        }
    }

    #[test]
    fn masked_observations_hide_diabetic_flag() {
        let cfg = SimConfig::default();
        let beta = Policy::uniform(NUM_STATES, NUM_ACTIONS);
        let (ds, _) = simulate_dataset(&beta, &cfg, 300).unwrap();
        for tr in ds.trajectories.iter().flat_map(|t| &t.transitions) {
            assert!(!PatientState::decode(tr.observation).unwrap().diabetic);
        }
    }

    #[test]
    fn death_at_step_three_aggregates_to_minus_one() {
        let rewards = [0.0, 0.0, -1.0];
        assert_eq!(discounted_sum(&rewards, 1.0), -1.0);
    }
}
