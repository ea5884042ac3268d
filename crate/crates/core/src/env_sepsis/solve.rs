//! Exact dynamic programming over the 1440-state model: oracle policy
//! values and the evaluation policies built on the optimal policy.

use rayon::prelude::*;

use super::dynamics::{initial_distribution, transition_distribution, SimConfig};
use super::state::{PatientState, StateComponent, Treatments, NUM_ACTIONS, NUM_STATES};
use super::{simulate_episode, trajectory_rng, SimError};
use crate::policy::Policy;

/// Default exploration rate of the behavior policy.
pub const DEFAULT_BEHAVIOR_EPSILON: f64 = 0.15;

/// Tabulated transition model: for every `(state, action)` the reachable
/// next states with probability, reward and terminal flag.
#[derive(Debug, Clone)]
pub struct SepsisModel {
    config: SimConfig,
    next: Vec<Vec<(u16, f64)>>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    initial: Vec<(u16, f64)>,
    observation: Vec<usize>,
}

impl SepsisModel {
    pub fn new(config: &SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let params = &config.transition_params;
        let next = (0..NUM_STATES * NUM_ACTIONS)
            .into_par_iter()
            .map(|sa| {
                let s = PatientState::decode(sa / NUM_ACTIONS).expect("state id");
                transition_distribution(&s, sa % NUM_ACTIONS, params)
                    .into_iter()
                    .map(|(ns, p)| (ns.encode() as u16, p))
                    .collect()
            })
            .collect();
        let outcomes: Vec<_> = PatientState::all().map(|s| s.terminal_check()).collect();
        Ok(Self {
            config: config.clone(),
            next,
            reward: outcomes.iter().map(|o| o.reward()).collect(),
            terminal: outcomes.iter().map(|o| o.is_terminal()).collect(),
            initial: initial_distribution(params)
                .into_iter()
                .map(|(s, p)| (s.encode() as u16, p))
                .collect(),
            observation: PatientState::all()
                .map(|s| config.observation_mask.observe(&s))
                .collect(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// `r(s') + gamma * [s' non-terminal] * v(s')` averaged over next states.
    fn backup(&self, state: usize, action: usize, v_next: &[f64]) -> f64 {
        let gamma = self.config.gamma;
        self.next[state * NUM_ACTIONS + action]
            .iter()
            .map(|&(ns, p)| {
                let ns = ns as usize;
                let cont = if self.terminal[ns] { 0.0 } else { gamma * v_next[ns] };
                p * (self.reward[ns] + cont)
            })
            .sum()
    }

    fn initial_value(&self, v: &[f64]) -> f64 {
        self.initial.iter().map(|&(s, p)| p * v[s as usize]).sum()
    }

    /// Expected discounted return of an observation-based policy, by
    /// backward induction over the horizon.
    pub fn policy_value(&self, policy: &Policy) -> Result<f64, SimError> {
        if policy.n_obs() != NUM_STATES || policy.n_act() != NUM_ACTIONS {
            return Err(SimError::PolicyShape {
                n_obs: policy.n_obs(),
                n_act: policy.n_act(),
            });
        }
        let mut v = vec![0.0; NUM_STATES];
        for _ in 0..self.config.horizon {
            v = (0..NUM_STATES)
                .map(|s| {
                    let row = policy.row(self.observation[s]);
                    (0..NUM_ACTIONS)
                        .filter(|&a| row[a] > 0.0)
                        .map(|a| row[a] * self.backup(s, a, &v))
                        .sum()
                })
                .collect();
        }
        Ok(self.initial_value(&v))
    }

    /// Optimal state-action values with the full horizon remaining, from
    /// finite-horizon value iteration on the true state.
    pub fn optimal_q(&self) -> Vec<f64> {
        let mut v = vec![0.0; NUM_STATES];
        let mut q = vec![0.0; NUM_STATES * NUM_ACTIONS];
        for _ in 0..self.config.horizon {
            for s in 0..NUM_STATES {
                for a in 0..NUM_ACTIONS {
                    q[s * NUM_ACTIONS + a] = self.backup(s, a, &v);
                }
            }
            v = (0..NUM_STATES)
                .map(|s| {
                    q[s * NUM_ACTIONS..(s + 1) * NUM_ACTIONS]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
        }
        q
    }

    /// Value of the optimal state-based (fully observed) policy.
    pub fn optimal_state_value(&self) -> f64 {
        let q = self.optimal_q();
        let v: Vec<f64> = (0..NUM_STATES)
            .map(|s| {
                q[s * NUM_ACTIONS..(s + 1) * NUM_ACTIONS]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        self.initial_value(&v)
    }

    /// Deterministic observation policy: at each observation, the action
    /// maximizing optimal Q averaged over the states that emit it, weighted by
    /// the admission prior of the hidden components. Ties go to the lowest
    /// action id.
    pub fn optimal_policy(&self) -> Policy {
        let q = self.optimal_q();
        let prevalence = self.config.transition_params.diabetic_prevalence;
        let hides_diabetic = self.config.observation_mask.hides(StateComponent::Diabetic);
        let mut score = vec![0.0; NUM_STATES * NUM_ACTIONS];
        let mut covered = vec![false; NUM_STATES];
        for s in 0..NUM_STATES {
            let o = self.observation[s];
            let weight = if hides_diabetic {
                if PatientState::decode(s).expect("state id").diabetic {
                    prevalence
                } else {
                    1.0 - prevalence
                }
            } else {
                1.0
            };
            covered[o] = true;
            for a in 0..NUM_ACTIONS {
                score[o * NUM_ACTIONS + a] += weight * q[s * NUM_ACTIONS + a];
            }
        }
        let actions: Vec<usize> = (0..NUM_STATES)
            .map(|o| {
                let row = if covered[o] {
                    &score[o * NUM_ACTIONS..(o + 1) * NUM_ACTIONS]
                } else {
                    &q[o * NUM_ACTIONS..(o + 1) * NUM_ACTIONS]
                };
                let mut best = 0;
                for a in 1..NUM_ACTIONS {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        Policy::deterministic(NUM_ACTIONS, &actions).expect("actions in range")
    }
}

pub fn solve_optimal_policy(config: &SimConfig) -> Result<Policy, SimError> {
    Ok(SepsisModel::new(config)?.optimal_policy())
}

pub fn true_policy_value(policy: &Policy, config: &SimConfig) -> Result<f64, SimError> {
    SepsisModel::new(config)?.policy_value(policy)
}

/// The three evaluation policies: the optimal policy, and the optimal policy
/// with antibiotics forced on or off.
pub fn evaluation_policies(optimal: &Policy) -> Vec<(String, Policy)> {
    let abx = Treatments::ANTIBIOTICS;
    vec![
        ("optimal".to_string(), optimal.clone()),
        (
            "with_antibiotics".to_string(),
            optimal.map_greedy(|a| a | abx).expect("valid action"),
        ),
        (
            "without_antibiotics".to_string(),
            optimal.map_greedy(|a| a & !abx).expect("valid action"),
        ),
    ]
}

/// Epsilon-soft perturbation of the optimal policy.
pub fn behavior_policy(optimal: &Policy, epsilon: f64) -> Policy {
    optimal.epsilon_soft(epsilon)
}

/// Monte-Carlo return estimate `(mean, standard error)` from `n` rollouts.
pub fn monte_carlo_value(
    policy: &Policy,
    config: &SimConfig,
    n: usize,
    seed: u64,
) -> Result<(f64, f64), SimError> {
    let returns: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            simulate_episode(policy, config, &mut rng).map(|e| e.trajectory.aggregated_reward)
        })
        .collect::<Result<_, _>>()?;
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimal_dominates_evaluation_and_behavior_policies() {
        let cfg = SimConfig::default();
        let model = SepsisModel::new(&cfg).unwrap();
        let optimal = model.optimal_policy();
        let policies = evaluation_policies(&optimal);
        assert_eq!(policies.len(), 3);
        let v_opt = model.policy_value(&optimal).unwrap();
        for (name, pi) in &policies {
            let v = model.policy_value(pi).unwrap();
            assert!(v_opt >= v - 1e-12, "{name}: {v} > optimal {v_opt}");
        }
        let v_beta = model
            .policy_value(&behavior_policy(&optimal, DEFAULT_BEHAVIOR_EPSILON))
            .unwrap();
        assert!(v_opt >= v_beta);
        assert!(model.optimal_state_value() >= v_opt - 1e-12);
    }

    #[test]
    fn dp_value_matches_monte_carlo() {
        let cfg = SimConfig::default();
        let model = SepsisModel::new(&cfg).unwrap();
        let optimal = model.optimal_policy();
        for (name, pi) in evaluation_policies(&optimal) {
            let exact = model.policy_value(&pi).unwrap();
            let (mc, se) = monte_carlo_value(&pi, &cfg, 1_000_000, 99).unwrap();
            assert!((exact - mc).abs() < 3.0 * se, "{name}: dp {exact} mc {mc} se {se}");
        }
    }
}
