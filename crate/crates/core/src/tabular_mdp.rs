//! A small fully observed MDP with exact policy values, for checking
//! estimator properties where the truth is known in closed form.

use rand::Rng;
use rayon::prelude::*;

use crate::env_sepsis::trajectory_rng;
use crate::policy::Policy;
use crate::trajectory::{discounted_sum, Dataset, DatasetError, Trajectory, Transition};

/// Finite-horizon MDP. Each `(s, a)` leads to one of the states or, with the
/// remaining mass, ends the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub initial: Vec<f64>,
    /// `next[s * n_actions + a][s']`; the shortfall from 1 is termination.
    pub next: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
}

impl TabularMdp {
    /// Five states on a ring, two actions. Action 0 advances, action 1 falls
    /// back or jumps ahead; each step ends the episode with probability 0.2.
    pub fn five_state() -> Self {
        let (n, m) = (5, 2);
        let mut next = vec![vec![0.0; n]; n * m];
        for s in 0..n {
            next[s * m][(s + 1) % n] += 0.6;
            next[s * m][s] += 0.2;
            next[s * m + 1][s.saturating_sub(1)] += 0.5;
            next[s * m + 1][(s + 2) % n] += 0.3;
        }
        Self {
            n_states: n,
            n_actions: m,
            initial: vec![0.4, 0.3, 0.2, 0.1, 0.0],
            next,
            reward: vec![0.0, 0.1, 0.2, -0.1, -0.3, 0.5, 1.0, 0.0, -1.0, 0.3],
            horizon: 5,
            gamma: 0.9,
        }
    }

    /// Exact expected discounted return of `policy` by backward induction.
    pub fn value(&self, policy: &Policy) -> f64 {
        let m = self.n_actions;
        let mut v = vec![0.0; self.n_states];
        for _ in 0..self.horizon {
            v = (0..self.n_states)
                .map(|s| {
                    (0..m)
                        .map(|a| {
                            let cont: f64 = self.next[s * m + a].iter().zip(&v).map(|(p, x)| p * x).sum();
                            policy.prob(s, a) * (self.reward[s * m + a] + self.gamma * cont)
                        })
                        .sum()
                })
                .collect();
        }
        self.initial.iter().zip(&v).map(|(p, x)| p * x).sum()
    }

    fn draw(probs: &[f64], u: f64) -> Option<usize> {
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(i);
            }
        }
        None
    }

    /// One episode under `policy`, with ground-truth rewards and the logged
    /// action probabilities.
    pub fn episode<R: Rng + ?Sized>(&self, policy: &Policy, rng: &mut R) -> Trajectory {
        let m = self.n_actions;
        let mut s = Self::draw(&self.initial, rng.gen()).unwrap_or(self.n_states - 1);
        let (mut transitions, mut rewards, mut probs) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..self.horizon {
            let a = policy.sample_with(s, rng.gen());
            let next = Self::draw(&self.next[s * m + a], rng.gen());
            transitions.push(Transition {
                observation: s,
                action: a,
                reward: None,
                next_observation: next.unwrap_or(s),
            });
            rewards.push(self.reward[s * m + a]);
            probs.push(policy.prob(s, a));
            match next {
                Some(n) => s = n,
                None => break,
            }
        }
        Trajectory {
            transitions,
            aggregated_reward: discounted_sum(&rewards, self.gamma),
            ground_truth_rewards: Some(rewards),
            behavior_probs: Some(probs),
        }
    }

    /// `n` episodes; episode `i` uses the stream `seed ^ i`.
    pub fn dataset(&self, policy: &Policy, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
        let trajectories = (0..n)
            .into_par_iter()
            .map(|i| self.episode(policy, &mut trajectory_rng(seed, i as u64)))
            .collect();
        Dataset::new(trajectories, self.n_states, self.n_actions, self.gamma)
    }
}
