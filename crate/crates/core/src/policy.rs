//! Tabular stochastic policies over discrete observation and action spaces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating that a policy row sums to one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy table has {got} entries, expected {n_obs} x {n_act}")]
    Shape { n_obs: usize, n_act: usize, got: usize },
    #[error("row for observation {observation} is not a distribution (sum {sum})")]
    NotADistribution { observation: usize, sum: f64 },
    #[error("invalid probability {value} at ({observation}, {action})")]
    InvalidProbability {
        observation: usize,
        action: usize,
        value: f64,
    },
    #[error("action {action} outside action space of size {n_act}")]
    ActionOutOfRange { action: usize, n_act: usize },
}

/// A policy `pi(a | o)` stored as a dense row-major table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_obs: usize,
    n_act: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn from_table(n_obs: usize, n_act: usize, probs: Vec<f64>) -> Result<Self, PolicyError> {
        if probs.len() != n_obs * n_act {
            return Err(PolicyError::Shape {
                n_obs,
                n_act,
                got: probs.len(),
            });
        }
        let policy = Self {
            n_obs,
            n_act,
            probs,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Uniform random policy.
    pub fn uniform(n_obs: usize, n_act: usize) -> Self {
        Self {
            n_obs,
            n_act,
            probs: vec![1.0 / n_act as f64; n_obs * n_act],
        }
    }

    /// Deterministic policy taking `actions[o]` at observation `o`.
    pub fn deterministic(n_act: usize, actions: &[usize]) -> Result<Self, PolicyError> {
        let mut probs = vec![0.0; actions.len() * n_act];
        for (o, &a) in actions.iter().enumerate() {
            if a >= n_act {
                return Err(PolicyError::ActionOutOfRange { action: a, n_act });
            }
            probs[o * n_act + a] = 1.0;
        }
        Ok(Self {
            n_obs: actions.len(),
            n_act,
            probs,
        })
    }

    /// Mixes `self` with the uniform policy: `(1 - eps) * pi + eps / |A|`.
    pub fn epsilon_soft(&self, epsilon: f64) -> Self {
        let floor = epsilon / self.n_act as f64;
        Self {
            n_obs: self.n_obs,
            n_act: self.n_act,
            probs: self
                .probs
                .iter()
                .map(|p| (1.0 - epsilon) * p + floor)
                .collect(),
        }
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_act(&self) -> usize {
        self.n_act
    }

    #[inline]
    pub fn prob(&self, observation: usize, action: usize) -> f64 {
        self.probs[observation * self.n_act + action]
    }

    pub fn row(&self, observation: usize) -> &[f64] {
        &self.probs[observation * self.n_act..(observation + 1) * self.n_act]
    }

    /// Most probable action, lowest index on ties.
    pub fn greedy_action(&self, observation: usize) -> usize {
        let row = self.row(observation);
        let mut best = 0;
        for (a, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = a;
            }
        }
        best
    }

    /// Samples an action by inverse CDF on a single uniform draw in `[0, 1)`.
    pub fn sample_with(&self, observation: usize, u: f64) -> usize {
        let row = self.row(observation);
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (a, &p) in row.iter().enumerate() {
            if p > 0.0 {
                last_positive = a;
                acc += p;
                if u < acc {
                    return a;
                }
            }
        }
        last_positive
    }

    /// Applies `f` to the greedy action of every row, producing a deterministic policy.
    pub fn map_greedy(&self, f: impl Fn(usize) -> usize) -> Result<Self, PolicyError> {
        let actions: Vec<usize> = (0..self.n_obs).map(|o| f(self.greedy_action(o))).collect();
        Self::deterministic(self.n_act, &actions)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for o in 0..self.n_obs {
            let row = self.row(o);
            for (a, &p) in row.iter().enumerate() {
                if !p.is_finite() || p < 0.0 {
                    return Err(PolicyError::InvalidProbability {
                        observation: o,
                        action: a,
                        value: p,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(PolicyError::NotADistribution {
                    observation: o,
                    sum,
                });
            }
        }
        Ok(())
    }
}
