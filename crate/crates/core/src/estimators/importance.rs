//! Importance ratios and the importance-sampling estimator family.

use std::collections::BTreeMap;

use super::{EstimatorError, OpeData};
use crate::policy::Policy;
use crate::trajectory::{Dataset, Trajectory};

/// Where behavior probabilities come from.
#[derive(Debug, Clone, Copy)]
pub enum Behavior<'a> {
    /// Probabilities logged with each trajectory.
    Stored,
    /// A known or estimated behavior policy.
    Policy(&'a Policy),
}

fn log_ratios(
    index: usize,
    trajectory: &Trajectory,
    target: &Policy,
    behavior: Behavior<'_>,
) -> Result<Vec<f64>, EstimatorError> {
    let stored = match behavior {
        Behavior::Stored => Some(
            trajectory
                .behavior_probs
                .as_deref()
                .ok_or(EstimatorError::MissingBehaviorProbs(index))?,
        ),
        Behavior::Policy(_) => None,
    };
    let mut acc = 0.0;
    trajectory
        .transitions
        .iter()
        .enumerate()
        .map(|(t, tr)| {
            let pi = target.prob(tr.observation, tr.action);
            let beta = match (stored, behavior) {
                (Some(probs), _) => probs[t],
                (None, Behavior::Policy(b)) => b.prob(tr.observation, tr.action),
                (None, Behavior::Stored) => unreachable!(),
            };
            if beta <= 0.0 && pi > 0.0 {
                return Err(EstimatorError::SupportViolation {
                    trajectory: index,
                    step: t,
                    observation: tr.observation,
                    action: tr.action,
                });
            }
            // pi = 0 sends the running sum to -inf, i.e. a zero weight.
            if pi > 0.0 {
                acc += pi.ln() - beta.ln();
            } else {
                acc = f64::NEG_INFINITY;
            }
            Ok(acc)
        })
        .collect()
}

/// `prod_t pi(a_t|o_t) / beta(a_t|o_t)` for a single trajectory.
pub fn importance_weight(
    trajectory: &Trajectory,
    target: &Policy,
    behavior: Behavior<'_>,
) -> Result<f64, EstimatorError> {
    Ok(log_ratios(0, trajectory, target, behavior)?
        .last()
        .map_or(1.0, |l| l.exp()))
}

/// Cumulative ratios `rho_{i,t} = prod_{j<=t} pi/beta` for every trajectory,
/// accumulated in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    cumulative: Vec<Vec<f64>>,
}

impl ImportanceWeights {
    pub fn compute(
        dataset: &Dataset,
        target: &Policy,
        behavior: Behavior<'_>,
    ) -> Result<Self, EstimatorError> {
        let cumulative = dataset
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| Ok(log_ratios(i, t, target, behavior)?.into_iter().map(f64::exp).collect()))
            .collect::<Result<_, EstimatorError>>()?;
        Ok(Self { cumulative })
    }

    pub fn from_cumulative(cumulative: Vec<Vec<f64>>) -> Self {
        Self { cumulative }
    }

    /// Full-trajectory weight `w_i`.
    pub fn weight(&self, i: usize) -> f64 {
        self.cumulative[i].last().copied().unwrap_or(1.0)
    }

    pub fn cumulative(&self, i: usize) -> &[f64] {
        &self.cumulative[i]
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.cumulative.len()).map(|i| self.weight(i)).collect()
    }

    /// Kish effective sample size of the full-trajectory weights.
    pub fn effective_sample_size(&self) -> f64 {
        let w = self.weights();
        let s: f64 = w.iter().sum();
        let s2: f64 = w.iter().map(|x| x * x).sum();
        if s2 > 0.0 {
            s * s / s2
        } else {
            0.0
        }
    }

    /// Multiplies every ratio by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            cumulative: self
                .cumulative
                .iter()
                .map(|r| r.iter().map(|x| x * c).collect())
                .collect(),
        }
    }
}

/// `(1/n) sum_i w_i G_i`.
pub fn is_estimate(data: &OpeData<'_>, sample: &[usize]) -> Result<f64, EstimatorError> {
    data.check(sample)?;
    let total: f64 = sample
        .iter()
        .map(|&i| data.weights.weight(i) * data.rewards.discounted_return(i, data.gamma))
        .sum();
    Ok(total / sample.len() as f64)
}

fn weighted_mean(data: &OpeData<'_>, sample: impl Iterator<Item = usize>) -> Result<f64, EstimatorError> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in sample {
        let w = data.weights.weight(i);
        num += w * data.rewards.discounted_return(i, data.gamma);
        den += w;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(EstimatorError::DegenerateWeights)
    }
}

/// `sum_i w_i G_i / sum_i w_i`.
pub fn wis_estimate(data: &OpeData<'_>, sample: &[usize]) -> Result<f64, EstimatorError> {
    data.check(sample)?;
    weighted_mean(data, sample.iter().copied())
}

/// `(1/n) sum_i sum_t gamma^(t-1) rho_{i,t} r_{i,t}`.
pub fn pdis_estimate(data: &OpeData<'_>, sample: &[usize]) -> Result<f64, EstimatorError> {
    data.check(sample)?;
    let total: f64 = sample
        .iter()
        .map(|&i| {
            let mut discount = 1.0;
            let mut sum = 0.0;
            for (rho, r) in data.weights.cumulative(i).iter().zip(data.rewards.row(i)) {
                sum += rho * (discount * r);
                discount *= data.gamma;
            }
            sum
        })
        .sum();
    Ok(total / sample.len() as f64)
}

/// Per-horizon WIS: WIS within each trajectory-length group, blended by each
/// group's share of the sample. Groups whose weights vanish are skipped and
/// the remaining shares renormalized.
pub fn phwis_estimate(data: &OpeData<'_>, sample: &[usize]) -> Result<f64, EstimatorError> {
    data.check(sample)?;
    // Per length L: n_L and the weight total W_L over the sample.
    let mut groups: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &i in sample {
        let g = groups.entry(data.dataset.trajectories[i].len()).or_default();
        g.0 += 1;
        g.1 += data.weights.weight(i);
    }
    // sum_L (n_L / n) * num_L / W_L, accumulated per trajectory in sample
    // order as (n_L / W_L) * w_i * G_i; unit weights then reproduce the plain
    // mean bit for bit.
    let covered: usize = groups.values().filter(|g| g.1 > 0.0).map(|g| g.0).sum();
    if covered == 0 {
        return Err(EstimatorError::DegenerateWeights);
    }
    let mut total = 0.0;
    for &i in sample {
        let (n, den) = groups[&data.dataset.trajectories[i].len()];
        if den > 0.0 {
            let w = data.weights.weight(i);
            total += (n as f64 / den) * (w * data.rewards.discounted_return(i, data.gamma));
        }
    }
    Ok(total / covered as f64)
}
