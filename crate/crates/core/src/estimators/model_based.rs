//! Fitted Q-evaluation and the doubly robust estimators built on it.

use super::{EstimatorError, OpeData};
use crate::critical_obs::{fit_q_on, Backup, QFitOptions, QTable};
use crate::policy::Policy;
use crate::trajectory::{Dataset, StepRewards};

/// Fits `Q^pi` on the sample and returns the mean of
/// `sum_a pi(a|o_1) Q(o_1, a)` over its initial observations.
pub fn fqe_estimate(
    dataset: &Dataset,
    target: &Policy,
    rewards: &StepRewards,
    gamma: f64,
    sample: &[usize],
    options: &QFitOptions,
) -> Result<(f64, QTable), EstimatorError> {
    if sample.is_empty() {
        return Err(EstimatorError::EmptySample);
    }
    if !rewards.matches_shape(dataset) {
        return Err(EstimatorError::ChannelShape);
    }
    let q = fit_q_on(dataset, sample, rewards, gamma, Backup::Expected(target), options);
    let total: f64 = sample
        .iter()
        .map(|&i| q.expected_value(target, dataset.trajectories[i].initial_observation()))
        .sum();
    Ok((total / sample.len() as f64, q))
}

/// Per-step correction `r_t - Q(o_t, a_t) + gamma V(o_{t+1})`, with no
/// continuation after the final step.
fn corrections(data: &OpeData<'_>, target: &Policy, q: &QTable, i: usize) -> Vec<f64> {
    let traj = &data.dataset.trajectories[i];
    let last = traj.len() - 1;
    traj.transitions
        .iter()
        .enumerate()
        .map(|(t, tr)| {
            let next = if t == last {
                0.0
            } else {
                q.expected_value(target, tr.next_observation)
            };
            data.rewards.get(i, t) - q.get(tr.observation, tr.action) + data.gamma * next
        })
        .collect()
}

/// `(1/n) sum_i [ V(o_1) + sum_t gamma^(t-1) rho_{i,t} (r_t - Q(o_t,a_t) + gamma V(o_{t+1})) ]`.
pub fn dr_estimate(
    data: &OpeData<'_>,
    target: &Policy,
    q: &QTable,
    sample: &[usize],
) -> Result<f64, EstimatorError> {
    data.check(sample)?;
    let total: f64 = sample
        .iter()
        .map(|&i| {
            let v0 = q.expected_value(target, data.dataset.trajectories[i].initial_observation());
            let mut discount = 1.0;
            let mut sum = 0.0;
            for (rho, c) in data.weights.cumulative(i).iter().zip(corrections(data, target, q, i)) {
                sum += rho * (discount * c);
                discount *= data.gamma;
            }
            v0 + sum
        })
        .sum();
    Ok(total / sample.len() as f64)
}

/// Weighted DR: the cumulative ratios at each step are normalized across the
/// sample. A finished trajectory keeps its last ratio in the normalizer and
/// contributes nothing further.
pub fn wdr_estimate(
    data: &OpeData<'_>,
    target: &Policy,
    q: &QTable,
    sample: &[usize],
) -> Result<f64, EstimatorError> {
    data.check(sample)?;
    let horizon = sample
        .iter()
        .map(|&i| data.dataset.trajectories[i].len())
        .max()
        .unwrap_or(0);
    let mut normalizer = vec![0.0; horizon];
    for &i in sample {
        let rho = data.weights.cumulative(i);
        let last = *rho.last().expect("nonempty trajectory");
        for (t, z) in normalizer.iter_mut().enumerate() {
            *z += rho.get(t).copied().unwrap_or(last);
        }
    }
    let n = sample.len() as f64;
    let mut total = 0.0;
    for &i in sample {
        total += q.expected_value(target, data.dataset.trajectories[i].initial_observation()) / n;
        let mut discount = 1.0;
        for (t, (rho, c)) in data
            .weights
            .cumulative(i)
            .iter()
            .zip(corrections(data, target, q, i))
            .enumerate()
        {
            if normalizer[t] > 0.0 {
                total += discount * (rho / normalizer[t]) * c;
            }
            discount *= data.gamma;
        }
    }
    Ok(total)
}
