use serde::{Deserialize, Serialize};

use super::{discounted_sum, Dataset, DatasetError};

/// A per-step reward channel: one value for every step `(i, t)` of a dataset.
///
/// Estimators are agnostic to where these rewards came from: the sparse
/// channel (aggregate on the last step), reconstructed rewards, or the
/// simulator's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRewards {
    rows: Vec<Vec<f64>>,
}

impl StepRewards {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    /// Aggregated reward placed on the final step, zero elsewhere.
    pub fn sparse(dataset: &Dataset) -> Self {
        let rows = dataset
            .trajectories
            .iter()
            .map(|t| {
                let mut row = vec![0.0; t.len()];
                if let Some(last) = row.last_mut() {
                    *last = t.aggregated_reward;
                }
                row
            })
            .collect();
        Self { rows }
    }

    pub fn ground_truth(dataset: &Dataset) -> Result<Self, DatasetError> {
        let rows = dataset
            .trajectories
            .iter()
            .enumerate()
            .map(|(index, t)| {
                t.ground_truth_rewards
                    .clone()
                    .ok_or(DatasetError::MissingGroundTruth { index })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    /// Fills every step with `f(i, t)`.
    pub fn from_fn(dataset: &Dataset, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let rows = dataset
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| (0..t.len()).map(|s| f(i, s)).collect())
            .collect();
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.rows[i][t]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn matches_shape(&self, dataset: &Dataset) -> bool {
        self.rows.len() == dataset.len()
            && self
                .rows
                .iter()
                .zip(&dataset.trajectories)
                .all(|(r, t)| r.len() == t.len())
    }

    pub fn discounted_return(&self, i: usize, gamma: f64) -> f64 {
        discounted_sum(&self.rows[i], gamma)
    }

    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        self.rows.iter().map(|r| discounted_sum(r, gamma)).collect()
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.rows.iter().flatten().fold(None, |acc, &x| match acc {
            None => Some((x, x)),
            Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
        })
    }

    /// Elementwise mean of several channels with identical shape.
    pub fn mean_of(channels: &[StepRewards]) -> Option<Self> {
        let first = channels.first()?;
        let n = channels.len() as f64;
        let mut rows: Vec<Vec<f64>> = first.rows.iter().map(|r| vec![0.0; r.len()]).collect();
        for ch in channels {
            for (acc, row) in rows.iter_mut().zip(&ch.rows) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
        }
        for row in &mut rows {
            for x in row {
                *x /= n;
            }
        }
        Some(Self { rows })
    }
}
