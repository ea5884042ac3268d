//! Nearest-neighbor calibration of preliminary rewards.
//!
//! Two trajectories are close when their observation and action visitation
//! frequencies are close in KL divergence. For a step `(i, t)` the K closest
//! trajectories each contribute the single step whose observation is nearest
//! to `o_t`, and the reward at `(i, t)` is replaced by the mean preliminary
//! reward over those K events.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critical_obs::CriticalSet;
use crate::env_sepsis::{observation_distance, PatientState};
use crate::trajectory::{visitation_distribution, Dataset, StepRewards, Trajectory, Visitation};

/// Additive smoothing applied to visitation frequencies before taking logs.
pub const KL_EPSILON: f64 = 1e-6;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NeighborError {
    #[error("need K < N, got K = {k} with {n} trajectories")]
    TooManyNeighbors { k: usize, n: usize },
    #[error("K must be at least 1")]
    ZeroNeighbors,
    #[error("observation {0} cannot be decoded")]
    UndecodableObservation(usize),
    #[error("no neighbor entry for trajectory {trajectory}, step {step}")]
    MissingEntry { trajectory: usize, step: usize },
    #[error("reward channel does not match the dataset shape")]
    ChannelShape,
}

/// Distance between two observation ids.
pub trait ObservationMetric: Sync {
    fn distance(&self, a: usize, b: usize) -> Result<f64, NeighborError>;
}

/// Euclidean distance between decoded sepsis feature vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct SepsisMetric;

impl ObservationMetric for SepsisMetric {
    fn distance(&self, a: usize, b: usize) -> Result<f64, NeighborError> {
        for id in [a, b] {
            if PatientState::decode(id).is_none() {
                return Err(NeighborError::UndecodableObservation(id));
            }
        }
        Ok(observation_distance(a, b).expect("both ids decode"))
    }
}

/// 0 for equal ids, 1 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiscreteMetric;

impl ObservationMetric for DiscreteMetric {
    fn distance(&self, a: usize, b: usize) -> Result<f64, NeighborError> {
        Ok(if a == b { 0.0 } else { 1.0 })
    }
}

/// Smoothed `KL(q || p)` over the union of both supports.
fn smoothed_kl(q: &[(usize, f64)], p: &[(usize, f64)]) -> f64 {
    let mut union = 0usize;
    let (mut i, mut j) = (0, 0);
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(q.len() + p.len());
    while i < q.len() || j < p.len() {
        let (qi, pj) = (q.get(i), p.get(j));
        match (qi, pj) {
            (Some(&(a, x)), Some(&(b, y))) if a == b => {
                pairs.push((x, y));
                i += 1;
                j += 1;
            }
            (Some(&(a, x)), Some(&(b, _))) if a < b => {
                pairs.push((x, 0.0));
                i += 1;
            }
            (Some(&(_, x)), None) => {
                pairs.push((x, 0.0));
                i += 1;
            }
            (_, Some(&(_, y))) => {
                pairs.push((0.0, y));
                j += 1;
            }
            (None, None) => unreachable!(),
        }
        union += 1;
    }
    let z = 1.0 + KL_EPSILON * union as f64;
    pairs
        .iter()
        .map(|&(x, y)| {
            let (qs, ps) = ((x + KL_EPSILON) / z, (y + KL_EPSILON) / z);
            qs * (qs / ps).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

fn visitation_distance(a: &Visitation, b: &Visitation) -> f64 {
    smoothed_kl(&b.observations, &a.observations) + smoothed_kl(&b.actions, &a.actions)
}

/// `KL(Phi_b || Phi_a)` over observations plus the same over actions.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    visitation_distance(&visitation_distribution(a), &visitation_distribution(b))
}

/// A step `(trajectory, step)` of the dataset, 0-based.
pub type Event = (usize, usize);

/// Step of `traj` whose observation is nearest to `observation`; the earliest
/// wins ties.
fn nearest_step(
    traj: &Trajectory,
    observation: usize,
    metric: &dyn ObservationMetric,
) -> Result<usize, NeighborError> {
    let mut best = (f64::INFINITY, 0);
    for (t, tr) in traj.transitions.iter().enumerate() {
        let d = metric.distance(observation, tr.observation)?;
        if d < best.0 {
            best = (d, t);
        }
    }
    Ok(best.1)
}

/// The `k` trajectories closest to `i`, ordered by (distance, index).
fn neighbor_trajectories(visits: &[Visitation], i: usize, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = visits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, v)| (visitation_distance(&visits[i], v), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored.into_iter().map(|(_, j)| j).collect()
}

fn check_k(dataset: &Dataset, k: usize) -> Result<(), NeighborError> {
    if k == 0 {
        return Err(NeighborError::ZeroNeighbors);
    }
    if k >= dataset.len() {
        return Err(NeighborError::TooManyNeighbors { k, n: dataset.len() });
    }
    Ok(())
}

fn events_on(
    dataset: &Dataset,
    trajectories: &[usize],
    observation: usize,
    metric: &dyn ObservationMetric,
) -> Result<Vec<Event>, NeighborError> {
    trajectories
        .iter()
        .map(|&j| Ok((j, nearest_step(&dataset.trajectories[j], observation, metric)?)))
        .collect()
}

/// K nearest neighbor events of step `(i, t)`.
pub fn find_k_nearest(
    dataset: &Dataset,
    i: usize,
    t: usize,
    k: usize,
    metric: &dyn ObservationMetric,
) -> Result<Vec<Event>, NeighborError> {
    check_k(dataset, k)?;
    let visits: Vec<Visitation> = dataset.trajectories.iter().map(visitation_distribution).collect();
    let neighbors = neighbor_trajectories(&visits, i, k);
    events_on(dataset, &neighbors, dataset.trajectories[i].transitions[t].observation, metric)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborEntry {
    pub trajectory: usize,
    pub step: usize,
    pub neighbors: Vec<Event>,
}

/// Neighbor events for a set of dataset steps, sorted by `(trajectory, step)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborIndex {
    pub k: usize,
    pub entries: Vec<NeighborEntry>,
}

impl NeighborIndex {
    pub fn get(&self, trajectory: usize, step: usize) -> Option<&[Event]> {
        self.entries
            .binary_search_by_key(&(trajectory, step), |e| (e.trajectory, e.step))
            .ok()
            .map(|i| self.entries[i].neighbors.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Runs the K-nearest-neighbor search for every step whose observation
/// satisfies `select`. Parallel over trajectories, order preserving.
pub fn build_index(
    dataset: &Dataset,
    k: usize,
    metric: &dyn ObservationMetric,
    select: impl Fn(usize) -> bool + Sync,
) -> Result<NeighborIndex, NeighborError> {
    check_k(dataset, k)?;
    let visits: Vec<Visitation> = dataset.trajectories.par_iter().map(visitation_distribution).collect();
    let per_traj: Vec<Vec<NeighborEntry>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let traj = &dataset.trajectories[i];
            if !traj.observations().any(&select) {
                return Ok(Vec::new());
            }
            let neighbors = neighbor_trajectories(&visits, i, k);
            traj.transitions
                .iter()
                .enumerate()
                .filter(|(_, tr)| select(tr.observation))
                .map(|(t, tr)| {
                    Ok(NeighborEntry {
                        trajectory: i,
                        step: t,
                        neighbors: events_on(dataset, &neighbors, tr.observation, metric)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_, NeighborError>>()?;
    Ok(NeighborIndex {
        k,
        entries: per_traj.into_iter().flatten().collect(),
    })
}

/// Like [`build_index`] but the K neighboring trajectories of each
/// trajectory are drawn uniformly without replacement instead of by
/// distance; the nearest observation on each is still used.
pub fn build_random_index(
    dataset: &Dataset,
    k: usize,
    metric: &dyn ObservationMetric,
    select: impl Fn(usize) -> bool + Sync,
    seed: u64,
) -> Result<NeighborIndex, NeighborError> {
    check_k(dataset, k)?;
    let n = dataset.len();
    let per_traj: Vec<Vec<NeighborEntry>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let traj = &dataset.trajectories[i];
            if !traj.observations().any(&select) {
                return Ok(Vec::new());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let mut neighbors: Vec<usize> = sample(&mut rng, n - 1, k)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect();
            neighbors.sort_unstable();
            traj.transitions
                .iter()
                .enumerate()
                .filter(|(_, tr)| select(tr.observation))
                .map(|(t, tr)| {
                    Ok(NeighborEntry {
                        trajectory: i,
                        step: t,
                        neighbors: events_on(dataset, &neighbors, tr.observation, metric)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_, NeighborError>>()?;
    Ok(NeighborIndex {
        k,
        entries: per_traj.into_iter().flatten().collect(),
    })
}

/// Mean preliminary reward over a neighbor set.
pub fn averaged_reward(preliminary: &StepRewards, neighbors: &[Event]) -> Result<f64, NeighborError> {
    if neighbors.is_empty() {
        return Err(NeighborError::ZeroNeighbors);
    }
    let sum: f64 = neighbors.iter().map(|&(k, t)| preliminary.get(k, t)).sum();
    Ok(sum / neighbors.len() as f64)
}

/// `r^_t = r-_t` on critical observations and `r~_t` elsewhere.
pub fn reconstruct(
    dataset: &Dataset,
    preliminary: &StepRewards,
    critical: &CriticalSet,
    index: &NeighborIndex,
) -> Result<StepRewards, NeighborError> {
    if !preliminary.matches_shape(dataset) {
        return Err(NeighborError::ChannelShape);
    }
    let rows = dataset
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, traj)| {
            traj.transitions
                .iter()
                .enumerate()
                .map(|(t, tr)| {
                    if !critical.contains(tr.observation) {
                        return Ok(preliminary.get(i, t));
                    }
                    let entry = index.get(i, t).ok_or(NeighborError::MissingEntry {
                        trajectory: i,
                        step: t,
                    })?;
                    averaged_reward(preliminary, entry)
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    Ok(StepRewards::from_rows(rows))
}

/// Sparse averaging matrix over flattened dataset steps: row `(i, t)` holds
/// `1/K` at each neighbor event.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragingMatrix {
    /// Flat offset of each trajectory's first step.
    offsets: Vec<usize>,
    /// Rows in index order: (flat row, flat columns).
    rows: Vec<(usize, Vec<usize>)>,
    k: usize,
}

impl AveragingMatrix {
    pub fn flat(&self, trajectory: usize, step: usize) -> usize {
        self.offsets[trajectory] + step
    }

    /// Number of flattened dataset steps, the length of vectors `M` acts on.
    pub fn dim(&self) -> usize {
        *self.offsets.last().expect("offsets end with the total")
    }

    /// Nonzero entries of each stored row as `(row, column, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let v = 1.0 / self.k as f64;
        self.rows
            .iter()
            .flat_map(move |(r, cols)| cols.iter().map(move |&c| (*r, c, v)))
    }

    /// `M u` on the stored rows, `None` elsewhere.
    pub fn apply(&self, u: &[f64]) -> Vec<Option<f64>> {
        let mut out = vec![None; self.dim()];
        let v = 1.0 / self.k as f64;
        for (r, cols) in &self.rows {
            out[*r] = Some(cols.iter().map(|&c| v * u[c]).sum());
        }
        out
    }
}

pub fn build_matrix(dataset: &Dataset, index: &NeighborIndex) -> AveragingMatrix {
    let mut offsets = Vec::with_capacity(dataset.len() + 1);
    let mut total = 0;
    for t in &dataset.trajectories {
        offsets.push(total);
        total += t.len();
    }
    offsets.push(total);
    let rows = index
        .entries
        .iter()
        .map(|e| {
            (
                offsets[e.trajectory] + e.step,
                e.neighbors.iter().map(|&(k, t)| offsets[k] + t).collect(),
            )
        })
        .collect();
    AveragingMatrix {
        offsets,
        rows,
        k: index.k,
    }
}

/// [`reconstruct`] evaluated through the averaging matrix.
pub fn reconstruct_with_matrix(
    dataset: &Dataset,
    preliminary: &StepRewards,
    critical: &CriticalSet,
    matrix: &AveragingMatrix,
) -> Result<StepRewards, NeighborError> {
    if !preliminary.matches_shape(dataset) {
        return Err(NeighborError::ChannelShape);
    }
    let u: Vec<f64> = preliminary.rows().iter().flatten().copied().collect();
    let averaged = matrix.apply(&u);
    let rows = dataset
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, traj)| {
            traj.transitions
                .iter()
                .enumerate()
                .map(|(t, tr)| {
                    if !critical.contains(tr.observation) {
                        return Ok(preliminary.get(i, t));
                    }
                    averaged[matrix.flat(i, t)].ok_or(NeighborError::MissingEntry {
                        trajectory: i,
                        step: t,
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    Ok(StepRewards::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Transition;
    use std::collections::BTreeSet;

    fn traj(steps: &[(usize, usize)]) -> Trajectory {
        Trajectory {
            transitions: steps
                .iter()
                .enumerate()
                .map(|(t, &(o, a))| Transition {
                    observation: o,
                    action: a,
                    reward: None,
                    next_observation: steps.get(t + 1).map_or(o, |s| s.0),
                })
                .collect(),
            aggregated_reward: 0.0,
            ground_truth_rewards: None,
            behavior_probs: None,
        }
    }

    #[test]
    fn distance_examples() {
        let a = traj(&[(0, 0), (1, 1)]);
        assert!(trajectory_distance(&a, &a).abs() < 1e-15);
        // observations: Phi_b = (.5,.5), Phi_a = (.75,.25); actions identical
        let a = traj(&[(0, 0), (0, 0), (0, 0), (1, 0)]);
        let b = traj(&[(0, 0), (1, 0)]);
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((trajectory_distance(&a, &b) - expected).abs() < 1e-5);
        // disjoint supports stay finite
        let c = traj(&[(2, 1)]);
        let d = trajectory_distance(&a, &c);
        assert!(d.is_finite() && d > 0.0);
    }

    #[test]
    fn identical_trajectories_use_matching_step() {
        let t = traj(&[(0, 0), (1, 1), (2, 0)]);
        let ds = Dataset::new(vec![t; 4], 3, 2, 1.0).unwrap();
        for step in 0..3 {
            let n = find_k_nearest(&ds, 2, step, 3, &DiscreteMetric).unwrap();
            assert_eq!(n, vec![(0, step), (1, step), (3, step)]);
        }
        assert_eq!(
            find_k_nearest(&ds, 0, 0, 4, &DiscreteMetric),
            Err(NeighborError::TooManyNeighbors { k: 4, n: 4 })
        );
    }

    #[test]
    fn earliest_step_wins_ties() {
        let ds = Dataset::new(vec![traj(&[(0, 0)]), traj(&[(1, 0), (1, 0), (0, 0), (0, 0)])], 2, 1, 1.0)
            .unwrap();
        assert_eq!(find_k_nearest(&ds, 0, 0, 1, &DiscreteMetric).unwrap(), vec![(1, 2)]);
    }

    #[test]
    fn averaging_examples() {
        let ch = StepRewards::from_rows(vec![vec![0.2], vec![0.4], vec![9.0]]);
        assert!((averaged_reward(&ch, &[(0, 0), (1, 0)]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(averaged_reward(&ch, &[]), Err(NeighborError::ZeroNeighbors));
    }

    #[test]
    fn mixed_reconstruction_fixture() {
        // three trajectories; observation 1 is critical
        let ds = Dataset::new(
            vec![traj(&[(0, 0), (1, 0)]), traj(&[(1, 0), (0, 0)]), traj(&[(0, 1), (1, 1)])],
            2,
            2,
            1.0,
        )
        .unwrap();
        let prelim = StepRewards::from_rows(vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]);
        let critical = CriticalSet {
            threshold: 0.0,
            observations: BTreeSet::from([1]),
        };
        let index = build_index(&ds, 1, &DiscreteMetric, |o| critical.contains(o)).unwrap();
        // traj 0 and 1 share visitation exactly; traj 2 is nearest to... tie -> lowest index
        assert_eq!(index.get(0, 1), Some(&[(1, 0)][..]));
        assert_eq!(index.get(1, 0), Some(&[(0, 1)][..]));
        // traj 2: distances to 0 and 1 are equal, so trajectory 0 is chosen
        assert_eq!(index.get(2, 1), Some(&[(0, 1)][..]));
        let rhat = reconstruct(&ds, &prelim, &critical, &index).unwrap();
        assert_eq!(rhat.rows(), &[vec![0.1, 0.3], vec![0.2, 0.4], vec![0.5, 0.2]]);
        let m = build_matrix(&ds, &index);
        assert_eq!(reconstruct_with_matrix(&ds, &prelim, &critical, &m).unwrap(), rhat);
    }

    #[test]
    fn empty_and_full_critical_sets() {
        let ds = Dataset::new(vec![traj(&[(0, 0), (1, 0)]), traj(&[(1, 1)]), traj(&[(0, 1)])], 2, 2, 1.0)
            .unwrap();
        let prelim = StepRewards::from_rows(vec![vec![1.0, 2.0], vec![3.0], vec![4.0]]);
        let none = CriticalSet {
            threshold: f64::INFINITY,
            observations: BTreeSet::new(),
        };
        let empty_index = build_index(&ds, 2, &DiscreteMetric, |_| false).unwrap();
        assert!(empty_index.is_empty());
        assert_eq!(reconstruct(&ds, &prelim, &none, &empty_index).unwrap(), prelim);
        let all = CriticalSet {
            threshold: -1.0,
            observations: BTreeSet::from([0, 1]),
        };
        let index = build_index(&ds, 2, &DiscreteMetric, |_| true).unwrap();
        let rhat = reconstruct(&ds, &prelim, &all, &index).unwrap();
        for e in &index.entries {
            assert_eq!(rhat.get(e.trajectory, e.step), averaged_reward(&prelim, &e.neighbors).unwrap());
        }
        let missing = reconstruct(&ds, &prelim, &all, &empty_index);
        assert!(matches!(missing, Err(NeighborError::MissingEntry { .. })));
    }

    #[test]
    fn matrix_rows_sum_to_one() {
        let ds = Dataset::new(
            (0..6).map(|i| traj(&[(i % 3, 0), ((i + 1) % 3, 1)])).collect(),
            3,
            2,
            1.0,
        )
        .unwrap();
        for k in [1, 3] {
            let index = build_index(&ds, k, &DiscreteMetric, |_| true).unwrap();
            let m = build_matrix(&ds, &index);
            let mut sums = vec![0.0; m.dim()];
            for (r, _, v) in m.triplets() {
                sums[r] += v;
                if k == 1 {
                    assert_eq!(v, 1.0);
                }
            }
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn random_index_with_all_candidates_is_deterministic() {
        let ds = Dataset::new(
            (0..5).map(|i| traj(&[(i % 2, 0), (i % 3, 1)])).collect(),
            3,
            2,
            1.0,
        )
        .unwrap();
        let a = build_random_index(&ds, 4, &DiscreteMetric, |_| true, 1).unwrap();
        let b = build_random_index(&ds, 4, &DiscreteMetric, |_| true, 2).unwrap();
        assert_eq!(a, b);
        for e in &a.entries {
            assert!(e.neighbors.iter().all(|&(k, _)| k != e.trajectory));
            assert_eq!(e.neighbors.len(), 4);
        }
    }

    #[test]
    fn sepsis_metric_rejects_bad_ids() {
        assert_eq!(SepsisMetric.distance(0, 0), Ok(0.0));
        assert_eq!(
            SepsisMetric.distance(0, 99_999),
            Err(NeighborError::UndecodableObservation(99_999))
        );
    }
}
