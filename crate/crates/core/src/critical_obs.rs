//! Tabular fitted Q-evaluation, per-observation Q-gaps and the selection of
//! critical observations whose action choice matters most.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::policy::Policy;
use crate::trajectory::{Dataset, StepRewards};

/// Which continuation value the Bellman backup uses at the next observation.
#[derive(Debug, Clone, Copy)]
pub enum Backup<'a> {
    /// `sum_a' pi(a'|o') Q(o', a')` for the given policy.
    Expected(&'a Policy),
    /// `max_a' Q(o', a')` over actions observed at `o'`.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QFitOptions {
    pub max_sweeps: usize,
    /// Sweeps stop once the largest update falls below this.
    pub tolerance: f64,
}

impl Default for QFitOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 10_000,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QFitMeta {
    pub sweeps: usize,
    /// Largest absolute update in the final sweep.
    pub residual: f64,
    pub converged: bool,
    /// Per-sweep largest updates; kept in memory only.
    #[serde(skip)]
    pub deltas: Vec<f64>,
}

/// Q-values over `(observation, action)`; unvisited pairs hold 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "QTableFile", from = "QTableFile")]
pub struct QTable {
    n_obs: usize,
    n_act: usize,
    values: Vec<f64>,
    visited: Vec<bool>,
    pub meta: QFitMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QTableFile {
    n_obs: usize,
    n_act: usize,
    /// `[observation, action, value]` for visited pairs.
    entries: Vec<(usize, usize, f64)>,
    meta: QFitMeta,
}

impl From<QTable> for QTableFile {
    fn from(q: QTable) -> Self {
        let entries = (0..q.values.len())
            .filter(|&i| q.visited[i])
            .map(|i| (i / q.n_act, i % q.n_act, q.values[i]))
            .collect();
        Self {
            n_obs: q.n_obs,
            n_act: q.n_act,
            entries,
            meta: q.meta,
        }
    }
}

impl From<QTableFile> for QTable {
    fn from(f: QTableFile) -> Self {
        let mut q = QTable::zeros(f.n_obs, f.n_act);
        for (o, a, v) in f.entries {
            q.set(o, a, v);
        }
        q.meta = f.meta;
        q
    }
}

impl QTable {
    /// All-zero table with no visited pairs.
    pub fn zeros(n_obs: usize, n_act: usize) -> Self {
        Self {
            n_obs,
            n_act,
            values: vec![0.0; n_obs * n_act],
            visited: vec![false; n_obs * n_act],
            meta: QFitMeta::default(),
        }
    }

    /// Sets a value and marks the pair visited.
    pub fn set(&mut self, observation: usize, action: usize, value: f64) {
        let i = observation * self.n_act + action;
        self.values[i] = value;
        self.visited[i] = true;
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_act(&self) -> usize {
        self.n_act
    }

    pub fn get(&self, observation: usize, action: usize) -> f64 {
        self.values[observation * self.n_act + action]
    }

    pub fn is_visited(&self, observation: usize, action: usize) -> bool {
        self.visited[observation * self.n_act + action]
    }

    /// `sum_a pi(a|o) Q(o, a)`.
    pub fn expected_value(&self, policy: &Policy, observation: usize) -> f64 {
        policy
            .row(observation)
            .iter()
            .enumerate()
            .map(|(a, p)| p * self.get(observation, a))
            .sum()
    }

    /// Largest Q over visited actions, 0 if none.
    pub fn max_value(&self, observation: usize) -> f64 {
        (0..self.n_act)
            .filter(|&a| self.is_visited(observation, a))
            .map(|a| self.get(observation, a))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            .unwrap_or(0.0)
    }

    fn state_value(&self, backup: Backup<'_>, observation: usize) -> f64 {
        match backup {
            Backup::Expected(policy) => self.expected_value(policy, observation),
            Backup::Max => self.max_value(observation),
        }
    }
}

/// Empirical model of one visited pair: mean reward and the distribution of
/// non-terminal next observations (mass may sum to less than 1).
struct PairModel {
    index: usize,
    mean_reward: f64,
    next: Vec<(usize, f64)>,
}

fn empirical_model(dataset: &Dataset, rewards: &StepRewards, sample: &[usize]) -> Vec<PairModel> {
    let n_act = dataset.n_act;
    // (pair, next observation or usize::MAX for terminal) -> multiplicity
    let mut counts: Vec<(usize, usize, f64)> = Vec::new();
    let mut reward_sum = vec![0.0; dataset.n_obs * n_act];
    let mut visits = vec![0.0; dataset.n_obs * n_act];
    for &i in sample {
        let traj = &dataset.trajectories[i];
        let last = traj.len() - 1;
        for (t, tr) in traj.transitions.iter().enumerate() {
            let p = tr.observation * n_act + tr.action;
            reward_sum[p] += rewards.get(i, t);
            visits[p] += 1.0;
            let next = if t == last { usize::MAX } else { tr.next_observation };
            counts.push((p, next, 1.0));
        }
    }
    counts.sort_unstable_by_key(|&(p, o, _)| (p, o));
    let mut models: Vec<PairModel> = Vec::new();
    for (p, o, c) in counts {
        if models.last().map_or(true, |m| m.index != p) {
            models.push(PairModel {
                index: p,
                mean_reward: reward_sum[p] / visits[p],
                next: Vec::new(),
            });
        }
        if o == usize::MAX {
            continue;
        }
        let m = models.last_mut().expect("pushed above");
        match m.next.last_mut() {
            Some((last, mass)) if *last == o => *mass += c / visits[p],
            _ => m.next.push((o, c / visits[p])),
        }
    }
    models
}

/// Fits Q by synchronous sweeps of
/// `Q(o,a) <- mean over matching transitions of [r + gamma * V(o')]`, where the
/// last step of every trajectory has no continuation.
pub fn fit_q(
    dataset: &Dataset,
    rewards: &StepRewards,
    gamma: f64,
    backup: Backup<'_>,
    options: &QFitOptions,
) -> QTable {
    let all: Vec<usize> = (0..dataset.len()).collect();
    fit_q_on(dataset, &all, rewards, gamma, backup, options)
}

/// [`fit_q`] restricted to the trajectories listed in `sample`, counted with
/// multiplicity (bootstrap resamples).
pub fn fit_q_on(
    dataset: &Dataset,
    sample: &[usize],
    rewards: &StepRewards,
    gamma: f64,
    backup: Backup<'_>,
    options: &QFitOptions,
) -> QTable {
    let n_act = dataset.n_act;
    let models = empirical_model(dataset, rewards, sample);
    let mut q = QTable::zeros(dataset.n_obs, n_act);
    for m in &models {
        q.visited[m.index] = true;
    }
    let mut next_obs: Vec<usize> = models.iter().flat_map(|m| m.next.iter().map(|n| n.0)).collect();
    next_obs.sort_unstable();
    next_obs.dedup();
    let mut v = vec![0.0; dataset.n_obs];
    let mut meta = QFitMeta::default();
    let mut updated = vec![0.0; models.len()];
    while meta.sweeps < options.max_sweeps {
        for &o in &next_obs {
            v[o] = q.state_value(backup, o);
        }
        let mut delta: f64 = 0.0;
        for (u, m) in updated.iter_mut().zip(&models) {
            *u = m.mean_reward + gamma * m.next.iter().map(|&(o, p)| p * v[o]).sum::<f64>();
            delta = delta.max((*u - q.values[m.index]).abs());
        }
        for (u, m) in updated.iter().zip(&models) {
            q.values[m.index] = *u;
        }
        meta.sweeps += 1;
        meta.residual = delta;
        meta.deltas.push(delta);
        if delta < options.tolerance {
            meta.converged = true;
            break;
        }
    }
    if !meta.converged {
        log::warn!(
            "Q fit stopped after {} sweeps with residual {:.3e}",
            meta.sweeps,
            meta.residual
        );
    }
    q.meta = meta;
    q
}

/// `max_a Q(o,a) - min_a Q(o,a)` over the actions observed at `o`; 0 when
/// the observation was never visited.
pub fn q_gap(q: &QTable, observation: usize) -> f64 {
    let values: Vec<f64> = (0..q.n_act)
        .filter(|&a| q.is_visited(observation, a))
        .map(|a| q.get(observation, a))
        .collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// Gaps of every observation with at least one visited action.
pub fn visited_gaps(q: &QTable) -> Vec<(usize, f64)> {
    (0..q.n_obs)
        .filter(|&o| (0..q.n_act).any(|a| q.is_visited(o, a)))
        .map(|o| (o, q_gap(q, o)))
        .collect()
}

/// Knee of a non-increasing curve: the point farthest from the chord that
/// joins its endpoints. Returns that point's value, or 0 when there are
/// fewer than 3 points or the curve is a straight line.
pub fn select_threshold_elbow(gaps: &[f64]) -> f64 {
    let n = gaps.len();
    if n < 3 {
        log::warn!("elbow needs at least 3 gaps, got {n}; every observation is critical");
        return 0.0;
    }
    let (x0, y0) = (0.0, gaps[0]);
    let (x1, y1) = ((n - 1) as f64, gaps[n - 1]);
    let norm = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let mut best = (0.0, 0);
    for (i, &y) in gaps.iter().enumerate() {
        let x = i as f64;
        let d = ((y1 - y0) * x - (x1 - x0) * y + x1 * y0 - y1 * x0).abs() / norm;
        if d > best.0 {
            best = (d, i);
        }
    }
    let scale = gaps.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1.0);
    if best.0 <= 1e-12 * scale {
        log::warn!("gap curve has no knee; every observation is critical");
        return 0.0;
    }
    gaps[best.1]
}

/// Critical observations `O* = { o : q_gap(o) > h }` and the threshold used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticalSet {
    pub threshold: f64,
    pub observations: BTreeSet<usize>,
}

impl CriticalSet {
    pub fn contains(&self, observation: usize) -> bool {
        self.observations.contains(&observation)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Strict-threshold selection over visited observations.
pub fn critical_set(q: &QTable, h: f64) -> CriticalSet {
    CriticalSet {
        threshold: h,
        observations: visited_gaps(q)
            .into_iter()
            .filter(|&(_, g)| g > h)
            .map(|(o, _)| o)
            .collect(),
    }
}

/// Threshold from the elbow of the sorted visited gaps.
pub fn elbow_threshold(q: &QTable) -> f64 {
    let mut gaps: Vec<f64> = visited_gaps(q).into_iter().map(|(_, g)| g).collect();
    gaps.sort_by(|a, b| b.total_cmp(a));
    select_threshold_elbow(&gaps)
}
