//! Preliminary per-step rewards inferred from aggregated rewards.
//!
//! With a tabular reward `f(o, a)` the trajectory-level objective
//!
//! ```text
//! (1/N) sum_i ( agg_i - sum_t gamma^(t-1) f(o_t, a_t) )^2 + ridge * |f|^2
//! ```
//!
//! is a linear least-squares problem: each trajectory is one row of a design
//! matrix whose column for the pair `(o, a)` holds the discounted visit count
//! of that pair. It can be solved exactly through the regularized normal
//! equations or by plain gradient descent.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, cholesky_solve, conjugate_gradient, SparseSymmetric};
use crate::trajectory::{Dataset, StepRewards};

/// Default ridge penalty; short trajectories rarely identify every pair.
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Systems up to this many parameters are factored densely.
const DENSE_LIMIT: usize = 2048;
const PIVOT_TOLERANCE: f64 = 1e-12;
const CG_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ReconstructionError {
    #[error("normal equations are singular with ridge = 0; raise the ridge penalty")]
    UnderDetermined,
    #[error("ridge penalty must be non-negative and finite, got {0}")]
    InvalidRidge(f64),
    #[error("invalid reward model key {0:?}")]
    BadKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    ClosedForm,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub solver: Solver,
    pub ridge: f64,
    /// Gradient-descent iteration cap.
    pub max_iterations: usize,
    /// Gradient descent stops once the relative loss change drops below this.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            solver: Solver::ClosedForm,
            ridge: DEFAULT_RIDGE,
            max_iterations: 10_000,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub solver: Solver,
    pub ridge: f64,
    /// Final objective including the ridge term.
    pub loss: f64,
    pub iterations: usize,
    pub parameters: usize,
}

/// The trajectory-level least-squares problem.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// Column id -> `(observation, action)`.
    pub columns: Vec<(usize, usize)>,
    /// Sparse design rows: `(column, discounted visit count)`.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub targets: Vec<f64>,
    pub ridge: f64,
}

impl LeastSquares {
    pub fn new(dataset: &Dataset, gamma: f64, ridge: f64) -> Self {
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut seen: Vec<(usize, usize)> = dataset
            .trajectories
            .iter()
            .flat_map(|t| t.transitions.iter().map(|tr| (tr.observation, tr.action)))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        for (c, &pair) in seen.iter().enumerate() {
            index.insert(pair, c);
        }
        let rows = dataset
            .trajectories
            .iter()
            .map(|t| {
                let mut coef: BTreeMap<usize, f64> = BTreeMap::new();
                let mut discount = 1.0;
                for tr in &t.transitions {
                    *coef.entry(index[&(tr.observation, tr.action)]).or_insert(0.0) += discount;
                    discount *= gamma;
                }
                coef.into_iter().collect()
            })
            .collect();
        Self {
            columns: seen,
            rows,
            targets: dataset.trajectories.iter().map(|t| t.aggregated_reward).collect(),
            ridge,
        }
    }

    pub fn num_params(&self) -> usize {
        self.columns.len()
    }

    fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.targets)
            .map(|(row, y)| y - row.iter().map(|&(c, x)| x * theta[c]).sum::<f64>())
            .collect()
    }

    /// Objective value, ridge term included.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.rows.len() as f64;
        let data: f64 = self.residuals(theta).iter().map(|r| r * r).sum::<f64>() / n;
        data + self.ridge * theta.iter().map(|t| t * t).sum::<f64>()
    }

    /// Analytic gradient `-(2/N) X^T (y - X theta) + 2 ridge theta`.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let mut grad: Vec<f64> = theta.iter().map(|t| 2.0 * self.ridge * t).collect();
        for (row, r) in self.rows.iter().zip(self.residuals(theta)) {
            for &(c, x) in row {
                grad[c] -= 2.0 * x * r / n;
            }
        }
        grad
    }

    /// Regularized normal equations `(X^T X / N + ridge I) theta = X^T y / N`.
    pub fn normal_equations(&self) -> (SparseSymmetric, Vec<f64>) {
        let n = self.rows.len() as f64;
        let p = self.num_params();
        let mut triplets: Vec<(usize, usize, f64)> = (0..p).map(|c| (c, c, self.ridge)).collect();
        let mut rhs = vec![0.0; p];
        for (row, &y) in self.rows.iter().zip(&self.targets) {
            for &(ci, xi) in row {
                rhs[ci] += xi * y / n;
                for &(cj, xj) in row {
                    triplets.push((ci, cj, xi * xj / n));
                }
            }
        }
        (SparseSymmetric::from_triplets(p, triplets), rhs)
    }

    pub fn solve_closed_form(&self) -> Result<(Vec<f64>, usize), ReconstructionError> {
        let p = self.num_params();
        if self.ridge == 0.0 && p > self.rows.len() {
            return Err(ReconstructionError::UnderDetermined);
        }
        let (a, b) = self.normal_equations();
        if p <= DENSE_LIMIT {
            let mut dense = a.to_dense();
            cholesky(&mut dense, p, PIVOT_TOLERANCE).ok_or(ReconstructionError::UnderDetermined)?;
            return Ok((cholesky_solve(&dense, p, &b), 1));
        }
        let cg = conjugate_gradient(&a, &b, CG_TOLERANCE, 20 * p);
        if !cg.converged {
            if self.ridge == 0.0 {
                return Err(ReconstructionError::UnderDetermined);
            }
            log::warn!(
                "conjugate gradients stopped at relative residual {:.3e} after {} iterations",
                cg.relative_residual,
                cg.iterations
            );
        }
        Ok((cg.x, cg.iterations))
    }

    /// Full-batch gradient descent from zero with step `1 / L`, where `L`
    /// bounds the Hessian's largest eigenvalue.
    pub fn solve_gradient_descent(&self, max_iterations: usize, tolerance: f64) -> (Vec<f64>, usize) {
        let (a, _) = self.normal_equations();
        let lipschitz = 2.0 * a.gershgorin_bound();
        let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 0.0 };
        let mut theta = vec![0.0; self.num_params()];
        let mut loss = self.loss(&theta);
        let mut iterations = 0;
        while iterations < max_iterations && loss > 0.0 {
            let grad = self.gradient(&theta);
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= step * g;
            }
            iterations += 1;
            let next = self.loss(&theta);
            let change = (loss - next).abs() / loss;
            loss = next;
            if change < tolerance {
                break;
            }
        }
        (theta, iterations)
    }
}

/// Tabular preliminary reward `r~(o, a)`; unseen pairs predict zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RewardModelFile", try_from = "RewardModelFile")]
pub struct RewardModel {
    table: BTreeMap<(usize, usize), f64>,
    pub meta: FitMeta,
}

impl RewardModel {
    pub fn from_table(table: BTreeMap<(usize, usize), f64>, meta: FitMeta) -> Self {
        Self { table, meta }
    }

    pub fn predict(&self, observation: usize, action: usize) -> f64 {
        self.table.get(&(observation, action)).copied().unwrap_or(0.0)
    }

    pub fn table(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.table
    }

    /// `r~` evaluated at every step of `dataset`.
    pub fn step_rewards(&self, dataset: &Dataset) -> StepRewards {
        StepRewards::from_fn(dataset, |i, t| {
            let tr = &dataset.trajectories[i].transitions[t];
            self.predict(tr.observation, tr.action)
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardModelFile {
    table: BTreeMap<String, f64>,
    meta: FitMeta,
}

impl From<RewardModel> for RewardModelFile {
    fn from(m: RewardModel) -> Self {
        Self {
            table: m
                .table
                .into_iter()
                .map(|((o, a), v)| (format!("({o},{a})"), v))
                .collect(),
            meta: m.meta,
        }
    }
}

impl TryFrom<RewardModelFile> for RewardModel {
    type Error = ReconstructionError;

    fn try_from(f: RewardModelFile) -> Result<Self, Self::Error> {
        let table = f
            .table
            .into_iter()
            .map(|(k, v)| {
                let pair = k
                    .strip_prefix('(')
                    .and_then(|s| s.strip_suffix(')'))
                    .and_then(|s| s.split_once(','))
                    .and_then(|(o, a)| Some((o.trim().parse().ok()?, a.trim().parse().ok()?)));
                pair.map(|p| (p, v)).ok_or(ReconstructionError::BadKey(k))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { table, meta: f.meta })
    }
}

/// Fits `r~` by minimizing the trajectory-level squared loss.
pub fn fit_preliminary(
    dataset: &Dataset,
    gamma: f64,
    options: &FitOptions,
) -> Result<RewardModel, ReconstructionError> {
    if !(options.ridge >= 0.0 && options.ridge.is_finite()) {
        return Err(ReconstructionError::InvalidRidge(options.ridge));
    }
    let problem = LeastSquares::new(dataset, gamma, options.ridge);
    let (theta, iterations) = match options.solver {
        Solver::ClosedForm => problem.solve_closed_form()?,
        Solver::Iterative => {
            problem.solve_gradient_descent(options.max_iterations, options.tolerance)
        }
    };
    let model = RewardModel {
        table: problem.columns.iter().copied().zip(theta.iter().copied()).collect(),
        meta: FitMeta {
            solver: options.solver,
            ridge: options.ridge,
            loss: problem.loss(&theta),
            iterations,
            parameters: problem.num_params(),
        },
    };
    check_magnitude(&model, dataset, gamma);
    Ok(model)
}

/// Warns when fitted rewards exceed `max |agg| / gamma^(T-1)`, the bound that
/// holds for exactly determined systems.
fn check_magnitude(model: &RewardModel, dataset: &Dataset, gamma: f64) {
    let max_agg = dataset
        .trajectories
        .iter()
        .map(|t| t.aggregated_reward.abs())
        .fold(0.0, f64::max);
    let bound = max_agg / gamma.powi(dataset.max_len().saturating_sub(1) as i32);
    let over = model.table.values().filter(|v| v.abs() > bound + 1e-9).count();
    if over > 0 {
        log::warn!("{over} preliminary rewards exceed the magnitude bound {bound:.4}");
    }
}

/// Unregularized objective `(1/N) sum_i (agg_i - sum_t gamma^(t-1) r~(o_t, a_t))^2`.
pub fn loss(model: &RewardModel, dataset: &Dataset, gamma: f64) -> f64 {
    let total: f64 = dataset
        .trajectories
        .iter()
        .map(|t| {
            let mut discount = 1.0;
            let mut pred = 0.0;
            for tr in &t.transitions {
                pred += discount * model.predict(tr.observation, tr.action);
                discount *= gamma;
            }
            (t.aggregated_reward - pred).powi(2)
        })
        .sum();
    total / dataset.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Trajectory, Transition};

    fn trajectory(steps: &[(usize, usize)], agg: f64) -> Trajectory {
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
            aggregated_reward: agg,
            ground_truth_rewards: None,
            behavior_probs: None,
        }
    }

    #[test]
    fn single_step_is_exactly_determined() {
        let ds = Dataset::new(vec![trajectory(&[(0, 0)], 0.5)], 1, 1, 1.0).unwrap();
        for solver in [Solver::ClosedForm, Solver::Iterative] {
            let opts = FitOptions {
                solver,
                ridge: 0.0,
                ..FitOptions::default()
            };
            let m = fit_preliminary(&ds, 1.0, &opts).unwrap();
            assert!((m.predict(0, 0) - 0.5).abs() < 1e-9, "{solver:?}");
            assert_eq!(m.predict(0, 1), 0.0);
        }
    }

    #[test]
    fn two_by_two_system_reproduces_aggregates() {
        // rows: r(0,0) + 0.5 r(1,0) = 1 ; r(1,0) = 2  =>  r(1,0) = 2, r(0,0) = 0
        let ds = Dataset::new(
            vec![trajectory(&[(0, 0), (1, 0)], 1.0), trajectory(&[(1, 0)], 2.0)],
            2,
            1,
            0.5,
        )
        .unwrap();
        let opts = FitOptions {
            ridge: 0.0,
            ..FitOptions::default()
        };
        let m = fit_preliminary(&ds, 0.5, &opts).unwrap();
        assert!((m.predict(1, 0) - 2.0).abs() < 1e-12);
        assert!(m.predict(0, 0).abs() < 1e-12);
        assert!(loss(&m, &ds, 0.5) < 1e-20);
    }

    #[test]
    fn zero_ridge_underdetermined_is_reported() {
        let ds = Dataset::new(vec![trajectory(&[(0, 0), (1, 0)], 1.0)], 2, 1, 1.0).unwrap();
        let opts = FitOptions {
            ridge: 0.0,
            ..FitOptions::default()
        };
        assert_eq!(fit_preliminary(&ds, 1.0, &opts), Err(ReconstructionError::UnderDetermined));
        // identical columns: two pairs always visited together
        let ds = Dataset::new(
            vec![trajectory(&[(0, 0), (1, 0)], 1.0), trajectory(&[(0, 0), (1, 0)], 3.0)],
            2,
            1,
            1.0,
        )
        .unwrap();
        assert_eq!(fit_preliminary(&ds, 1.0, &opts), Err(ReconstructionError::UnderDetermined));
        assert!(fit_preliminary(&ds, 1.0, &FitOptions::default()).is_ok());
    }

    #[test]
    fn loss_examples() {
        let ds = Dataset::new(vec![trajectory(&[(0, 0)], 0.0)], 1, 1, 1.0).unwrap();
        let zero = RewardModel::from_table(
            BTreeMap::new(),
            FitMeta {
                solver: Solver::ClosedForm,
                ridge: 0.0,
                loss: 0.0,
                iterations: 0,
                parameters: 0,
            },
        );
        assert_eq!(loss(&zero, &ds, 1.0), 0.0);
    }

    #[test]
    fn model_json_uses_pair_keys() {
        let ds = Dataset::new(vec![trajectory(&[(3, 1)], 0.25)], 4, 2, 1.0).unwrap();
        let m = fit_preliminary(&ds, 1.0, &FitOptions::default()).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"(3,1)\""));
        let back: RewardModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<RewardModel>(
            r#"{"table":{"3,1":1.0},"meta":{"solver":"closed_form","ridge":0.0,"loss":0.0,"iterations":0,"parameters":0}}"#
        )
        .is_err());
    }
}
