//! Python bindings: the sepsis simulator, reward reconstruction, the
//! estimators, validation metrics and the full benchmark.

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hope_core::critical_obs::QFitOptions;
use hope_core::env_sepsis::{self, SepsisModel, SimConfig};
use hope_core::estimators::{
    dr_estimate, fqe_estimate, full_sample, is_estimate, pdis_estimate, phwis_estimate,
    reconstruct_rewards, wdr_estimate, wis_estimate, Behavior, HopeOptions, ImportanceWeights,
    OpeData, ThresholdMode,
};
use hope_core::experiment::{self, metric_for, ExperimentConfig};
use hope_core::metrics;
use hope_core::reward_reconstruction::{fit_preliminary, FitOptions, Solver};
use hope_core::StepRewards;

fn value_error(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Tabular stochastic policy over `n_obs` observations and `n_act` actions.
#[pyclass(name = "Policy", frozen)]
struct PyPolicy(hope_core::Policy);

#[pymethods]
impl PyPolicy {
    /// `probs` is row-major: `probs[o * n_act + a] = pi(a | o)`.
    #[new]
    fn new(n_obs: usize, n_act: usize, probs: Vec<f64>) -> PyResult<Self> {
        hope_core::Policy::from_table(n_obs, n_act, probs)
            .map(Self)
            .map_err(value_error)
    }

    #[staticmethod]
    fn uniform(n_obs: usize, n_act: usize) -> Self {
        Self(hope_core::Policy::uniform(n_obs, n_act))
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.0.n_obs()
    }

    #[getter]
    fn n_act(&self) -> usize {
        self.0.n_act()
    }

    fn prob(&self, observation: usize, action: usize) -> PyResult<f64> {
        if observation >= self.0.n_obs() || action >= self.0.n_act() {
            return Err(value_error(format!("({observation}, {action}) is out of range")));
        }
        Ok(self.0.prob(observation, action))
    }

    fn table(&self) -> Vec<Vec<f64>> {
        (0..self.0.n_obs()).map(|o| self.0.row(o).to_vec()).collect()
    }
}

/// Logged trajectories with aggregated rewards.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(hope_core::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        hope_core::Dataset::load(path).map(Self).map_err(value_error)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(value_error)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn n_obs(&self) -> usize {
        self.0.n_obs
    }

    #[getter]
    fn n_act(&self) -> usize {
        self.0.n_act
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    fn aggregated_rewards(&self) -> Vec<f64> {
        self.0.trajectories.iter().map(|t| t.aggregated_reward).collect()
    }

    fn lengths(&self) -> Vec<usize> {
        self.0.trajectories.iter().map(|t| t.len()).collect()
    }

    fn observations(&self, i: usize) -> PyResult<Vec<usize>> {
        self.trajectory(i).map(|t| t.observations().collect())
    }

    fn actions(&self, i: usize) -> PyResult<Vec<usize>> {
        self.trajectory(i).map(|t| t.actions().collect())
    }
}

impl PyDataset {
    fn trajectory(&self, i: usize) -> PyResult<&hope_core::Trajectory> {
        self.0
            .trajectories
            .get(i)
            .ok_or_else(|| value_error(format!("trajectory {i} out of range ({} total)", self.0.len())))
    }
}

fn sim_config(seed: u64, horizon: usize, gamma: f64) -> PyResult<SimConfig> {
    let c = SimConfig {
        seed,
        horizon,
        gamma,
        ..SimConfig::default()
    };
    c.validate().map_err(value_error)?;
    Ok(c)
}

/// The sepsis evaluation policies and the epsilon-soft behavior policy,
/// keyed by name.
#[pyfunction]
#[pyo3(signature = (epsilon = env_sepsis::DEFAULT_BEHAVIOR_EPSILON, horizon = 5, gamma = 0.99))]
fn sepsis_policies(py: Python<'_>, epsilon: f64, horizon: usize, gamma: f64) -> PyResult<Bound<'_, PyDict>> {
    let model = SepsisModel::new(&sim_config(0, horizon, gamma)?).map_err(value_error)?;
    let optimal = model.optimal_policy();
    let out = PyDict::new(py);
    out.set_item("behavior", PyPolicy(env_sepsis::behavior_policy(&optimal, epsilon)))?;
    for (name, policy) in env_sepsis::evaluation_policies(&optimal) {
        out.set_item(name, PyPolicy(policy))?;
    }
    Ok(out)
}

/// Exact value of a policy in the sepsis simulator.
#[pyfunction]
#[pyo3(signature = (policy, horizon = 5, gamma = 0.99))]
fn sepsis_true_value(policy: &PyPolicy, horizon: usize, gamma: f64) -> PyResult<f64> {
    env_sepsis::true_policy_value(&policy.0, &sim_config(0, horizon, gamma)?).map_err(value_error)
}

/// Draws `n` sepsis episodes under `policy`; returns the dataset and the
/// outcome counts.
#[pyfunction]
#[pyo3(signature = (policy, n, seed = 0, horizon = 5, gamma = 0.99))]
fn simulate<'py>(
    py: Python<'py>,
    policy: &PyPolicy,
    n: usize,
    seed: u64,
    horizon: usize,
    gamma: f64,
) -> PyResult<(PyDataset, Bound<'py, PyDict>)> {
    let (ds, counts) =
        env_sepsis::simulate_dataset(&policy.0, &sim_config(seed, horizon, gamma)?, n).map_err(value_error)?;
    let outcomes = PyDict::new(py);
    outcomes.set_item("discharge", counts.discharge)?;
    outcomes.set_item("death", counts.death)?;
    outcomes.set_item("none", counts.none)?;
    Ok((PyDataset(ds), outcomes))
}

fn fit_options(ridge: f64, solver: &str) -> PyResult<FitOptions> {
    let solver = match solver {
        "closed_form" => Solver::ClosedForm,
        "iterative" => Solver::Iterative,
        other => return Err(value_error(format!("unknown solver {other:?}"))),
    };
    Ok(FitOptions {
        solver,
        ridge,
        ..FitOptions::default()
    })
}

fn threshold_mode(threshold: Option<&Bound<'_, PyAny>>) -> PyResult<ThresholdMode> {
    let Some(t) = threshold else {
        return Ok(ThresholdMode::AllCritical);
    };
    if let Ok(h) = t.extract::<f64>() {
        return Ok(ThresholdMode::Fixed { h });
    }
    match t.extract::<String>()?.as_str() {
        "elbow" => Ok(ThresholdMode::Elbow),
        "all_critical" => Ok(ThresholdMode::AllCritical),
        other => Err(value_error(format!("unknown threshold {other:?}"))),
    }
}

/// Per-step preliminary rewards from a least-squares fit to the aggregated
/// rewards.
#[pyfunction]
#[pyo3(signature = (dataset, ridge = 1e-6, solver = "closed_form"))]
fn preliminary_rewards(dataset: &PyDataset, ridge: f64, solver: &str) -> PyResult<Vec<Vec<f64>>> {
    let ds = &dataset.0;
    let model = fit_preliminary(ds, ds.gamma, &fit_options(ridge, solver)?).map_err(value_error)?;
    Ok(model.step_rewards(ds).rows().to_vec())
}

/// Full reconstruction. `threshold` is `None`/`"all_critical"`, `"elbow"`
/// or a number.
#[pyfunction]
#[pyo3(signature = (dataset, k = 5, threshold = None, ridge = 1e-6, solver = "closed_form"))]
fn reconstruct<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    k: usize,
    threshold: Option<&Bound<'py, PyAny>>,
    ridge: f64,
    solver: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = &dataset.0;
    let options = HopeOptions {
        fit: fit_options(ridge, solver)?,
        k,
        threshold: threshold_mode(threshold)?,
        ..HopeOptions::default()
    };
    let model = fit_preliminary(ds, ds.gamma, &options.fit).map_err(value_error)?;
    let rec = reconstruct_rewards(ds, model.step_rewards(ds), &options, metric_for(ds).as_ref(), None)
        .map_err(value_error)?;
    let out = PyDict::new(py);
    out.set_item("preliminary", rec.preliminary.rows().to_vec())?;
    out.set_item("rhat", rec.rhat.rows().to_vec())?;
    out.set_item("threshold", rec.critical.threshold)?;
    out.set_item("critical", rec.critical.observations.iter().copied().collect::<Vec<_>>())?;
    Ok(out)
}

/// One estimator on the full dataset. `rewards` defaults to the sparse
/// channel (aggregated reward at the last step); `behavior` defaults to the
/// logged probabilities.
#[pyfunction]
#[pyo3(signature = (estimator, dataset, policy, rewards = None, behavior = None))]
fn estimate(
    estimator: &str,
    dataset: &PyDataset,
    policy: &PyPolicy,
    rewards: Option<Vec<Vec<f64>>>,
    behavior: Option<&PyPolicy>,
) -> PyResult<f64> {
    let ds = &dataset.0;
    let rewards = rewards.map_or_else(|| StepRewards::sparse(ds), StepRewards::from_rows);
    if !rewards.matches_shape(ds) {
        return Err(value_error("rewards must have one row per trajectory and one entry per step"));
    }
    let behavior = behavior.map_or(Behavior::Stored, |b| Behavior::Policy(&b.0));
    let weights = ImportanceWeights::compute(ds, &policy.0, behavior).map_err(value_error)?;
    let data = OpeData {
        dataset: ds,
        weights: &weights,
        rewards: &rewards,
        gamma: ds.gamma,
    };
    let all = full_sample(ds.len());
    let fqe = || fqe_estimate(ds, &policy.0, &rewards, ds.gamma, &all, &QFitOptions::default());
    let value = match estimator.to_ascii_lowercase().as_str() {
        "is" => is_estimate(&data, &all),
        "wis" => wis_estimate(&data, &all),
        "pdis" => pdis_estimate(&data, &all),
        "phwis" => phwis_estimate(&data, &all),
        "fqe" => fqe().map(|(v, _)| v),
        "dr" => fqe().and_then(|(_, q)| dr_estimate(&data, &policy.0, &q, &all)),
        "wdr" => fqe().and_then(|(_, q)| wdr_estimate(&data, &policy.0, &q, &all)),
        other => return Err(value_error(format!("unknown estimator {other:?}"))),
    };
    value.map_err(value_error)
}

/// Kish effective sample size of the importance weights.
#[pyfunction]
#[pyo3(signature = (dataset, policy, behavior = None))]
fn effective_sample_size(dataset: &PyDataset, policy: &PyPolicy, behavior: Option<&PyPolicy>) -> PyResult<f64> {
    let behavior = behavior.map_or(Behavior::Stored, |b| Behavior::Policy(&b.0));
    ImportanceWeights::compute(&dataset.0, &policy.0, behavior)
        .map(|w| w.effective_sample_size())
        .map_err(value_error)
}

#[pyfunction]
fn spearman(true_values: Vec<f64>, estimates: Vec<f64>) -> PyResult<f64> {
    metrics::spearman_rank(&true_values, &estimates).map_err(value_error)
}

#[pyfunction]
fn regret_at_1(true_values: Vec<f64>, estimates: Vec<f64>) -> PyResult<f64> {
    metrics::regret_at_1(&true_values, &estimates)
        .map(|r| r.value)
        .map_err(value_error)
}

#[pyfunction]
fn welch_t_test(py: Python<'_>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'_, PyDict>> {
    let r = metrics::welch_t_test(&a, &b).map_err(value_error)?;
    let out = PyDict::new(py);
    out.set_item("t_statistic", r.t_statistic)?;
    out.set_item("degrees_of_freedom", r.degrees_of_freedom)?;
    out.set_item("p_value", r.p_value)?;
    out.set_item("significant", r.significant)?;
    Ok(out)
}

/// The built-in experiment config as JSON.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_json_pretty()
}

/// Runs simulate, reconstruct and evaluate into `output_dir`; returns the
/// contents of `metrics.json`.
#[pyfunction]
#[pyo3(signature = (output_dir, config = None))]
fn run_benchmark(output_dir: PathBuf, config: Option<&str>) -> PyResult<String> {
    let mut c = match config {
        Some(text) => ExperimentConfig::from_json(text).map_err(value_error)?,
        None => ExperimentConfig::default(),
    };
    c.output_dir = output_dir;
    experiment::benchmark(&c).map_err(value_error)?;
    std::fs::read_to_string(c.output_dir.join(experiment::METRICS_JSON)).map_err(value_error)
}

#[pymodule]
fn hope_ope(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(sepsis_policies, m)?)?;
    m.add_function(wrap_pyfunction!(sepsis_true_value, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(preliminary_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(regret_at_1, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    Ok(())
}
