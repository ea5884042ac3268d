//! Benchmark pipeline on the synthetic sepsis environment.
//!
//! Stages are file-to-file transforms over one output directory:
//! `simulate` writes the dataset and its ground-truth sidecar,
//! `reconstruct` writes the reward model, Q table, critical set, neighbor
//! index and reconstructed channels, and `evaluate` writes estimates, CSV
//! reports and `metrics.json` with a provenance block. Any stage can be
//! rerun alone on the artifacts of the previous one. Given a config, every
//! artifact is a deterministic function of it, independent of thread count.

mod config;
mod report;

pub use config::{
    BehaviorMode, BehaviorSettings, ExperimentConfig, PolicyKind, PolicySpec,
    ReconstructionSettings, SimSettings, SCHEMA_VERSION,
};
pub use report::{
    acceptance_checks, render_text, CheckOutcome, PolicyDiagnostics, Provenance, Report,
    SignificanceRow,
};

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critical_obs::QTable;
use crate::env_sepsis::{
    behavior_policy, simulate_dataset, OutcomeCounts, SepsisModel, Treatments, NUM_STATES,
};
use crate::estimators::{
    fqe_estimate, full_sample, is_estimate, pdis_estimate, phwis_estimate, rand_hope_channel,
    reconstruct_rewards, soft_hope_channel, sparse_hope_channel, wis_estimate, dr_estimate,
    wdr_estimate, Behavior, EstimateResult, Estimator, EstimatorError, ImportanceWeights, OpeData,
    RewardSource, ThresholdMode,
};
use crate::metrics::{resample_indices, summarize, welch_t_test, PolicyEvaluation};
use crate::neighbors::{DiscreteMetric, ObservationMetric, SepsisMetric};
use crate::policy::Policy;
use crate::reward_reconstruction::fit_preliminary;
use crate::trajectory::{Dataset, RewardSidecar, StepRewards};

pub const DATASET: &str = "dataset.jsonl";
pub const GROUND_TRUTH: &str = "ground_truth.jsonl";
pub const SIMULATION_SUMMARY: &str = "simulate.json";
pub const REWARD_MODEL: &str = "reward_model.json";
pub const QTABLE: &str = "qtable.json";
pub const CRITICAL_SET: &str = "critical_set.json";
pub const NEIGHBOR_INDEX: &str = "neighbor_index.json";
pub const RHAT: &str = "rhat.jsonl";
pub const RECONSTRUCTION_SUMMARY: &str = "reconstruct.json";
pub const ESTIMATES: &str = "estimates.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SIGNIFICANCE_CSV: &str = "significance.csv";
pub const BOOTSTRAP_CSV: &str = "bootstrap.csv";
pub const METRICS_JSON: &str = "metrics.json";

/// Every artifact the pipeline may write, in stage order.
pub const ARTIFACTS: [&str; 18] = [
    DATASET,
    GROUND_TRUTH,
    SIMULATION_SUMMARY,
    REWARD_MODEL,
    QTABLE,
    CRITICAL_SET,
    NEIGHBOR_INDEX,
    RHAT,
    "rhat_sparse_hope.jsonl",
    "rhat_soft_hope.jsonl",
    "rhat_rand_hope.jsonl",
    RECONSTRUCTION_SUMMARY,
    ESTIMATES,
    METRICS_CSV,
    SUMMARY_CSV,
    SIGNIFICANCE_CSV,
    BOOTSTRAP_CSV,
    METRICS_JSON,
];

const BOOTSTRAP_SALT: u64 = 0xB007_5EED_0000_0000;
const RAND_HOPE_SALT: u64 = 0x4A4D_D0E5_0000_0000;

/// Reconstructed-channel file of a HOPE variant.
pub fn channel_file(variant: Estimator) -> &'static str {
    match variant {
        Estimator::SparseHope => "rhat_sparse_hope.jsonl",
        Estimator::SoftHope => "rhat_soft_hope.jsonl",
        Estimator::RandHope => "rhat_rand_hope.jsonl",
        _ => RHAT,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Reconstruct,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simulate => "simulate",
            Self::Reconstruct => "reconstruct",
            Self::Evaluate => "evaluate",
            Self::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {}: {source}", path.display())]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {context}: {source}")]
    Stage {
        stage: Stage,
        context: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

fn stage_err<E>(stage: Stage, context: impl Into<String>) -> impl FnOnce(E) -> ExperimentError
where
    E: std::error::Error + Send + Sync + 'static,
{
    let context = context.into();
    move |e| ExperimentError::Stage {
        stage,
        context,
        source: Box::new(e),
    }
}

/// Reads and writes artifacts of one stage inside the output directory.
struct Artifacts<'a> {
    dir: &'a Path,
    stage: Stage,
}

impl<'a> Artifacts<'a> {
    fn new(dir: &'a Path, stage: Stage) -> Result<Self, ExperimentError> {
        std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            stage,
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self { dir, stage })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn io(&self, path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError {
        let (stage, path) = (self.stage, path.to_path_buf());
        move |source| ExperimentError::Io { stage, path, source }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), ExperimentError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(self.io(&path))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), ExperimentError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(stage_err(self.stage, name))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, ExperimentError> {
        let path = self.path(name);
        let file = File::open(&path).map_err(self.io(&path))?;
        serde_json::from_reader(BufReader::new(file)).map_err(stage_err(self.stage, name))
    }

    fn write_channel(&self, name: &str, channel: &StepRewards) -> Result<(), ExperimentError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(self.io(&path))?;
        channel
            .write_jsonl(BufWriter::new(file))
            .map_err(stage_err(self.stage, name))
    }

    fn remove_stale(&self, name: &str) -> Result<(), ExperimentError> {
        let path = self.path(name);
        match std::fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(self.io(&path)(e)),
            _ => Ok(()),
        }
    }
}

fn load_dataset(stage: Stage, path: &Path) -> Result<Dataset, ExperimentError> {
    Dataset::load(path).map_err(stage_err(stage, path.display().to_string()))
}

/// The sepsis vital-sign metric for sepsis-sized datasets, exact matching otherwise.
pub fn metric_for(dataset: &Dataset) -> Box<dyn ObservationMetric> {
    if dataset.n_obs == NUM_STATES {
        Box::new(SepsisMetric)
    } else {
        Box::new(DiscreteMetric)
    }
}

/// The behavior policy, the evaluation policies and their exact values.
#[derive(Debug, Clone)]
pub struct PolicySet {
    pub behavior: Policy,
    pub targets: Vec<(String, Policy)>,
    pub true_values: Vec<f64>,
}

pub fn policy_set(config: &ExperimentConfig) -> Result<PolicySet, ExperimentError> {
    let model = SepsisModel::new(&config.sim.with_seed(config.seed))
        .map_err(|e| ExperimentError::Config(format!("sim: {e}")))?;
    let optimal = model.optimal_policy();
    let behavior = behavior_policy(&optimal, config.behavior.epsilon);
    let abx = Treatments::ANTIBIOTICS;
    let targets: Vec<(String, Policy)> = config
        .policies
        .iter()
        .map(|spec| {
            let policy = match spec.kind {
                PolicyKind::Optimal => optimal.clone(),
                PolicyKind::WithAntibiotics => optimal.map_greedy(|a| a | abx).expect("valid action"),
                PolicyKind::WithoutAntibiotics => {
                    optimal.map_greedy(|a| a & !abx).expect("valid action")
                }
                PolicyKind::Behavior => behavior.clone(),
                PolicyKind::Uniform => Policy::uniform(optimal.n_obs(), optimal.n_act()),
            };
            (spec.name.clone(), policy)
        })
        .collect();
    let true_values = targets
        .iter()
        .map(|(_, p)| model.policy_value(p))
        .collect::<Result<_, _>>()
        .map_err(stage_err(Stage::Evaluate, "true policy values"))?;
    Ok(PolicySet {
        behavior,
        targets,
        true_values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSummary {
    pub n_trajectories: usize,
    pub outcomes: OutcomeCounts,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// Draws behavior trajectories; writes the reward-free dataset and the
/// evaluation-only ground-truth sidecar.
pub fn simulate(config: &ExperimentConfig) -> Result<SimulationSummary, ExperimentError> {
    config.validate()?;
    let out = Artifacts::new(&config.output_dir, Stage::Simulate)?;
    let model = SepsisModel::new(&config.sim.with_seed(config.seed))
        .map_err(|e| ExperimentError::Config(format!("sim: {e}")))?;
    let behavior = behavior_policy(&model.optimal_policy(), config.behavior.epsilon);
    let (full, outcomes) = simulate_dataset(&behavior, model.config(), config.n_trajectories)
        .map_err(stage_err(Stage::Simulate, "simulate_dataset"))?;
    let (dataset, sidecar) = full.strip_rewards();
    let n = dataset.len() as f64;
    let summary = SimulationSummary {
        n_trajectories: dataset.len(),
        outcomes,
        mean_return: dataset.trajectories.iter().map(|t| t.aggregated_reward).sum::<f64>() / n,
        mean_length: dataset.num_transitions() as f64 / n,
    };
    let mut bytes = Vec::new();
    dataset
        .write_jsonl(&mut bytes)
        .map_err(stage_err(Stage::Simulate, DATASET))?;
    out.write(DATASET, &bytes)?;
    bytes.clear();
    sidecar
        .write_jsonl(&mut bytes)
        .map_err(stage_err(Stage::Simulate, GROUND_TRUTH))?;
    out.write(GROUND_TRUTH, &bytes)?;
    out.write_json(SIMULATION_SUMMARY, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionSummary {
    pub preliminary_loss: f64,
    pub parameters: usize,
    pub threshold: f64,
    pub critical_observations: usize,
    pub neighbor_entries: usize,
    pub q_sweeps: Option<usize>,
    /// Reconstructed-channel files written, by estimator.
    pub channels: BTreeMap<Estimator, String>,
}

/// HOPE variants whose reconstructed channel the config asks for.
fn requested_variants(config: &ExperimentConfig) -> Vec<Estimator> {
    config
        .estimators
        .iter()
        .copied()
        .filter(|&e| config.reward_source(e) == RewardSource::Reconstructed)
        .map(|e| if e.is_hope_variant() { e } else { Estimator::Hope })
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Fits the preliminary rewards and runs critical-observation detection,
/// neighbor search and calibration; also builds the ablation channels the
/// configured estimators need. `dataset` defaults to the output directory's.
pub fn reconstruct(
    config: &ExperimentConfig,
    dataset: Option<&Path>,
) -> Result<ReconstructionSummary, ExperimentError> {
    const S: Stage = Stage::Reconstruct;
    config.validate()?;
    let out = Artifacts::new(&config.output_dir, S)?;
    let ds = load_dataset(S, &dataset.map_or_else(|| out.path(DATASET), Path::to_path_buf))?;
    let metric = metric_for(&ds);
    let options = config.hope_options();

    let model = fit_preliminary(&ds, ds.gamma, &options.fit).map_err(stage_err(S, "fit_preliminary"))?;
    let preliminary = model.step_rewards(&ds);
    let rec = reconstruct_rewards(&ds, preliminary, &options, metric.as_ref(), None)
        .map_err(stage_err(S, "hope reconstruction"))?;

    let mut channels = BTreeMap::new();
    for variant in requested_variants(config) {
        let channel = match variant {
            Estimator::Hope => rec.rhat.clone(),
            Estimator::SparseHope => {
                sparse_hope_channel(&ds, &options, metric.as_ref(), None)
                    .map_err(stage_err(S, "sparse_hope reconstruction"))?
                    .rhat
            }
            // All-critical mode already averages at every step.
            Estimator::SoftHope if options.threshold == ThresholdMode::AllCritical => rec.rhat.clone(),
            Estimator::SoftHope => soft_hope_channel(&ds, &rec.preliminary, &options, metric.as_ref())
                .map_err(stage_err(S, "soft_hope reconstruction"))?,
            Estimator::RandHope => rand_hope_channel(
                &ds,
                &rec.preliminary,
                &rec.critical,
                &options,
                metric.as_ref(),
                config.seed ^ RAND_HOPE_SALT,
            )
            .map_err(stage_err(S, "rand_hope reconstruction"))?,
            other => unreachable!("{other} is not a HOPE variant"),
        };
        channels.insert(variant, channel);
    }

    out.write_json(REWARD_MODEL, &model)?;
    match &rec.qtable {
        Some(q) => out.write_json(QTABLE, q)?,
        None => out.remove_stale(QTABLE)?,
    }
    out.write_json(CRITICAL_SET, &rec.critical)?;
    out.write_json(NEIGHBOR_INDEX, &rec.index)?;
    out.write_channel(RHAT, &rec.rhat)?;
    for variant in [Estimator::SparseHope, Estimator::SoftHope, Estimator::RandHope] {
        match channels.get(&variant) {
            Some(ch) => out.write_channel(channel_file(variant), ch)?,
            None => out.remove_stale(channel_file(variant))?,
        }
    }
    let summary = ReconstructionSummary {
        preliminary_loss: model.meta.loss,
        parameters: model.meta.parameters,
        threshold: rec.critical.threshold,
        critical_observations: rec.critical.len(),
        neighbor_entries: rec.index.len(),
        q_sweeps: rec.qtable.as_ref().map(|q| q.meta.sweeps),
        channels: channels
            .keys()
            .map(|&e| (e, channel_file(e).to_string()))
            .collect(),
    };
    out.write_json(RECONSTRUCTION_SUMMARY, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ChannelKey {
    Sparse,
    GroundTruth,
    Reconstructed(Estimator),
}

/// Reward channels loaded for evaluation, shared between estimators.
struct Channels {
    store: Vec<StepRewards>,
    /// Channel index per configured estimator.
    of: Vec<usize>,
}

impl Channels {
    fn load(
        config: &ExperimentConfig,
        out: &Artifacts<'_>,
        ds: &Dataset,
    ) -> Result<Self, ExperimentError> {
        const S: Stage = Stage::Evaluate;
        let mut keys: BTreeMap<ChannelKey, usize> = BTreeMap::new();
        let mut store = Vec::new();
        let mut of = Vec::new();
        let mut sidecar: Option<RewardSidecar> = None;
        for &e in &config.estimators {
            let key = match config.reward_source(e) {
                RewardSource::Sparse => ChannelKey::Sparse,
                RewardSource::GroundTruth => ChannelKey::GroundTruth,
                RewardSource::Reconstructed if e.is_hope_variant() => ChannelKey::Reconstructed(e),
                RewardSource::Reconstructed => ChannelKey::Reconstructed(Estimator::Hope),
            };
            if let Some(&i) = keys.get(&key) {
                of.push(i);
                continue;
            }
            let channel = match key {
                ChannelKey::Sparse => StepRewards::sparse(ds),
                ChannelKey::GroundTruth => {
                    if sidecar.is_none() {
                        let path = out.path(GROUND_TRUTH);
                        sidecar = Some(
                            RewardSidecar::load(&path)
                                .map_err(stage_err(S, path.display().to_string()))?,
                        );
                    }
                    let full = ds
                        .attach_rewards(sidecar.as_ref().expect("loaded"))
                        .map_err(stage_err(S, GROUND_TRUTH))?;
                    StepRewards::ground_truth(&full).map_err(stage_err(S, GROUND_TRUTH))?
                }
                ChannelKey::Reconstructed(variant) => {
                    let name = channel_file(variant);
                    let ch = StepRewards::load(out.path(name)).map_err(stage_err(
                        S,
                        format!("{name} (run reconstruct with {variant} configured)"),
                    ))?;
                    if !ch.matches_shape(ds) {
                        return Err(stage_err(S, name)(EstimatorError::ChannelShape));
                    }
                    ch
                }
            };
            keys.insert(key, store.len());
            of.push(store.len());
            store.push(channel);
        }
        Ok(Self { store, of })
    }

    fn source_name(config: &ExperimentConfig, e: Estimator) -> RewardSource {
        config.reward_source(e)
    }
}

/// Everything needed to evaluate one target policy on a sample.
struct PolicyContext<'a> {
    config: &'a ExperimentConfig,
    dataset: &'a Dataset,
    channels: &'a Channels,
    target: &'a Policy,
    weights: ImportanceWeights,
}

impl PolicyContext<'_> {
    /// All configured estimators on one sample. Q fits are shared between
    /// FQE, DR and WDR reading the same channel.
    fn run(&self, sample: &[usize]) -> Vec<Result<f64, EstimatorError>> {
        let mut fqe: Vec<Option<Result<(f64, QTable), EstimatorError>>> =
            vec![None; self.channels.store.len()];
        self.config
            .estimators
            .iter()
            .zip(&self.channels.of)
            .map(|(&e, &c)| {
                let rewards = &self.channels.store[c];
                let data = OpeData {
                    dataset: self.dataset,
                    weights: &self.weights,
                    rewards,
                    gamma: self.dataset.gamma,
                };
                let value = match e {
                    Estimator::Is => is_estimate(&data, sample),
                    Estimator::Pdis => pdis_estimate(&data, sample),
                    Estimator::Phwis => phwis_estimate(&data, sample),
                    Estimator::Wis
                    | Estimator::Hope
                    | Estimator::SparseHope
                    | Estimator::SoftHope
                    | Estimator::RandHope => wis_estimate(&data, sample),
                    Estimator::Fqe | Estimator::Dr | Estimator::Wdr => {
                        let fit = fqe[c].get_or_insert_with(|| {
                            fqe_estimate(
                                self.dataset,
                                self.target,
                                rewards,
                                self.dataset.gamma,
                                sample,
                                &self.config.reconstruction.q_fit,
                            )
                        });
                        match (e, fit) {
                            (_, Err(err)) => Err(err.clone()),
                            (Estimator::Fqe, Ok((v, _))) => Ok(*v),
                            (Estimator::Dr, Ok((_, q))) => dr_estimate(&data, self.target, q, sample),
                            (_, Ok((_, q))) => wdr_estimate(&data, self.target, q, sample),
                        }
                    }
                };
                value.and_then(|v| {
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(EstimatorError::DegenerateWeights)
                    }
                })
            })
            .collect()
    }
}

/// Runs every configured estimator on every policy, bootstraps them, and
/// writes the reports. `dataset` defaults to the output directory's; the
/// reconstructed channels are always read from the output directory.
pub fn evaluate(config: &ExperimentConfig, dataset: Option<&Path>) -> Result<Report, ExperimentError> {
    const S: Stage = Stage::Evaluate;
    config.validate()?;
    let out = Artifacts::new(&config.output_dir, S)?;
    let ds = load_dataset(S, &dataset.map_or_else(|| out.path(DATASET), Path::to_path_buf))?;
    let channels = Channels::load(config, &out, &ds)?;
    let policies = policy_set(config)?;
    let cloned = match config.behavior.mode {
        BehaviorMode::Stored => None,
        BehaviorMode::Cloned => Some(ds.estimate_behavior_policy(config.behavior.cloning_smoothing)),
    };
    let behavior = cloned.as_ref().map_or(Behavior::Stored, Behavior::Policy);
    let n = ds.len();
    let all = full_sample(n);

    let mut evaluations = Vec::new();
    let mut diagnostics = Vec::new();
    for ((name, target), &truth) in policies.targets.iter().zip(&policies.true_values) {
        let weights = ImportanceWeights::compute(&ds, target, behavior)
            .map_err(stage_err(S, format!("importance weights for {name}")))?;
        diagnostics.push(PolicyDiagnostics {
            policy: name.clone(),
            true_value: truth,
            effective_sample_size: weights.effective_sample_size(),
        });
        let ctx = PolicyContext {
            config,
            dataset: &ds,
            channels: &channels,
            target,
            weights,
        };
        let points = ctx.run(&all);
        let replicas: Vec<Vec<Result<f64, EstimatorError>>> = (0..config.bootstrap_b as u64)
            .into_par_iter()
            .map(|r| ctx.run(&resample_indices(n, config.seed ^ BOOTSTRAP_SALT, r)))
            .collect();
        let mut estimates = BTreeMap::new();
        for (j, (&e, point)) in config.estimators.iter().zip(points).enumerate() {
            let point = point.map_err(stage_err(S, format!("{e} on {name}")))?;
            let samples: Vec<f64> = replicas.iter().filter_map(|r| r[j].as_ref().ok().copied()).collect();
            estimates.insert(
                e,
                EstimateResult {
                    estimator: e,
                    policy: name.clone(),
                    reward_source: Channels::source_name(config, e),
                    point_estimate: point,
                    bootstrap_failures: replicas.len() - samples.len(),
                    bootstrap_samples: Some(samples),
                },
            );
        }
        evaluations.push(PolicyEvaluation {
            policy: name.clone(),
            true_value: Some(truth),
            estimates,
        });
    }

    let summaries = config
        .estimators
        .iter()
        .filter_map(|&e| summarize(&evaluations, e))
        .collect();
    let mut significance = Vec::new();
    for &e in &config.estimators {
        for a in 0..evaluations.len() {
            for b in a + 1..evaluations.len() {
                let samples = |k: usize| {
                    evaluations[k].estimates[&e]
                        .bootstrap_samples
                        .clone()
                        .unwrap_or_default()
                };
                if let Ok(mut rep) = welch_t_test(&samples(a), &samples(b)) {
                    rep.policy_a = evaluations[a].policy.clone();
                    rep.policy_b = evaluations[b].policy.clone();
                    significance.push(SignificanceRow::new(e, rep));
                }
            }
        }
    }
    let mut report = Report {
        policies: diagnostics,
        evaluations,
        summaries,
        significance,
        provenance: Provenance::default(),
    };
    report.write(&out, config)?;
    Ok(report)
}

/// Simulate, reconstruct and evaluate in sequence.
pub fn benchmark(config: &ExperimentConfig) -> Result<Report, ExperimentError> {
    simulate(config)?;
    reconstruct(config, None)?;
    evaluate(config, None)
}

/// Loads `metrics.json` from an output directory.
pub fn load_report(dir: &Path) -> Result<Report, ExperimentError> {
    Artifacts {
        dir,
        stage: Stage::Report,
    }
    .read_json(METRICS_JSON)
}

fn write_all(out: &Artifacts<'_>, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), ExperimentError> {
    let mut bytes = Vec::new();
    f(&mut bytes).map_err(out.io(&out.path(name)))?;
    out.write(name, &bytes)
}

impl Report {
    fn write(&mut self, out: &Artifacts<'_>, config: &ExperimentConfig) -> Result<(), ExperimentError> {
        write_all(out, ESTIMATES, |w| {
            for e in self.evaluations.iter().flat_map(|ev| ev.estimates.values()) {
                serde_json::to_writer(&mut *w, e)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        for (name, bytes) in self.csv_files() {
            out.write(name, &bytes)?;
        }
        let mut artifacts = BTreeMap::new();
        for name in ARTIFACTS.iter().filter(|&&n| n != METRICS_JSON) {
            let path = out.path(name);
            if path.exists() {
                let bytes = std::fs::read(&path).map_err(out.io(&path))?;
                artifacts.insert(name.to_string(), report::sha256_hex(&bytes));
            }
        }
        self.provenance = Provenance {
            config_sha256: config.sha256(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts,
        };
        out.write_json(METRICS_JSON, self)
    }
}
