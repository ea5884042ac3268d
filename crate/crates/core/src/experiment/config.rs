use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::critical_obs::QFitOptions;
use crate::env_sepsis::{ObservationMask, SimConfig, TransitionParams, DEFAULT_BEHAVIOR_EPSILON};
use crate::estimators::{Estimator, HopeOptions, QBackup, RewardSource, ThresholdMode};
use crate::reward_reconstruction::FitOptions;

pub const SCHEMA_VERSION: u32 = 1;

/// Simulator settings. The episode seed is the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub horizon: usize,
    pub gamma: f64,
    pub transition_params: TransitionParams,
    pub observation_mask: ObservationMask,
}

impl SimSettings {
    pub fn with_seed(&self, seed: u64) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            gamma: self.gamma,
            transition_params: self.transition_params.clone(),
            observation_mask: self.observation_mask.clone(),
            seed,
        }
    }
}

impl Default for SimSettings {
    fn default() -> Self {
        let c = SimConfig::default();
        Self {
            horizon: c.horizon,
            gamma: c.gamma,
            transition_params: c.transition_params,
            observation_mask: c.observation_mask,
        }
    }
}

/// Evaluation policies derived from the simulator's optimal policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Optimal,
    /// Optimal with antibiotics forced on.
    WithAntibiotics,
    /// Optimal with antibiotics forced off.
    WithoutAntibiotics,
    /// The data-generating policy itself.
    Behavior,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: String,
    pub kind: PolicyKind,
}

/// Where importance-weight denominators come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorMode {
    /// Probabilities logged with the data.
    Stored,
    /// Tabular behavior cloning from action frequencies.
    Cloned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSettings {
    /// Exploration mass of the epsilon-soft data-generating policy.
    pub epsilon: f64,
    pub mode: BehaviorMode,
    /// Additive smoothing for [`BehaviorMode::Cloned`].
    pub cloning_smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionSettings {
    pub fit: FitOptions,
    pub q_backup: QBackup,
    pub q_fit: QFitOptions,
    pub behavior_smoothing: f64,
    pub rand_repetitions: usize,
}

/// One benchmark run. Every field is required; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub sim: SimSettings,
    pub n_trajectories: usize,
    pub behavior: BehaviorSettings,
    pub policies: Vec<PolicySpec>,
    pub estimators: Vec<Estimator>,
    /// Overrides of [`Estimator::default_source`].
    pub reward_channels: BTreeMap<Estimator, RewardSource>,
    pub k: usize,
    pub h_mode: ThresholdMode,
    pub reconstruction: ReconstructionSettings,
    pub bootstrap_b: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hope = HopeOptions::default();
        let policy = |name: &str, kind| PolicySpec {
            name: name.to_string(),
            kind,
        };
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            sim: SimSettings::default(),
            n_trajectories: 10_000,
            behavior: BehaviorSettings {
                epsilon: DEFAULT_BEHAVIOR_EPSILON,
                mode: BehaviorMode::Stored,
                cloning_smoothing: 0.0,
            },
            policies: vec![
                policy("optimal", PolicyKind::Optimal),
                policy("with_antibiotics", PolicyKind::WithAntibiotics),
                policy("without_antibiotics", PolicyKind::WithoutAntibiotics),
            ],
            estimators: Estimator::ALL.to_vec(),
            reward_channels: BTreeMap::new(),
            k: hope.k,
            h_mode: hope.threshold,
            reconstruction: ReconstructionSettings {
                fit: hope.fit,
                q_backup: hope.q_backup,
                q_fit: hope.q_fit,
                behavior_smoothing: hope.behavior_smoothing,
                rand_repetitions: hope.rand_repetitions,
            },
            bootstrap_b: 500,
            output_dir: PathBuf::from("hope-out"),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let config: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.sim
            .with_seed(self.seed)
            .validate()
            .map_err(|e| invalid(format!("sim: {e}")))?;
        for (name, value) in [
            ("n_trajectories", self.n_trajectories),
            ("k", self.k),
            ("bootstrap_b", self.bootstrap_b),
            ("reconstruction.rand_repetitions", self.reconstruction.rand_repetitions),
        ] {
            if value == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.k >= self.n_trajectories {
            return Err(invalid(format!(
                "k = {} must be below n_trajectories = {}",
                self.k, self.n_trajectories
            )));
        }
        if !(0.0..=1.0).contains(&self.behavior.epsilon) {
            return Err(invalid(format!(
                "behavior.epsilon must lie in [0, 1], got {}",
                self.behavior.epsilon
            )));
        }
        for (name, value) in [
            ("behavior.cloning_smoothing", self.behavior.cloning_smoothing),
            ("reconstruction.behavior_smoothing", self.reconstruction.behavior_smoothing),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(invalid(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.reconstruction.q_backup == QBackup::Target {
            return Err(invalid(
                "reconstruction.q_backup = target needs one reconstruction per policy; \
                 use behavior or max in experiment runs",
            ));
        }
        if let ThresholdMode::Fixed { h } = self.h_mode {
            if h.is_nan() {
                return Err(invalid("h_mode.h must be a number"));
            }
        }
        if self.policies.is_empty() {
            return Err(invalid("policies must not be empty"));
        }
        let mut names = BTreeSet::new();
        for p in &self.policies {
            if p.name.is_empty() || !names.insert(p.name.as_str()) {
                return Err(invalid(format!("policy names must be unique and nonempty: {:?}", p.name)));
            }
        }
        if self.estimators.is_empty() {
            return Err(invalid("estimators must not be empty"));
        }
        let unique: BTreeSet<_> = self.estimators.iter().collect();
        if unique.len() != self.estimators.len() {
            return Err(invalid("estimators must not repeat"));
        }
        Ok(())
    }

    pub fn hope_options(&self) -> HopeOptions {
        HopeOptions {
            fit: self.reconstruction.fit.clone(),
            k: self.k,
            threshold: self.h_mode,
            q_backup: self.reconstruction.q_backup,
            q_fit: self.reconstruction.q_fit.clone(),
            behavior_smoothing: self.reconstruction.behavior_smoothing,
            rand_repetitions: self.reconstruction.rand_repetitions,
        }
    }

    pub fn reward_source(&self, estimator: Estimator) -> RewardSource {
        self.reward_channels
            .get(&estimator)
            .copied()
            .unwrap_or_else(|| estimator.default_source())
    }

    /// SHA-256 of the compact JSON encoding with `output_dir` blanked, so
    /// the hash identifies the run rather than where it was written.
    pub fn sha256(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.n_trajectories, 10_000);
        assert_eq!(c.bootstrap_b, 500);
        assert_eq!(c.k, 5);
        assert_eq!(c.sim.gamma, 0.99);
    }

    #[test]
    fn missing_field_is_named() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v.as_object_mut().unwrap().remove("bootstrap_b");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("bootstrap_b"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["sim"]["seed"] = 3.into();
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["estimators"] = serde_json::json!(["wis", "dualdice"]);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = [
            ExperimentConfig {
                schema_version: 2,
                ..Default::default()
            },
            ExperimentConfig {
                k: 0,
                ..Default::default()
            },
            ExperimentConfig {
                n_trajectories: 5,
                ..Default::default()
            },
            ExperimentConfig {
                estimators: vec![Estimator::Wis, Estimator::Wis],
                ..Default::default()
            },
            ExperimentConfig {
                policies: vec![],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.sha256(), b.sha256());
        assert_ne!(a.sha256(), c.sha256());
        assert_eq!(a.sha256().len(), 64);
    }
}
