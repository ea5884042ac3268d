use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BOOTSTRAP_CSV, METRICS_CSV, SIGNIFICANCE_CSV, SUMMARY_CSV};
use crate::estimators::Estimator;
use crate::metrics::{absolute_error, EstimatorSummary, PolicyEvaluation, SignificanceReport};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDiagnostics {
    pub policy: String,
    pub true_value: f64,
    pub effective_sample_size: f64,
}

/// A Welch test between two policies' bootstrap replicas. Infinite
/// statistics from constant samples are stored as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignificanceRow {
    pub estimator: Estimator,
    pub policy_a: String,
    pub policy_b: String,
    pub t_statistic: Option<f64>,
    pub degrees_of_freedom: Option<f64>,
    pub p_value: f64,
    pub significant: bool,
    pub degenerate: bool,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl SignificanceRow {
    pub fn new(estimator: Estimator, r: SignificanceReport) -> Self {
        Self {
            estimator,
            policy_a: r.policy_a,
            policy_b: r.policy_b,
            t_statistic: finite(r.t_statistic),
            degrees_of_freedom: finite(r.degrees_of_freedom),
            p_value: r.p_value,
            significant: r.significant,
            degenerate: r.degenerate,
        }
    }
}

/// Config hash, seed and SHA-256 of every artifact present when the
/// report was written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub artifacts: BTreeMap<String, String>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub policies: Vec<PolicyDiagnostics>,
    pub evaluations: Vec<PolicyEvaluation>,
    pub summaries: Vec<EstimatorSummary>,
    pub significance: Vec<SignificanceRow>,
    pub provenance: Provenance,
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

impl Report {
    pub fn summary(&self, estimator: Estimator) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == estimator)
    }

    /// `metrics.csv`, `summary.csv`, `significance.csv` and the plot-ready
    /// `bootstrap.csv`.
    pub fn csv_files(&self) -> Vec<(&'static str, Vec<u8>)> {
        let mut metrics = Vec::new();
        let mut boot = Vec::new();
        for ev in &self.evaluations {
            for r in ev.estimates.values() {
                let samples = r.bootstrap_samples.as_deref().unwrap_or(&[]);
                let (mean, se) = match samples.len() {
                    0 => (None, None),
                    1 => (Some(samples[0]), None),
                    n => {
                        let m = samples.iter().sum::<f64>() / n as f64;
                        let v = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                        (Some(m), Some(v.sqrt()))
                    }
                };
                metrics.push(vec![
                    r.estimator.to_string(),
                    ev.policy.clone(),
                    r.reward_source.to_string(),
                    num(r.point_estimate),
                    opt(ev.true_value),
                    opt(ev.true_value.map(|v| absolute_error(v, r.point_estimate))),
                    opt(mean),
                    opt(se),
                    r.bootstrap_failures.to_string(),
                ]);
                for (i, x) in samples.iter().enumerate() {
                    boot.push(vec![r.estimator.to_string(), ev.policy.clone(), i.to_string(), num(*x)]);
                }
            }
        }
        let summary = self
            .summaries
            .iter()
            .map(|s| {
                vec![
                    s.estimator.to_string(),
                    opt(s.mean_absolute_error),
                    opt(s.regret_at_1.map(|r| r.value)),
                    opt(s.spearman),
                    s.best_policy.clone(),
                ]
            })
            .collect();
        let significance = self
            .significance
            .iter()
            .map(|r| {
                vec![
                    r.estimator.to_string(),
                    r.policy_a.clone(),
                    r.policy_b.clone(),
                    opt(r.t_statistic),
                    opt(r.degrees_of_freedom),
                    num(r.p_value),
                    r.significant.to_string(),
                    r.degenerate.to_string(),
                ]
            })
            .collect();
        vec![
            (
                METRICS_CSV,
                csv_bytes(
                    &[
                        "estimator",
                        "policy",
                        "reward_source",
                        "estimate",
                        "true_value",
                        "abs_error",
                        "bootstrap_mean",
                        "bootstrap_se",
                        "bootstrap_failures",
                    ],
                    metrics,
                ),
            ),
            (
                SUMMARY_CSV,
                csv_bytes(
                    &["estimator", "mean_abs_error", "regret_at_1", "spearman", "best_policy"],
                    summary,
                ),
            ),
            (
                SIGNIFICANCE_CSV,
                csv_bytes(
                    &[
                        "estimator",
                        "policy_a",
                        "policy_b",
                        "t_statistic",
                        "df",
                        "p_value",
                        "significant",
                        "degenerate",
                    ],
                    significance,
                ),
            ),
            (
                BOOTSTRAP_CSV,
                csv_bytes(&["estimator", "policy", "replica", "estimate"], boot),
            ),
        ]
    }
}

/// Result of one `--check` assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The benchmark assertions: HOPE orders the policies exactly like the
/// oracle, and its mean absolute error is below sparse-channel WIS's.
pub fn acceptance_checks(report: &Report) -> Vec<CheckOutcome> {
    let hope = report.summary(Estimator::Hope);
    let wis = report.summary(Estimator::Wis);
    let ranking = match hope.map(|s| s.spearman) {
        Some(Some(rho)) => CheckOutcome {
            name: "hope_spearman".into(),
            passed: rho == 1.0,
            detail: format!("spearman {rho} (need 1)"),
        },
        Some(None) => CheckOutcome {
            name: "hope_spearman".into(),
            passed: false,
            detail: "spearman undefined (missing oracle values or constant ranks)".into(),
        },
        None => CheckOutcome {
            name: "hope_spearman".into(),
            passed: false,
            detail: "hope was not evaluated".into(),
        },
    };
    let mae = match (
        hope.and_then(|s| s.mean_absolute_error),
        wis.and_then(|s| s.mean_absolute_error),
    ) {
        (Some(h), Some(w)) => CheckOutcome {
            name: "hope_mae_below_wis".into(),
            passed: h < w,
            detail: format!("hope {h:.6} vs wis {w:.6}"),
        },
        _ => CheckOutcome {
            name: "hope_mae_below_wis".into(),
            passed: false,
            detail: "needs hope and wis with oracle values".into(),
        },
    };
    vec![ranking, mae]
}

/// Plain-text tables of the summaries and point estimates.
pub fn render_text(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<22}{:>14}{:>10}", "policy", "true value", "ESS");
    for p in &report.policies {
        let _ = writeln!(s, "{:<22}{:>14.6}{:>10.1}", p.policy, p.true_value, p.effective_sample_size);
    }
    let _ = writeln!(s);
    let _ = write!(s, "{:<13}", "estimator");
    for ev in &report.evaluations {
        let _ = write!(s, "{:>22}", ev.policy);
    }
    let _ = writeln!(s, "{:>10}{:>10}{:>10}  best", "MAE", "regret", "spearman");
    for sm in &report.summaries {
        let _ = write!(s, "{:<13}", sm.estimator.name());
        for ev in &report.evaluations {
            match ev.estimates.get(&sm.estimator) {
                Some(r) => {
                    let _ = write!(s, "{:>22.6}", r.point_estimate);
                }
                None => {
                    let _ = write!(s, "{:>22}", "-");
                }
            }
        }
        let cell = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "{:>10}{:>10}{:>10}  {}",
            cell(sm.mean_absolute_error),
            cell(sm.regret_at_1.map(|r| r.value)),
            cell(sm.spearman),
            sm.best_policy
        );
    }
    s
}
