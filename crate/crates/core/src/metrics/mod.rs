//! Validation metrics and significance testing over bootstrap replicas.

mod special;

pub use special::{ln_gamma, regularized_incomplete_beta, student_t_two_sided};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{EstimateResult, Estimator};

/// Significance level of the t-test.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("ranks have zero variance; correlation is undefined")]
    ZeroVariance,
    #[error("non-finite input")]
    NonFinite,
}

pub fn absolute_error(true_value: f64, estimate: f64) -> f64 {
    (true_value - estimate).abs()
}

/// Regret of acting on the estimator's top pick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regret {
    pub value: f64,
    /// False when the best true value is 0 and `value` is the raw gap.
    pub normalized: bool,
    /// Index of the policy ranked first by the estimates.
    pub chosen: usize,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `(max_i V_i - V_{argmax_j V^_j}) / max_i V_i`; ties in the estimates go
/// to the lowest index.
pub fn regret_at_1(true_values: &[f64], estimates: &[f64]) -> Result<Regret, MetricsError> {
    if true_values.len() != estimates.len() {
        return Err(MetricsError::LengthMismatch(true_values.len(), estimates.len()));
    }
    if true_values.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            got: true_values.len(),
        });
    }
    if true_values.iter().chain(estimates).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let best = true_values[argmax(true_values)];
    let chosen = argmax(estimates);
    let gap = best - true_values[chosen];
    Ok(if best == 0.0 {
        Regret {
            value: gap,
            normalized: false,
            chosen,
        }
    } else {
        Regret {
            value: gap / best,
            normalized: true,
            chosen,
        }
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    // Equal spreads (always the case for tie-free rankings of the same
    // length) avoid the square roots, so perfect agreement gives exactly 1.
    let r = if saa == sbb { sab / saa } else { sab / (saa.sqrt() * sbb.sqrt()) };
    Ok(r.clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman_rank(true_values: &[f64], estimates: &[f64]) -> Result<f64, MetricsError> {
    if true_values.len() != estimates.len() {
        return Err(MetricsError::LengthMismatch(true_values.len(), estimates.len()));
    }
    if true_values.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            got: true_values.len(),
        });
    }
    if true_values.iter().chain(estimates).any(|v| v.is_nan()) {
        return Err(MetricsError::NonFinite);
    }
    pearson(&average_ranks(true_values), &average_ranks(estimates))
}

/// Trajectory indices of bootstrap replica `replica`: `n` draws with
/// replacement from the stream `seed ^ replica`.
pub fn resample_indices(n: usize, seed: u64, replica: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ replica);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Replica estimates; failed replicas are dropped and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub samples: Vec<f64>,
    pub failures: usize,
}

impl BootstrapResult {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Sample standard deviation of the replicas.
    pub fn std_error(&self) -> f64 {
        let m = self.mean();
        let n = self.samples.len() as f64;
        (self.samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }
}

/// Evaluates `estimator` on `replicas` resamples of `n` trajectories.
/// Replicas run in parallel; the result does not depend on scheduling.
pub fn bootstrap<E>(
    n: usize,
    replicas: usize,
    seed: u64,
    estimator: impl Fn(&[usize]) -> Result<f64, E> + Sync,
) -> BootstrapResult {
    let results: Vec<Option<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| estimator(&resample_indices(n, seed, r)).ok().filter(|v| v.is_finite()))
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    BootstrapResult {
        samples: results.into_iter().flatten().collect(),
        failures,
    }
}

/// Outcome of a two-sided Welch t-test between two policies' replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub policy_a: String,
    pub policy_b: String,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub significant: bool,
    /// Both samples constant: the means were compared exactly.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of
/// freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceReport, MetricsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(MetricsError::TooFew { need: 2, got: s.len() });
        }
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let report = |t: f64, df: f64, p: f64, degenerate: bool| SignificanceReport {
        policy_a: String::new(),
        policy_b: String::new(),
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        significant: p < ALPHA,
        degenerate,
    };
    if sa + sb == 0.0 {
        return Ok(if ma == mb {
            report(0.0, f64::INFINITY, 1.0, true)
        } else {
            report((ma - mb).signum() * f64::INFINITY, f64::INFINITY, 0.0, true)
        });
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(report(t, df, student_t_two_sided(t, df), false))
}

/// Ground truth and estimates for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub policy: String,
    pub true_value: Option<f64>,
    pub estimates: BTreeMap<Estimator, EstimateResult>,
}

/// Per-estimator summary across policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub mean_absolute_error: Option<f64>,
    pub regret_at_1: Option<Regret>,
    pub spearman: Option<f64>,
    /// Policy with the highest estimate.
    pub best_policy: String,
}

/// Summaries for `estimator`; oracle-based fields are `None` when any true
/// value is missing or the metric is undefined.
pub fn summarize(evaluations: &[PolicyEvaluation], estimator: Estimator) -> Option<EstimatorSummary> {
    let estimates: Vec<f64> = evaluations
        .iter()
        .map(|e| e.estimates.get(&estimator).map(|r| r.point_estimate))
        .collect::<Option<_>>()?;
    let truth: Option<Vec<f64>> = evaluations.iter().map(|e| e.true_value).collect();
    let best_policy = evaluations[argmax(&estimates)].policy.clone();
    let (mae, regret, spearman) = match truth {
        Some(truth) => (
            Some(
                truth
                    .iter()
                    .zip(&estimates)
                    .map(|(v, e)| absolute_error(*v, *e))
                    .sum::<f64>()
                    / truth.len() as f64,
            ),
            regret_at_1(&truth, &estimates).ok(),
            spearman_rank(&truth, &estimates).ok(),
        ),
        None => (None, None, None),
    };
    Some(EstimatorSummary {
        estimator,
        mean_absolute_error: mae,
        regret_at_1: regret,
        spearman,
        best_policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absolute_error_examples() {
        assert_eq!(absolute_error(0.3, 0.3), 0.0);
        assert_eq!(absolute_error(1.0, -1.0), 2.0);
        assert_eq!(absolute_error(-1.0, 1.0), 2.0);
    }

    #[test]
    fn regret_examples() {
        assert_eq!(regret_at_1(&[1.0, 0.5], &[0.9, 0.1]).unwrap().value, 0.0);
        let r = regret_at_1(&[1.0, 0.5], &[0.1, 0.9]).unwrap();
        assert_eq!((r.value, r.chosen, r.normalized), (0.5, 1, true));
        let r = regret_at_1(&[0.0, -0.5], &[0.1, 0.9]).unwrap();
        assert!(!r.normalized && r.value == 0.5);
        assert!(regret_at_1(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman_rank(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman_rank(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman_rank(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricsError::ZeroVariance));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn welch_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.t_statistic, r.p_value), (0.0, 1.0));
        // equal variances 2.5, n = 5: t = -1 / sqrt(1) = -1, df = 8
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = welch_t_test(&a, &b).unwrap();
        assert!((r.t_statistic + 1.0).abs() < 1e-15);
        assert!((r.degrees_of_freedom - 8.0).abs() < 1e-12);
        let swapped = welch_t_test(&b, &a).unwrap();
        assert_eq!(swapped.t_statistic, -r.t_statistic);
        assert_eq!(swapped.p_value, r.p_value);
        // both constant
        let d = welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert!(d.degenerate && d.p_value == 0.0);
        assert!(welch_t_test(&[1.0], &a).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let f = |idx: &[usize]| Ok::<_, ()>(idx.iter().sum::<usize>() as f64);
        let a = bootstrap(50, 8, 7, f);
        assert_eq!(a, bootstrap(50, 8, 7, f));
        assert_ne!(a, bootstrap(50, 8, 8, f));
        let c = bootstrap(50, 5, 7, |_| Ok::<_, ()>(3.0));
        assert!(c.samples.iter().all(|&x| x == 3.0));
        let failing = bootstrap(10, 4, 1, |idx: &[usize]| if idx[0] % 2 == 0 { Ok(1.0) } else { Err(()) });
        assert_eq!(failing.samples.len() + failing.failures, 4);
    }
}
