use hope_core::critical_obs::{QFitOptions, QTable};
use hope_core::estimators::*;
use hope_core::neighbors::DiscreteMetric;
use hope_core::tabular_mdp::TabularMdp;
use hope_core::trajectory::discounted_sum;
use hope_core::{Dataset, Policy, StepRewards, Trajectory, Transition};
use proptest::prelude::*;

fn traj(steps: &[(usize, usize)], rewards: &[f64], probs: Option<Vec<f64>>, gamma: f64) -> Trajectory {
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
        aggregated_reward: discounted_sum(rewards, gamma),
        ground_truth_rewards: Some(rewards.to_vec()),
        behavior_probs: probs,
    }
}

fn behavior() -> Policy {
    Policy::from_table(5, 2, vec![0.6, 0.4, 0.3, 0.7, 0.5, 0.5, 0.8, 0.2, 0.1, 0.9]).unwrap()
}

fn target() -> Policy {
    Policy::from_table(5, 2, vec![0.9, 0.1, 0.6, 0.4, 0.2, 0.8, 0.5, 0.5, 0.3, 0.7]).unwrap()
}

fn fixture_dataset(n: usize, seed: u64) -> Dataset {
    TabularMdp::five_state().dataset(&behavior(), n, seed).unwrap()
}

fn data<'a>(ds: &'a Dataset, w: &'a ImportanceWeights, r: &'a StepRewards) -> OpeData<'a> {
    OpeData {
        dataset: ds,
        weights: w,
        rewards: r,
        gamma: ds.gamma,
    }
}

#[test]
fn importance_weight_examples() {
    let pi = Policy::from_table(1, 2, vec![1.0, 0.0]).unwrap();
    let beta = Policy::uniform(1, 2);
    let t = traj(&[(0, 0)], &[0.0], Some(vec![0.5]), 1.0);
    assert_eq!(importance_weight(&t, &pi, Behavior::Stored).unwrap(), 2.0);
    assert_eq!(importance_weight(&t, &pi, Behavior::Policy(&beta)).unwrap(), 2.0);
    assert_eq!(importance_weight(&t, &beta, Behavior::Policy(&beta)).unwrap(), 1.0);
    let off = traj(&[(0, 1)], &[0.0], None, 1.0);
    assert_eq!(importance_weight(&off, &pi, Behavior::Policy(&beta)).unwrap(), 0.0);
    assert_eq!(
        importance_weight(&off, &pi, Behavior::Stored),
        Err(EstimatorError::MissingBehaviorProbs(0))
    );
    let greedy = Policy::from_table(1, 2, vec![0.0, 1.0]).unwrap();
    assert_eq!(
        importance_weight(&off, &beta, Behavior::Policy(&pi)),
        Err(EstimatorError::SupportViolation {
            trajectory: 0,
            step: 0,
            observation: 0,
            action: 1
        })
    );
    // long products stay finite in log space
    let long = traj(&vec![(0, 0); 2000], &vec![0.0; 2000], None, 1.0);
    let near = Policy::from_table(1, 2, vec![0.4, 0.6]).unwrap();
    let w = importance_weight(&long, &near, Behavior::Policy(&greedy.epsilon_soft(1.0)));
    assert!(w.unwrap() > 0.0);
}

#[test]
fn self_evaluation_identities() {
    let ds = fixture_dataset(3000, 5);
    let beta = behavior();
    let w = ImportanceWeights::compute(&ds, &beta, Behavior::Stored).unwrap();
    assert!(w.weights().iter().all(|&x| x == 1.0));
    let all = full_sample(ds.len());
    for channel in [StepRewards::sparse(&ds), StepRewards::ground_truth(&ds).unwrap()] {
        let d = data(&ds, &w, &channel);
        let returns = channel.returns(ds.gamma);
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        assert_eq!(is_estimate(&d, &all).unwrap(), mean);
        assert_eq!(wis_estimate(&d, &all).unwrap(), mean);
        assert_eq!(phwis_estimate(&d, &all).unwrap(), mean);
    }
}

#[test]
fn terminal_only_rewards_make_pdis_equal_is() {
    let ds = fixture_dataset(2000, 9);
    let w = ImportanceWeights::compute(&ds, &target(), Behavior::Stored).unwrap();
    let sparse = StepRewards::sparse(&ds);
    let d = data(&ds, &w, &sparse);
    let all = full_sample(ds.len());
    assert_eq!(pdis_estimate(&d, &all).unwrap(), is_estimate(&d, &all).unwrap());
}

#[test]
fn zero_q_makes_dr_equal_pdis() {
    let ds = fixture_dataset(2000, 10);
    let pi = target();
    let w = ImportanceWeights::compute(&ds, &pi, Behavior::Stored).unwrap();
    let truth = StepRewards::ground_truth(&ds).unwrap();
    let d = data(&ds, &w, &truth);
    let all = full_sample(ds.len());
    let zero = QTable::zeros(5, 2);
    assert_eq!(dr_estimate(&d, &pi, &zero, &all).unwrap(), pdis_estimate(&d, &all).unwrap());
}

/// Recursive DR: `v = V(o_t) + rho_t (r_t + gamma v_next - Q(o_t, a_t))`.
fn dr_recursive(ds: &Dataset, pi: &Policy, beta: &Policy, q: &QTable, rewards: &StepRewards) -> f64 {
    let mut total = 0.0;
    for (i, t) in ds.trajectories.iter().enumerate() {
        let mut v = 0.0;
        for (s, tr) in t.transitions.iter().enumerate().rev() {
            let rho = pi.prob(tr.observation, tr.action) / beta.prob(tr.observation, tr.action);
            v = q.expected_value(pi, tr.observation)
                + rho * (rewards.get(i, s) + ds.gamma * v - q.get(tr.observation, tr.action));
        }
        total += v;
    }
    total / ds.len() as f64
}

#[test]
fn dr_matches_recursive_definition() {
    let ds = fixture_dataset(500, 11);
    let (pi, beta) = (target(), behavior());
    let w = ImportanceWeights::compute(&ds, &pi, Behavior::Policy(&beta)).unwrap();
    let truth = StepRewards::ground_truth(&ds).unwrap();
    let (_, q) = fqe_estimate(&ds, &pi, &truth, ds.gamma, &full_sample(ds.len()), &QFitOptions::default())
        .unwrap();
    let d = data(&ds, &w, &truth);
    let ours = dr_estimate(&d, &pi, &q, &full_sample(ds.len())).unwrap();
    let oracle = dr_recursive(&ds, &pi, &beta, &q, &truth);
    assert!((ours - oracle).abs() < 1e-12, "{ours} vs {oracle}");
}

#[test]
fn perfect_q_and_on_policy_data_give_mean_return() {
    // deterministic policy: V(o) = Q(o, pi(o)) on every visited pair
    let pi = Policy::deterministic(2, &[0, 1, 1, 0, 1]).unwrap();
    let ds = TabularMdp::five_state().dataset(&pi, 400, 2).unwrap();
    let w = ImportanceWeights::compute(&ds, &pi, Behavior::Stored).unwrap();
    let truth = StepRewards::ground_truth(&ds).unwrap();
    let all = full_sample(ds.len());
    let (_, q) = fqe_estimate(&ds, &pi, &truth, ds.gamma, &all, &QFitOptions::default()).unwrap();
    let d = data(&ds, &w, &truth);
    let mean = truth.returns(ds.gamma).iter().sum::<f64>() / ds.len() as f64;
    assert!((dr_estimate(&d, &pi, &q, &all).unwrap() - mean).abs() < 1e-12);
    assert!((wdr_estimate(&d, &pi, &q, &all).unwrap() - mean).abs() < 1e-12);
}

#[test]
fn wdr_equals_dr_with_unit_weights() {
    let ds = fixture_dataset(800, 12);
    let beta = behavior();
    let w = ImportanceWeights::compute(&ds, &beta, Behavior::Stored).unwrap();
    let truth = StepRewards::ground_truth(&ds).unwrap();
    let all = full_sample(ds.len());
    let (_, q) = fqe_estimate(&ds, &target(), &truth, ds.gamma, &all, &QFitOptions::default()).unwrap();
    let d = data(&ds, &w, &truth);
    let (dr, wdr) = (
        dr_estimate(&d, &beta, &q, &all).unwrap(),
        wdr_estimate(&d, &beta, &q, &all).unwrap(),
    );
    assert!((dr - wdr).abs() < 1e-12, "{dr} vs {wdr}");
}

#[test]
fn fqe_examples() {
    // gamma = 0: mean over initial steps of sum_a pi(a|o1) rbar(o1, a)
    let t = |a: usize, r: f64| traj(&[(0, a), (1, 0)], &[r, 5.0], None, 0.0);
    let ds = Dataset::new(vec![t(0, 1.0), t(0, 3.0), t(1, -1.0)], 2, 2, 0.0).unwrap();
    let pi = Policy::from_table(2, 2, vec![0.25, 0.75, 1.0, 0.0]).unwrap();
    let truth = StepRewards::ground_truth(&ds).unwrap();
    let all = full_sample(3);
    let (v, _) = fqe_estimate(&ds, &pi, &truth, 0.0, &all, &QFitOptions::default()).unwrap();
    assert!((v - (0.25 * 2.0 + 0.75 * -1.0)).abs() < 1e-12);

    // two-state chain 0 -> 1 -> end, every pair covered: matches the exact value
    let g = 0.9;
    let r = [[1.0, -0.5], [2.0, 0.25]];
    let mut trajs = Vec::new();
    for a in 0..2 {
        for b in 0..2 {
            trajs.push(traj(&[(0, a), (1, b)], &[r[0][a], r[1][b]], None, g));
        }
    }
    let ds = Dataset::new(trajs, 2, 2, g).unwrap();
    let truth = StepRewards::ground_truth(&ds).unwrap();
    let pi = Policy::from_table(2, 2, vec![0.3, 0.7, 0.6, 0.4]).unwrap();
    let (v, _) = fqe_estimate(&ds, &pi, &truth, g, &full_sample(4), &QFitOptions::default()).unwrap();
    let v1 = 0.6 * r[1][0] + 0.4 * r[1][1];
    let exact = 0.3 * (r[0][0] + g * v1) + 0.7 * (r[0][1] + g * v1);
    assert!((v - exact).abs() < 1e-9);

    // deterministic target concentrates the backup on one action
    let det = Policy::deterministic(2, &[1, 0]).unwrap();
    let (v, _) = fqe_estimate(&ds, &det, &truth, g, &full_sample(4), &QFitOptions::default()).unwrap();
    assert!((v - (r[0][1] + g * r[1][0])).abs() < 1e-9);
}

#[test]
fn phwis_two_length_fixture() {
    let g = 1.0;
    let ds = Dataset::new(
        vec![
            traj(&[(0, 0)], &[1.0], Some(vec![0.5]), g),
            traj(&[(0, 1)], &[0.0], Some(vec![0.5]), g),
            traj(&[(0, 0), (0, 0)], &[0.0, 2.0], Some(vec![0.5, 0.5]), g),
        ],
        1,
        2,
        g,
    )
    .unwrap();
    let pi = Policy::from_table(1, 2, vec![0.75, 0.25]).unwrap();
    let w = ImportanceWeights::compute(&ds, &pi, Behavior::Stored).unwrap();
    let sparse = StepRewards::sparse(&ds);
    let d = data(&ds, &w, &sparse);
    // length 1: weights 1.5, 0.5 -> (1.5 * 1) / 2 = 0.75 ; length 2: 2.0
    let expected = 2.0 / 3.0 * 0.75 + 1.0 / 3.0 * 2.0;
    assert!((phwis_estimate(&d, &full_sample(3)).unwrap() - expected).abs() < 1e-14);
    // single length group: PHWIS = WIS
    let same = [0usize, 1];
    assert_eq!(phwis_estimate(&d, &same).unwrap(), wis_estimate(&d, &same).unwrap());
}

#[test]
fn hope_weighted_mean_fixture() {
    let g = 0.5;
    // weights 2, 1, 1 ; reconstructed returns 1 + 0.5 * 1 = 1.5, 0, -1
    let ds = Dataset::new(
        vec![
            traj(&[(0, 0), (0, 0)], &[0.0, 0.0], None, g),
            traj(&[(0, 1)], &[0.0], None, g),
            traj(&[(1, 0)], &[0.0], None, g),
        ],
        2,
        2,
        g,
    )
    .unwrap();
    let w = ImportanceWeights::from_cumulative(vec![vec![1.5, 2.0], vec![1.0], vec![1.0]]);
    let rhat = StepRewards::from_rows(vec![vec![1.0, 1.0], vec![0.0], vec![-1.0]]);
    let d = data(&ds, &w, &rhat);
    let expected = (2.0 * 1.5 + 0.0 - 1.0) / 4.0;
    assert_eq!(wis_estimate(&d, &full_sample(3)).unwrap(), expected);
    assert_eq!(wis_estimate(&d, &[0]).unwrap(), 1.5);
    let zero = ImportanceWeights::from_cumulative(vec![vec![0.0, 0.0], vec![0.0], vec![0.0]]);
    assert_eq!(
        wis_estimate(&data(&ds, &zero, &rhat), &full_sample(3)),
        Err(EstimatorError::DegenerateWeights)
    );
}

#[test]
fn hope_variant_identities() {
    let ds = fixture_dataset(40, 21);
    let truth = StepRewards::ground_truth(&ds).unwrap();
    let all_critical = HopeOptions {
        k: 3,
        ..HopeOptions::default()
    };
    let hope = reconstruct_rewards(&ds, truth.clone(), &all_critical, &DiscreteMetric, None).unwrap();
    let soft = soft_hope_channel(&ds, &truth, &all_critical, &DiscreteMetric).unwrap();
    assert_eq!(hope.rhat, soft);

    // Sparse-HOPE with an empty critical set is WIS on sparse rewards
    let none = HopeOptions {
        threshold: ThresholdMode::Fixed { h: f64::INFINITY },
        ..all_critical.clone()
    };
    let sparse = sparse_hope_channel(&ds, &none, &DiscreteMetric, None).unwrap();
    assert!(sparse.critical.is_empty());
    assert_eq!(sparse.rhat, StepRewards::sparse(&ds));

    // Rand-HOPE with K = N - 1 has nothing left to randomize
    let full = HopeOptions {
        k: ds.len() - 1,
        rand_repetitions: 3,
        ..HopeOptions::default()
    };
    let soft_full = soft_hope_channel(&ds, &truth, &full, &DiscreteMetric).unwrap();
    let critical = reconstruct_rewards(&ds, truth.clone(), &full, &DiscreteMetric, None)
        .unwrap()
        .critical;
    let rand = rand_hope_channel(&ds, &truth, &critical, &full, &DiscreteMetric, 4).unwrap();
    for (a, b) in rand.rows().iter().flatten().zip(soft_full.rows().iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wis_family_invariants(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let ds = fixture_dataset(60, seed);
        let w = ImportanceWeights::compute(&ds, &target(), Behavior::Stored).unwrap();
        let truth = StepRewards::ground_truth(&ds).unwrap();
        let all = full_sample(ds.len());
        let d = data(&ds, &w, &truth);
        let scaled = w.scaled(scale);
        let ds_scaled = data(&ds, &scaled, &truth);
        let returns = truth.returns(ds.gamma);
        let (lo, hi) = returns.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
        let wis = wis_estimate(&d, &all).unwrap();
        prop_assert!(wis >= lo - 1e-12 && wis <= hi + 1e-12);
        prop_assert!((wis - wis_estimate(&ds_scaled, &all).unwrap()).abs() < 1e-12);
        let phwis = phwis_estimate(&d, &all).unwrap();
        prop_assert!((phwis - phwis_estimate(&ds_scaled, &all).unwrap()).abs() < 1e-12);
        // rewards lie in [-1, 1], so returns lie in [-G, G] with G = sum gamma^(t-1)
        let g: f64 = (0..ds.max_len()).map(|t| ds.gamma.powi(t as i32)).sum();
        let norm = normalized_return(wis, -g, g).unwrap();
        prop_assert!((0.0..=1.0).contains(&norm));
    }
}
