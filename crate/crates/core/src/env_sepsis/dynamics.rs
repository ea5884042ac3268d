use rand::Rng;
use serde::{Deserialize, Serialize};

use super::state::{
    GlucoseLevel, Level, ObservationMask, Outcome, OxygenLevel, PatientState, Treatments, Vital,
    NUM_ACTIONS,
};
use super::SimError;

/// Probabilities driving the discrete vital-sign dynamics.
///
/// Each vital moves independently given the previous treatments and the
/// action. A vital targeted by an active treatment follows that treatment's
/// effect; one whose treatment was just withdrawn may revert; any other vital
/// fluctuates one level up or down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionParams {
    /// Probability an untreated vital moves one level (split evenly up/down).
    pub fluctuation: f64,
    /// Glucose fluctuation probability for diabetic patients.
    pub diabetic_glucose_fluctuation: f64,
    /// Antibiotics move heart rate and blood pressure one level toward normal.
    pub antibiotics_effect: f64,
    /// Ventilation raises low oxygen to normal.
    pub ventilation_effect: f64,
    /// Vasopressors raise blood pressure one level.
    pub vasopressor_bp_effect: f64,
    /// Vasopressors raise glucose one level (non-diabetic).
    pub vasopressor_glucose_effect: f64,
    /// Vasopressors raise glucose one level (diabetic).
    pub vasopressor_glucose_effect_diabetic: f64,
    /// Probability that withdrawing a treatment reverts its effect.
    pub withdrawal_reversion: f64,
    /// Fraction of diabetic patients at admission.
    pub diabetic_prevalence: f64,
}

impl Default for TransitionParams {
    fn default() -> Self {
        Self {
            fluctuation: 0.1,
            diabetic_glucose_fluctuation: 0.3,
            antibiotics_effect: 0.5,
            ventilation_effect: 0.7,
            vasopressor_bp_effect: 0.7,
            vasopressor_glucose_effect: 0.5,
            vasopressor_glucose_effect_diabetic: 0.9,
            withdrawal_reversion: 0.1,
            diabetic_prevalence: 0.2,
        }
    }
}

impl TransitionParams {
    fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("fluctuation", self.fluctuation),
            ("diabetic_glucose_fluctuation", self.diabetic_glucose_fluctuation),
            ("antibiotics_effect", self.antibiotics_effect),
            ("ventilation_effect", self.ventilation_effect),
            ("vasopressor_bp_effect", self.vasopressor_bp_effect),
            ("vasopressor_glucose_effect", self.vasopressor_glucose_effect),
            (
                "vasopressor_glucose_effect_diabetic",
                self.vasopressor_glucose_effect_diabetic,
            ),
            ("withdrawal_reversion", self.withdrawal_reversion),
            ("diabetic_prevalence", self.diabetic_prevalence),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub transition_params: TransitionParams,
    pub observation_mask: ObservationMask,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            gamma: 0.99,
            transition_params: TransitionParams::default(),
            observation_mask: ObservationMask::hide_diabetic(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon == 0 {
            return Err(SimError::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        for (name, p) in self.transition_params.named() {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!(
                    "{name} must be a probability, got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Distribution over the levels of one vital (unused tail entries are zero).
pub(crate) type LevelDist = [f64; 5];

fn toward_normal(level: u8, vital: Vital) -> u8 {
    let normal = vital.normal();
    match level.cmp(&normal) {
        std::cmp::Ordering::Less => level + 1,
        std::cmp::Ordering::Greater => level - 1,
        std::cmp::Ordering::Equal => level,
    }
}

fn up(level: u8, vital: Vital) -> u8 {
    (level + 1).min(vital.num_levels() - 1)
}

fn down(level: u8) -> u8 {
    level.saturating_sub(1)
}

/// Competing effects: the first one to fire (in order) decides the level.
fn first_firing(current: u8, effects: &[(f64, u8)]) -> LevelDist {
    let mut dist = [0.0; 5];
    let mut remaining = 1.0;
    for &(p, target) in effects {
        dist[target as usize] += remaining * p;
        remaining *= 1.0 - p;
    }
    dist[current as usize] += remaining;
    dist
}

fn fluctuate(current: u8, vital: Vital, p: f64) -> LevelDist {
    let mut dist = [0.0; 5];
    dist[up(current, vital) as usize] += p / 2.0;
    dist[down(current) as usize] += p / 2.0;
    dist[current as usize] += 1.0 - p;
    dist
}

/// Next-level distribution of one vital.
pub(crate) fn vital_distribution(
    state: &PatientState,
    next: Treatments,
    vital: Vital,
    params: &TransitionParams,
) -> LevelDist {
    let prev = state.treatments;
    let cur = state.vital(vital);
    let w = params.withdrawal_reversion;
    let withdrew_abx = prev.antibiotics && !next.antibiotics;
    let withdrew_vaso = prev.vasopressors && !next.vasopressors;
    let withdrew_vent = prev.ventilation && !next.ventilation;
    let normal_to = |target: u8| if cur == vital.normal() { target } else { cur };

    match vital {
        Vital::HeartRate => {
            if next.antibiotics {
                first_firing(cur, &[(params.antibiotics_effect, toward_normal(cur, vital))])
            } else if withdrew_abx {
                first_firing(cur, &[(w, normal_to(Level::High.ordinal()))])
            } else {
                fluctuate(cur, vital, params.fluctuation)
            }
        }
        Vital::BloodPressure => {
            if next.vasopressors || next.antibiotics {
                let mut effects = Vec::with_capacity(2);
                if next.vasopressors {
                    effects.push((params.vasopressor_bp_effect, up(cur, vital)));
                }
                if next.antibiotics {
                    effects.push((params.antibiotics_effect, toward_normal(cur, vital)));
                }
                first_firing(cur, &effects)
            } else if withdrew_vaso || withdrew_abx {
                let mut effects = Vec::with_capacity(2);
                if withdrew_vaso {
                    effects.push((w, down(cur)));
                }
                if withdrew_abx {
                    effects.push((w, normal_to(Level::High.ordinal())));
                }
                first_firing(cur, &effects)
            } else {
                fluctuate(cur, vital, params.fluctuation)
            }
        }
        Vital::Oxygen => {
            if next.ventilation {
                first_firing(cur, &[(params.ventilation_effect, toward_normal(cur, vital))])
            } else if withdrew_vent {
                first_firing(cur, &[(w, normal_to(OxygenLevel::Low.ordinal()))])
            } else {
                fluctuate(cur, vital, params.fluctuation)
            }
        }
        Vital::Glucose => {
            if next.vasopressors {
                let p = if state.diabetic {
                    params.vasopressor_glucose_effect_diabetic
                } else {
                    params.vasopressor_glucose_effect
                };
                first_firing(cur, &[(p, up(cur, vital))])
            } else {
                let p = if state.diabetic {
                    params.diabetic_glucose_fluctuation
                } else {
                    params.fluctuation
                };
                fluctuate(cur, vital, p)
            }
        }
    }
}

/// Samples a level from `dist` by inverse CDF on `u` in `[0, 1)`.
fn sample_level(dist: &LevelDist, levels: u8, u: f64) -> u8 {
    let mut acc = 0.0;
    let mut last = 0;
    for (level, &p) in dist.iter().enumerate().take(levels as usize) {
        if p > 0.0 {
            last = level as u8;
            acc += p;
            if u < acc {
                return level as u8;
            }
        }
    }
    last
}

/// Result of one environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub next_state: PatientState,
    pub reward: f64,
    pub outcome: Outcome,
    pub done: bool,
}

/// Applies `action` to a non-terminal `state`. `t` is the 1-based index of
/// this step; the episode is done on a terminal outcome or at the horizon.
///
/// Consumes exactly four uniform draws from `rng`, one per vital.
pub fn step<R: Rng + ?Sized>(
    state: &PatientState,
    action: usize,
    t: usize,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Step, SimError> {
    if action >= NUM_ACTIONS {
        return Err(SimError::InvalidAction(action));
    }
    if state.terminal_check().is_terminal() {
        return Err(SimError::TerminalState(*state));
    }
    let treatments = Treatments::from_action(action);
    let mut next = *state;
    next.treatments = treatments;
    for vital in Vital::ALL {
        let dist = vital_distribution(state, treatments, vital, &config.transition_params);
        let u: f64 = rng.gen();
        next.set_vital(vital, sample_level(&dist, vital.num_levels(), u));
    }
    let outcome = next.terminal_check();
    Ok(Step {
        next_state: next,
        reward: outcome.reward(),
        outcome,
        done: outcome.is_terminal() || t >= config.horizon,
    })
}

/// Exact next-state distribution, as `(state, probability)` pairs with
/// nonzero probability in encoding order.
pub fn transition_distribution(
    state: &PatientState,
    action: usize,
    params: &TransitionParams,
) -> Vec<(PatientState, f64)> {
    let treatments = Treatments::from_action(action);
    let dists: Vec<LevelDist> = Vital::ALL
        .iter()
        .map(|&v| vital_distribution(state, treatments, v, params))
        .collect();
    let mut out = Vec::new();
    for hr in 0..Level::COUNT {
        let p_hr = dists[0][hr];
        if p_hr == 0.0 {
            continue;
        }
        for bp in 0..Level::COUNT {
            let p_bp = p_hr * dists[1][bp];
            if p_bp == 0.0 {
                continue;
            }
            for o2 in 0..OxygenLevel::COUNT {
                let p_o2 = p_bp * dists[2][o2];
                if p_o2 == 0.0 {
                    continue;
                }
                for glu in 0..GlucoseLevel::COUNT {
                    let p = p_o2 * dists[3][glu];
                    if p == 0.0 {
                        continue;
                    }
                    let mut next = *state;
                    next.treatments = treatments;
                    next.set_vital(Vital::HeartRate, hr as u8);
                    next.set_vital(Vital::BloodPressure, bp as u8);
                    next.set_vital(Vital::Oxygen, o2 as u8);
                    next.set_vital(Vital::Glucose, glu as u8);
                    out.push((next, p));
                }
            }
        }
    }
    out
}

/// Admission distribution: diabetic with the configured prevalence, vitals
/// uniform over their levels, no treatment, conditioned on being non-terminal.
pub fn initial_distribution(params: &TransitionParams) -> Vec<(PatientState, f64)> {
    let mut out: Vec<(PatientState, f64)> = PatientState::all()
        .filter(|s| !s.treatments.any() && !s.terminal_check().is_terminal())
        .map(|s| {
            let p = if s.diabetic {
                params.diabetic_prevalence
            } else {
                1.0 - params.diabetic_prevalence
            };
            (s, p)
        })
        .filter(|&(_, p)| p > 0.0)
        .collect();
    let total: f64 = out.iter().map(|x| x.1).sum();
    for x in &mut out {
        x.1 /= total;
    }
    out
}

/// Draws an admission state by rejection sampling; five draws per attempt.
pub fn sample_initial_state<R: Rng + ?Sized>(params: &TransitionParams, rng: &mut R) -> PatientState {
    loop {
        let diabetic = rng.gen::<f64>() < params.diabetic_prevalence;
        let mut s = PatientState::healthy(diabetic);
        for vital in Vital::ALL {
            let level = rng.gen_range(0..vital.num_levels());
            s.set_vital(vital, level);
        }
        if !s.terminal_check().is_terminal() {
            return s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frozen() -> SimConfig {
        SimConfig {
            transition_params: TransitionParams {
                fluctuation: 0.0,
                diabetic_glucose_fluctuation: 0.0,
                antibiotics_effect: 0.0,
                ventilation_effect: 0.0,
                vasopressor_bp_effect: 0.0,
                vasopressor_glucose_effect: 0.0,
                vasopressor_glucose_effect_diabetic: 0.0,
                withdrawal_reversion: 0.0,
                diabetic_prevalence: 0.2,
            },
            ..SimConfig::default()
        }
    }

    #[test]
    fn vital_distributions_are_normalized() {
        let params = TransitionParams::default();
        for s in PatientState::all() {
            for a in 0..NUM_ACTIONS {
                for v in Vital::ALL {
                    let d = vital_distribution(&s, Treatments::from_action(a), v, &params);
                    let total: f64 = d.iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                    assert!(d[v.num_levels() as usize..].iter().all(|&p| p == 0.0));
                }
                let total: f64 = transition_distribution(&s, a, &params).iter().map(|x| x.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_dynamics_keep_state() {
        let cfg = frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = PatientState::healthy(false);
        s.heart_rate = Level::High;
        s.treatments.antibiotics = true;
        let st = step(&s, s.treatments.bits(), 1, &cfg, &mut rng).unwrap();
        assert_eq!(st.next_state, s);
        assert_eq!(st.reward, 0.0);
        assert!(!st.done);
    }

    #[test]
    fn terminal_rewards() {
        let mut cfg = frozen();
        cfg.transition_params.antibiotics_effect = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = PatientState::healthy(false);
        s.heart_rate = Level::High;
        // antibiotics fix heart rate, but discharge needs treatments off
        let st = step(&s, Treatments::ANTIBIOTICS, 1, &cfg, &mut rng).unwrap();
        assert_eq!(st.outcome, Outcome::None);
        let st = step(&st.next_state, 0, 2, &cfg, &mut rng).unwrap();
        assert_eq!(st.outcome, Outcome::Discharge);
        assert_eq!(st.reward, 1.0);
        assert!(st.done);

        let mut cfg = frozen();
        cfg.transition_params.fluctuation = 1.0;
        let mut s = PatientState::healthy(false);
        s.heart_rate = Level::High;
        s.blood_pressure = Level::Low;
        s.glucose = GlucoseLevel::VeryHigh;
        s.oxygen = OxygenLevel::Low;
        assert_eq!(s.terminal_check(), Outcome::Death);
        assert!(matches!(step(&s, 0, 1, &cfg, &mut rng), Err(SimError::TerminalState(_))));
        s.oxygen = OxygenLevel::Normal;
        s.glucose = GlucoseLevel::Normal;
        // two abnormal vitals; an upward glucose push with no way back kills
        cfg.transition_params.fluctuation = 0.0;
        cfg.transition_params.vasopressor_glucose_effect = 1.0;
        cfg.transition_params.vasopressor_bp_effect = 0.0;
        let st = step(&s, Treatments::VASOPRESSORS, 1, &cfg, &mut rng).unwrap();
        assert_eq!(st.outcome, Outcome::Death);
        assert_eq!(st.reward, -1.0);
    }

    #[test]
    fn horizon_ends_episode() {
        let cfg = frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = PatientState::healthy(false);
        s.oxygen = OxygenLevel::Low;
        assert!(!step(&s, 0, 4, &cfg, &mut rng).unwrap().done);
        assert!(step(&s, 0, 5, &cfg, &mut rng).unwrap().done);
    }

    #[test]
    fn initial_distribution_excludes_terminal_states() {
        let init = initial_distribution(&TransitionParams::default());
        let total: f64 = init.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(init.iter().all(|(s, _)| !s.terminal_check().is_terminal()));
        assert!(init.iter().all(|(s, _)| !s.treatments.any()));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        let mut bad = SimConfig::default();
        bad.transition_params.fluctuation = 1.5;
        assert!(bad.validate().is_err());
        let bad = SimConfig {
            horizon: 0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
