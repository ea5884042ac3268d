use serde::{Deserialize, Serialize};

/// Number of distinct patient states (and observation ids).
pub const NUM_STATES: usize = 2 * 3 * 3 * 2 * 5 * 8;
/// Number of treatment combinations.
pub const NUM_ACTIONS: usize = 8;

macro_rules! ordinal_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident = $ord:expr),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const COUNT: usize = [$($ord),+].len();

            pub fn ordinal(self) -> u8 {
                match self { $(Self::$variant => $ord),+ }
            }

            pub fn from_ordinal(ord: u8) -> Option<Self> {
                match ord { $($ord => Some(Self::$variant),)+ _ => None }
            }
        }
    };
}

ordinal_enum!(
    /// Heart rate and blood pressure levels.
    Level { Low = 0, Normal = 1, High = 2 }
);
ordinal_enum!(OxygenLevel { Low = 0, Normal = 1 });
ordinal_enum!(GlucoseLevel {
    VeryLow = 0,
    Low = 1,
    Normal = 2,
    High = 3,
    VeryHigh = 4,
});

/// Active treatments; an action id is the bit pattern
/// `antibiotics | vasopressors << 1 | ventilation << 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Treatments {
    pub antibiotics: bool,
    pub vasopressors: bool,
    pub ventilation: bool,
}

impl Treatments {
    pub const ANTIBIOTICS: usize = 1;
    pub const VASOPRESSORS: usize = 2;
    pub const VENTILATION: usize = 4;

    pub fn from_action(action: usize) -> Self {
        Self {
            antibiotics: action & Self::ANTIBIOTICS != 0,
            vasopressors: action & Self::VASOPRESSORS != 0,
            ventilation: action & Self::VENTILATION != 0,
        }
    }

    pub fn bits(self) -> usize {
        usize::from(self.antibiotics)
            | usize::from(self.vasopressors) << 1
            | usize::from(self.ventilation) << 2
    }

    pub fn any(self) -> bool {
        self.bits() != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vital {
    HeartRate,
    BloodPressure,
    Oxygen,
    Glucose,
}

impl Vital {
    pub const ALL: [Vital; 4] = [
        Vital::HeartRate,
        Vital::BloodPressure,
        Vital::Oxygen,
        Vital::Glucose,
    ];

    pub fn num_levels(self) -> u8 {
        match self {
            Vital::HeartRate | Vital::BloodPressure => Level::COUNT as u8,
            Vital::Oxygen => OxygenLevel::COUNT as u8,
            Vital::Glucose => GlucoseLevel::COUNT as u8,
        }
    }

    pub fn normal(self) -> u8 {
        match self {
            Vital::HeartRate | Vital::BloodPressure => Level::Normal.ordinal(),
            Vital::Oxygen => OxygenLevel::Normal.ordinal(),
            Vital::Glucose => GlucoseLevel::Normal.ordinal(),
        }
    }
}

/// A state component that an observation mask may hide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateComponent {
    Diabetic,
    HeartRate,
    BloodPressure,
    Oxygen,
    Glucose,
    Treatments,
}

/// The hidden patient state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatientState {
    pub diabetic: bool,
    pub heart_rate: Level,
    pub blood_pressure: Level,
    pub oxygen: OxygenLevel,
    pub glucose: GlucoseLevel,
    pub treatments: Treatments,
}

/// How an episode ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Discharge,
    Death,
    None,
}

impl Outcome {
    pub fn reward(self) -> f64 {
        match self {
            Outcome::Discharge => 1.0,
            Outcome::Death => -1.0,
            Outcome::None => 0.0,
        }
    }

    pub fn is_terminal(self) -> bool {
        self != Outcome::None
    }
}

impl PatientState {
    /// All vitals normal, no treatment.
    pub fn healthy(diabetic: bool) -> Self {
        Self {
            diabetic,
            heart_rate: Level::Normal,
            blood_pressure: Level::Normal,
            oxygen: OxygenLevel::Normal,
            glucose: GlucoseLevel::Normal,
            treatments: Treatments::default(),
        }
    }

    pub fn vital(&self, vital: Vital) -> u8 {
        match vital {
            Vital::HeartRate => self.heart_rate.ordinal(),
            Vital::BloodPressure => self.blood_pressure.ordinal(),
            Vital::Oxygen => self.oxygen.ordinal(),
            Vital::Glucose => self.glucose.ordinal(),
        }
    }

    /// Sets a vital from its ordinal. Panics on an out-of-range level.
    pub fn set_vital(&mut self, vital: Vital, level: u8) {
        fn checked<T>(value: Option<T>, vital: Vital, level: u8) -> T {
            value.unwrap_or_else(|| panic!("level {level} out of range for {vital:?}"))
        }
        match vital {
            Vital::HeartRate => self.heart_rate = checked(Level::from_ordinal(level), vital, level),
            Vital::BloodPressure => {
                self.blood_pressure = checked(Level::from_ordinal(level), vital, level)
            }
            Vital::Oxygen => self.oxygen = checked(OxygenLevel::from_ordinal(level), vital, level),
            Vital::Glucose => {
                self.glucose = checked(GlucoseLevel::from_ordinal(level), vital, level)
            }
        }
    }

    /// Number of vitals outside the normal range, in `[0, 4]`.
    pub fn abnormal_count(&self) -> usize {
        Vital::ALL
            .iter()
            .filter(|&&v| self.vital(v) != v.normal())
            .count()
    }

    /// Discharge when every vital is normal and no treatment is active;
    /// death when three or more vitals are abnormal.
    pub fn terminal_check(&self) -> Outcome {
        let abnormal = self.abnormal_count();
        if abnormal >= 3 {
            Outcome::Death
        } else if abnormal == 0 && !self.treatments.any() {
            Outcome::Discharge
        } else {
            Outcome::None
        }
    }

    /// Mixed-radix index in `[0, NUM_STATES)`.
    pub fn encode(&self) -> usize {
        let mut id = usize::from(self.diabetic);
        id = id * 3 + self.heart_rate.ordinal() as usize;
        id = id * 3 + self.blood_pressure.ordinal() as usize;
        id = id * 2 + self.oxygen.ordinal() as usize;
        id = id * 5 + self.glucose.ordinal() as usize;
        id * 8 + self.treatments.bits()
    }

    pub fn decode(id: usize) -> Option<Self> {
        if id >= NUM_STATES {
            return None;
        }
        let treatments = Treatments::from_action(id % 8);
        let mut rest = id / 8;
        let glucose = GlucoseLevel::from_ordinal((rest % 5) as u8)?;
        rest /= 5;
        let oxygen = OxygenLevel::from_ordinal((rest % 2) as u8)?;
        rest /= 2;
        let blood_pressure = Level::from_ordinal((rest % 3) as u8)?;
        rest /= 3;
        let heart_rate = Level::from_ordinal((rest % 3) as u8)?;
        rest /= 3;
        Some(Self {
            diabetic: rest == 1,
            heart_rate,
            blood_pressure,
            oxygen,
            glucose,
            treatments,
        })
    }

    /// Ordinal feature vector: diabetic, four vital levels, three treatment flags.
    pub fn features(&self) -> [f64; 8] {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        [
            flag(self.diabetic),
            self.heart_rate.ordinal() as f64,
            self.blood_pressure.ordinal() as f64,
            self.oxygen.ordinal() as f64,
            self.glucose.ordinal() as f64,
            flag(self.treatments.antibiotics),
            flag(self.treatments.vasopressors),
            flag(self.treatments.ventilation),
        ]
    }

    pub fn all() -> impl Iterator<Item = PatientState> {
        (0..NUM_STATES).map(|id| Self::decode(id).expect("id in range"))
    }
}

/// Components hidden from emitted observations. Hidden components collapse
/// to a canonical value (non-diabetic, normal vital, no treatment) before
/// encoding, so observation ids live in the same `[0, NUM_STATES)` space.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObservationMask {
    hidden: Vec<StateComponent>,
}

impl ObservationMask {
    pub fn new(mut hidden: Vec<StateComponent>) -> Self {
        hidden.sort();
        hidden.dedup();
        Self { hidden }
    }

    /// Hides only the diabetic flag.
    pub fn hide_diabetic() -> Self {
        Self::new(vec![StateComponent::Diabetic])
    }

    pub fn hides(&self, component: StateComponent) -> bool {
        self.hidden.contains(&component)
    }

    pub fn hidden(&self) -> &[StateComponent] {
        &self.hidden
    }

    pub fn apply(&self, state: &PatientState) -> PatientState {
        let mut out = *state;
        for c in &self.hidden {
            match c {
                StateComponent::Diabetic => out.diabetic = false,
                StateComponent::HeartRate => out.heart_rate = Level::Normal,
                StateComponent::BloodPressure => out.blood_pressure = Level::Normal,
                StateComponent::Oxygen => out.oxygen = OxygenLevel::Normal,
                StateComponent::Glucose => out.glucose = GlucoseLevel::Normal,
                StateComponent::Treatments => out.treatments = Treatments::default(),
            }
        }
        out
    }

    pub fn observe(&self, state: &PatientState) -> usize {
        self.apply(state).encode()
    }
}

/// Encodes a state after applying `mask`.
pub fn encode_state(state: &PatientState, mask: &ObservationMask) -> usize {
    mask.observe(state)
}

/// Euclidean distance between the ordinal features of two observation ids,
/// or `None` if either id cannot be decoded.
pub fn observation_distance(a: usize, b: usize) -> Option<f64> {
    let fa = PatientState::decode(a)?.features();
    let fb = PatientState::decode(b)?.features();
    Some(
        fa.iter()
            .zip(&fb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn encoding_is_a_bijection_over_all_states() {
        assert_eq!(NUM_STATES, 1440);
        let mut seen = HashSet::new();
        for id in 0..NUM_STATES {
            let s = PatientState::decode(id).unwrap();
            assert_eq!(s.encode(), id);
            assert!(s.abnormal_count() <= 4);
            seen.insert(s);
        }
        assert_eq!(seen.len(), 1440);
        assert!(PatientState::decode(NUM_STATES).is_none());
    }

    #[test]
    fn empty_mask_keeps_all_ids_and_diabetic_mask_halves_them() {
        let empty = ObservationMask::default();
        let ids: HashSet<_> = PatientState::all().map(|s| empty.observe(&s)).collect();
        assert_eq!(ids.len(), 1440);
        let masked = ObservationMask::hide_diabetic();
        let ids: HashSet<_> = PatientState::all().map(|s| masked.observe(&s)).collect();
        assert!(ids.len() <= 720);
    }

    #[test]
    fn terminal_conditions() {
        assert_eq!(PatientState::healthy(false).terminal_check(), Outcome::Discharge);
        let mut dying = PatientState::healthy(true);
        dying.heart_rate = Level::High;
        dying.blood_pressure = Level::Low;
        dying.glucose = GlucoseLevel::VeryHigh;
        assert_eq!(dying.terminal_check(), Outcome::Death);
        let mut treated = PatientState::healthy(false);
        treated.treatments.antibiotics = true;
        assert_eq!(treated.terminal_check(), Outcome::None);
        let mut sick = PatientState::healthy(false);
        sick.oxygen = OxygenLevel::Low;
        assert_eq!(sick.terminal_check(), Outcome::None);
    }

    #[test]
    fn observation_distance_examples() {
        let a = PatientState::healthy(false);
        let mut b = a;
        b.glucose = GlucoseLevel::High;
        assert_eq!(observation_distance(a.encode(), a.encode()), Some(0.0));
        assert_eq!(observation_distance(a.encode(), b.encode()), Some(1.0));
        assert_eq!(
            observation_distance(b.encode(), a.encode()),
            observation_distance(a.encode(), b.encode())
        );
        assert_eq!(observation_distance(0, NUM_STATES), None);
    }

    #[test]
    fn action_bits_roundtrip() {
        for a in 0..NUM_ACTIONS {
            assert_eq!(Treatments::from_action(a).bits(), a);
        }
    }
}
