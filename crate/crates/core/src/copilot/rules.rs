use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CopilotError, MotionState, Result};

/// Sensor event channels, in the order of [`SensorFrame`].
pub const SENSOR_FEATURES: [&str; 4] = ["contact_force", "object_height", "object_vz", "trial_end"];

/// One sample of the sensor event channels.
pub type SensorFrame = [f64; 4];

/// Per-state confidence thresholds plus the stricter UNRELY threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdTable {
    /// Indexed in [`MotionState::REAL`] order.
    pub states: [f64; 5],
    pub unrely: f64,
}

impl Default for ThresholdTable {
    fn default() -> Self {
        Self {
            states: [0.5; 5],
            unrely: 0.8,
        }
    }
}

impl ThresholdTable {
    pub fn new(states: [f64; 5], unrely: f64) -> Result<Self> {
        let t = Self { states, unrely };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.states.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CopilotError::Thresholds(format!("state threshold {v} outside [0, 1]")));
        }
        let max = self.states.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(self.unrely.is_finite() && self.unrely > max) {
            return Err(CopilotError::Thresholds(format!(
                "UNRELY threshold {} must exceed every state threshold (max {max})",
                self.unrely
            )));
        }
        Ok(())
    }

    /// Every threshold multiplied by `factor`. The result is a sweep point and
    /// is not re-validated: scale 0 disables filtering, large scales exceed 1.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            states: self.states.map(|v| v * factor),
            unrely: self.unrely * factor,
        }
    }

    pub fn threshold(&self, state: MotionState) -> f64 {
        state.index().map_or(self.unrely, |i| self.states[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Comparator::Lt, Comparator::Le, Comparator::Gt, Comparator::Ge]
            .into_iter()
            .find(|c| c.symbol() == s)
    }

    pub fn holds(self, x: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => x < threshold,
            Comparator::Le => x <= threshold,
            Comparator::Gt => x > threshold,
            Comparator::Ge => x >= threshold,
        }
    }

    fn is_upper_bound(self) -> bool {
        matches!(self, Comparator::Lt | Comparator::Le)
    }
}

/// `from feature comparator threshold to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub from: MotionState,
    /// Index into [`SENSOR_FEATURES`].
    pub feature: usize,
    pub comparator: Comparator,
    pub threshold: f64,
    pub to: MotionState,
}

impl Rule {
    pub fn matches(&self, sensors: &SensorFrame) -> bool {
        self.comparator.holds(sensors[self.feature], self.threshold)
    }

    /// Whether some value satisfies both predicates on the same feature.
    fn overlaps(&self, other: &Rule) -> bool {
        if self.feature != other.feature {
            // Independent channels can fire together.
            return true;
        }
        let (a, b) = (self, other);
        if a.comparator.is_upper_bound() == b.comparator.is_upper_bound() {
            return true;
        }
        let (upper, lower) = if a.comparator.is_upper_bound() { (a, b) } else { (b, a) };
        let inclusive = upper.comparator == Comparator::Le && lower.comparator == Comparator::Ge;
        if inclusive {
            lower.threshold <= upper.threshold
        } else {
            lower.threshold < upper.threshold
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.from,
            SENSOR_FEATURES[self.feature],
            self.comparator.symbol(),
            self.threshold,
            self.to
        )
    }
}

/// The transition table driving the motion-state machine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRules {
    rules: Vec<Rule>,
}

pub const DEFAULT_RULES: &str = "\
# state       feature        cmp  threshold  next
SEARCHING     contact_force  >    0.5        LIFTING
LIFTING       object_height  >    0.04       HOLDING
HOLDING       object_vz      <    -0.01      PUTTING
PUTTING       contact_force  <    0.5        RETURNING
RETURNING     trial_end      >=   0.5        SEARCHING
";

impl Default for TransitionRules {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("default rule table is valid")
    }
}

impl TransitionRules {
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        let t = Self { rules };
        t.validate()?;
        Ok(t)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One rule per line: `STATE feature comparator threshold NEXT`; `#`
    /// starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| CopilotError::RuleFile { line, msg };
            let f: Vec<&str> = content.split_whitespace().collect();
            let [from, feature, cmp, threshold, to] = f[..] else {
                return Err(err(format!("expected 5 fields, got {}", f.len())));
            };
            rules.push(Rule {
                from: from.parse().map_err(err)?,
                feature: SENSOR_FEATURES
                    .iter()
                    .position(|&n| n == feature)
                    .ok_or_else(|| err(format!("unknown feature `{feature}`")))?,
                comparator: Comparator::parse(cmp).ok_or_else(|| err(format!("unknown comparator `{cmp}`")))?,
                threshold: threshold
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| err(format!("`{threshold}` is not a finite number")))?,
                to: to.parse().map_err(err)?,
            });
        }
        Self::new(rules)
    }

    pub fn to_text(&self) -> String {
        self.rules.iter().map(|r| format!("{r}\n")).collect()
    }

    /// Rejects UNRELY endpoints, overlapping predicates out of one state and
    /// tables that do not reach all five states from SEARCHING.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rules {
            if !r.from.is_real() || !r.to.is_real() {
                return Err(CopilotError::RuleTable(format!("rule `{r}` involves UNRELY")));
            }
        }
        for (i, a) in self.rules.iter().enumerate() {
            for b in &self.rules[i + 1..] {
                if a.from == b.from && a.overlaps(b) {
                    return Err(CopilotError::RuleTable(format!("rules `{a}` and `{b}` can fire together")));
                }
            }
        }
        let mut seen = BTreeSet::from([MotionState::Searching]);
        let mut frontier = vec![MotionState::Searching];
        while let Some(s) = frontier.pop() {
            for r in self.rules.iter().filter(|r| r.from == s) {
                if seen.insert(r.to) {
                    frontier.push(r.to);
                }
            }
        }
        if seen.len() != MotionState::REAL.len() {
            let missing: Vec<_> = MotionState::REAL.iter().filter(|s| !seen.contains(s)).collect();
            return Err(CopilotError::RuleTable(format!("states unreachable from SEARCHING: {missing:?}")));
        }
        Ok(())
    }
}

/// Applies the first matching rule out of `state`, else stays put. The
/// posterior is accepted for interface symmetry; the shipped predicates read
/// sensors only.
pub fn fsm_step(state: MotionState, _posterior: &[f64; 5], sensors: &SensorFrame, rules: &TransitionRules) -> Result<MotionState> {
    if !state.is_real() {
        return Err(CopilotError::Input("the machine cannot be in UNRELY".into()));
    }
    Ok(rules
        .rules
        .iter()
        .find(|r| r.from == state && r.matches(sensors))
        .map_or(state, |r| r.to))
}

/// The machine state if the classifier agrees (ties included), else UNRELY.
pub fn attribute_point(machine: MotionState, posterior: &[f64; 5]) -> MotionState {
    let Some(m) = machine.index() else {
        return MotionState::Unrely;
    };
    let max = posterior.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if posterior[m] >= max {
        machine
    } else {
        MotionState::Unrely
    }
}
