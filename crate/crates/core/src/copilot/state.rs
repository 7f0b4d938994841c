use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five task phases plus the virtual `Unrely` attribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MotionState {
    Searching,
    Lifting,
    Holding,
    Putting,
    Returning,
    /// Only ever attributed to points, never held by the machine.
    Unrely,
}

impl MotionState {
    /// The five real states in task order.
    pub const REAL: [MotionState; 5] = [
        MotionState::Searching,
        MotionState::Lifting,
        MotionState::Holding,
        MotionState::Putting,
        MotionState::Returning,
    ];

    /// Class index of a real state.
    pub fn index(self) -> Option<usize> {
        Self::REAL.iter().position(|&s| s == self)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::REAL.get(i).copied()
    }

    pub fn is_real(self) -> bool {
        self != MotionState::Unrely
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionState::Searching => "SEARCHING",
            MotionState::Lifting => "LIFTING",
            MotionState::Holding => "HOLDING",
            MotionState::Putting => "PUTTING",
            MotionState::Returning => "RETURNING",
            MotionState::Unrely => "UNRELY",
        }
    }
}

impl fmt::Display for MotionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::REAL
            .iter()
            .chain(std::iter::once(&MotionState::Unrely))
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| format!("unknown motion state '{s}'"))
    }
}
