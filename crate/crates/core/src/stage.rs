//! The five AASM sleep stages and the per-epoch label alphabet.

use serde::{Deserialize, Serialize};
use std::fmt;

/// One of the five AASM sleep stages, in the fixed class order used by
/// every classifier, confusion matrix and report in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Wake,
    N1,
    N2,
    N3,
    Rem,
}

impl Stage {
    /// All stages in class order (Wake, N1, N2, N3, REM).
    pub const ALL: [Stage; 5] = [Stage::Wake, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];

    /// Class index in the fixed order.
    pub fn index(self) -> usize {
        match self {
            Stage::Wake => 0,
            Stage::N1 => 1,
            Stage::N2 => 2,
            Stage::N3 => 3,
            Stage::Rem => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Stage::ALL.get(i).copied()
    }

    /// Canonical display name ("Wake", "N1", ...).
    pub fn name(self) -> &'static str {
        match self {
            Stage::Wake => "Wake",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
        }
    }

    /// Parse a canonical name as produced by [`Stage::name`] (case-insensitive).
    pub fn parse(s: &str) -> Option<Stage> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wake" => Some(Stage::Wake),
            "n1" => Some(Stage::N1),
            "n2" => Some(Stage::N2),
            "n3" => Some(Stage::N3),
            "rem" => Some(Stage::Rem),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-30-second-epoch label: a scoreable stage or an excluded epoch
/// (movement artifact or unscored time that never enters a dataset).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EpochLabel {
    Stage(Stage),
    Excluded,
}

impl EpochLabel {
    pub fn stage(self) -> Option<Stage> {
        match self {
            EpochLabel::Stage(s) => Some(s),
            EpochLabel::Excluded => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_order_is_stable() {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
        assert_eq!(names, ["Wake", "N1", "N2", "N3", "REM"]);
        for (i, s) in Stage::ALL.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(Stage::from_index(i), Some(*s));
        }
    }

    #[test]
    fn parse_round_trips() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
            assert_eq!(Stage::parse(&s.name().to_lowercase()), Some(s));
        }
        assert_eq!(Stage::parse("N4"), None);
    }
}
