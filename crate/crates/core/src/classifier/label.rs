use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Call categories of the modified Wright taxonomy, plus `Noise` for screening.
///
/// Serialized names are the variant names and must not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CallLabel {
    Complex,
    ComplexTrill,
    DownwardRamp,
    Flat,
    InvertedU,
    Short,
    Split,
    StepDown,
    StepUp,
    Trill,
    UpwardRamp,
    Noise,
}

impl CallLabel {
    pub const ALL: [CallLabel; 12] = [
        CallLabel::Complex,
        CallLabel::ComplexTrill,
        CallLabel::DownwardRamp,
        CallLabel::Flat,
        CallLabel::InvertedU,
        CallLabel::Short,
        CallLabel::Split,
        CallLabel::StepDown,
        CallLabel::StepUp,
        CallLabel::Trill,
        CallLabel::UpwardRamp,
        CallLabel::Noise,
    ];

    /// The eleven vocal categories (everything except `Noise`).
    pub const CALLS: [CallLabel; 11] = [
        CallLabel::Complex,
        CallLabel::ComplexTrill,
        CallLabel::DownwardRamp,
        CallLabel::Flat,
        CallLabel::InvertedU,
        CallLabel::Short,
        CallLabel::Split,
        CallLabel::StepDown,
        CallLabel::StepUp,
        CallLabel::Trill,
        CallLabel::UpwardRamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CallLabel::Complex => "Complex",
            CallLabel::ComplexTrill => "ComplexTrill",
            CallLabel::DownwardRamp => "DownwardRamp",
            CallLabel::Flat => "Flat",
            CallLabel::InvertedU => "InvertedU",
            CallLabel::Short => "Short",
            CallLabel::Split => "Split",
            CallLabel::StepDown => "StepDown",
            CallLabel::StepUp => "StepUp",
            CallLabel::Trill => "Trill",
            CallLabel::UpwardRamp => "UpwardRamp",
            CallLabel::Noise => "Noise",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).expect("label in ALL")
    }
}

impl fmt::Display for CallLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLabel(pub String);

impl fmt::Display for UnknownLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown call label '{}'", self.0)
    }
}

impl std::error::Error for UnknownLabel {}

impl FromStr for CallLabel {
    type Err = UnknownLabel;

    /// Accepts the canonical names case-insensitively, ignoring `-`, `_` and spaces.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| !matches!(c, '-' | '_' | ' ')).flat_map(char::to_lowercase).collect();
        CallLabel::ALL
            .into_iter()
            .find(|l| l.name().to_lowercase() == key)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}
