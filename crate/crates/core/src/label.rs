//! Three-way diagnostic-quality grades.

use std::fmt;

/// Diagnostic quality of a fundus photograph.
///
/// Manifest files encode these as 0 (good), 1 (usable), 2 (unusable /
/// "reject"); the mapping is pinned here and nowhere else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QualityLabel {
    Good,
    Usable,
    Unusable,
}

impl QualityLabel {
    pub const ALL: [QualityLabel; 3] =
        [QualityLabel::Good, QualityLabel::Usable, QualityLabel::Unusable];

    pub fn code(self) -> u8 {
        match self {
            QualityLabel::Good => 0,
            QualityLabel::Usable => 1,
            QualityLabel::Unusable => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(QualityLabel::Good),
            1 => Some(QualityLabel::Usable),
            2 => Some(QualityLabel::Unusable),
            _ => None,
        }
    }

    /// Class index used for confusion-matrix rows/columns and flat logits.
    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        u8::try_from(index).ok().and_then(Self::from_code)
    }

    pub fn name(self) -> &'static str {
        match self {
            QualityLabel::Good => "good",
            QualityLabel::Usable => "usable",
            QualityLabel::Unusable => "unusable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "good" => Some(QualityLabel::Good),
            "usable" => Some(QualityLabel::Usable),
            "unusable" | "reject" => Some(QualityLabel::Unusable),
            _ => None,
        }
    }
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
