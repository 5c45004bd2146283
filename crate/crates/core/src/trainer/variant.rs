use std::fmt;

use serde::{Deserialize, Serialize};

/// Training method of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodVariant {
    /// Every student, leader included, trained alone with cross-entropy.
    Independent,
    /// Common students with mutual learning only; no leader.
    Dml,
    /// Mutual learning, attention-shift diversity through self-distillation
    /// modules, fusion, and the leader with feature and self terms.
    FfsdFull,
    /// As `FfsdFull` with the diversity chain applied directly at every tap
    /// and no self-distillation modules.
    FfsdNoSd,
    /// Pairwise feature-distance diversity at every tap; no
    /// self-distillation modules.
    L2Div,
    /// Pairwise feature-distance diversity at the last tap, plus the
    /// self-distillation modules and the leader self term.
    L2DivSd,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 6] = [
        MethodVariant::Independent,
        MethodVariant::Dml,
        MethodVariant::FfsdFull,
        MethodVariant::FfsdNoSd,
        MethodVariant::L2Div,
        MethodVariant::L2DivSd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodVariant::Independent => "independent",
            MethodVariant::Dml => "dml",
            MethodVariant::FfsdFull => "ffsd_full",
            MethodVariant::FfsdNoSd => "ffsd_no_sd",
            MethodVariant::L2Div => "l2_div",
            MethodVariant::L2DivSd => "l2_div_sd",
        }
    }

    /// Whether the leader is trained and reported.
    pub fn has_leader(self) -> bool {
        !matches!(self, MethodVariant::Dml)
    }

    /// Whether the fusion module, the aligner and the leader's distillation
    /// terms are active.
    pub fn has_fusion(self) -> bool {
        !matches!(self, MethodVariant::Independent | MethodVariant::Dml)
    }

    pub fn has_sd(self) -> bool {
        matches!(self, MethodVariant::FfsdFull | MethodVariant::L2DivSd)
    }

    pub fn mutual_learning(self) -> bool {
        !matches!(self, MethodVariant::Independent)
    }
}

impl fmt::Display for MethodVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
