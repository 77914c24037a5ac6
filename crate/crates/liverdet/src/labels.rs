//! The 14-class label taxonomy: background, six liver lesion types, and
//! seven organs & vessels.
//!
//! Lesion codes carry a fixed clinical priority (most to least malignant):
//! HCC > ICC > Meta > Hem > Other > Cyst. Numerically the priority order is
//! the code order, so "highest priority" means "lowest lesion code".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A voxel class code in `0..=13`.
///
/// 0 is background, 1-6 are lesion classes, 7-13 are organs & vessels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(u8);

impl ClassLabel {
    pub const BACKGROUND: ClassLabel = ClassLabel(0);
    pub const HCC: ClassLabel = ClassLabel(1);
    pub const ICC: ClassLabel = ClassLabel(2);
    pub const META: ClassLabel = ClassLabel(3);
    pub const HEM: ClassLabel = ClassLabel(4);
    pub const OTHER: ClassLabel = ClassLabel(5);
    pub const CYST: ClassLabel = ClassLabel(6);
    pub const LIVER: ClassLabel = ClassLabel(7);
    pub const HEPATIC_VESSELS: ClassLabel = ClassLabel(8);
    pub const PORTAL_SPLENIC_VEIN: ClassLabel = ClassLabel(9);
    pub const GALLBLADDER: ClassLabel = ClassLabel(10);
    pub const SPLEEN: ClassLabel = ClassLabel(11);
    pub const PANCREAS: ClassLabel = ClassLabel(12);
    pub const STOMACH: ClassLabel = ClassLabel(13);

    /// Total number of classes including background.
    pub const COUNT: usize = 14;

    pub fn new(code: u8) -> Result<Self> {
        if code as usize >= Self::COUNT {
            return Err(Error::Classification(format!(
                "class code {code} out of range 0..=13"
            )));
        }
        Ok(ClassLabel(code))
    }

    /// Constructs a lesion label, rejecting anything outside `1..=6`.
    pub fn lesion(code: u8) -> Result<Self> {
        if !(1..=6).contains(&code) {
            return Err(Error::Classification(format!(
                "lesion code {code} out of range 1..=6"
            )));
        }
        Ok(ClassLabel(code))
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn is_background(self) -> bool {
        self.0 == 0
    }

    pub fn is_lesion(self) -> bool {
        (1..=6).contains(&self.0)
    }

    pub fn is_organ(self) -> bool {
        (7..=13).contains(&self.0)
    }

    /// Malignant lesion classes: HCC, ICC, Meta.
    pub fn is_malignant(self) -> bool {
        (1..=3).contains(&self.0)
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "background",
            1 => "HCC",
            2 => "ICC",
            3 => "Meta",
            4 => "Hem",
            5 => "Other",
            6 => "Cyst",
            7 => "liver",
            8 => "hepatic vessels",
            9 => "portal&splenic vein",
            10 => "gallbladder",
            11 => "spleen",
            12 => "pancreas",
            13 => "stomach",
            _ => unreachable!(),
        }
    }

    /// Iterator over the six lesion classes in priority order.
    pub fn lesions() -> impl Iterator<Item = ClassLabel> {
        (1..=6).map(ClassLabel)
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Returns the highest-priority (most malignant, lowest code) lesion label.
///
/// Errors on an empty input; callers deciding a patient class map that case
/// to "normal".
pub fn priority_max(labels: impl IntoIterator<Item = ClassLabel>) -> Result<ClassLabel> {
    let mut best: Option<ClassLabel> = None;
    for label in labels {
        if !label.is_lesion() {
            return Err(Error::Classification(format!(
                "priority_max expects lesion labels, got {label}"
            )));
        }
        best = Some(match best {
            Some(b) if b.code() <= label.code() => b,
            _ => label,
        });
    }
    best.ok_or(Error::EmptyInput("priority_max over an empty label set"))
}
