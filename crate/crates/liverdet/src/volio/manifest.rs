//! Per-case manifests: which files make up a case.
//!
//! Phases are assumed pre-aligned; the manifest only names files and an
//! optional spacing override. Paths are stored relative to the manifest file
//! and resolved against its directory on load.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Spacing;

/// Contrast-enhancement phase of a CT series.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Phase {
    /// Noncontrast (always present).
    NC,
    /// Arterial phase.
    AP,
    /// Venous phase.
    VP,
    /// Delayed phase.
    DP,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::NC, Phase::AP, Phase::VP, Phase::DP];

    pub fn tag(self) -> &'static str {
        match self {
            Phase::NC => "NC",
            Phase::AP => "AP",
            Phase::VP => "VP",
            Phase::DP => "DP",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NC" => Ok(Phase::NC),
            "AP" => Ok(Phase::AP),
            "VP" => Ok(Phase::VP),
            "DP" => Ok(Phase::DP),
            other => Err(Error::Manifest {
                path: String::new(),
                message: format!("unknown phase tag `{other}`"),
            }),
        }
    }
}

/// Names the files of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub case_id: String,
    /// Phase tag to volume path; NC is mandatory.
    pub phases: BTreeMap<Phase, PathBuf>,
    /// 14-channel probability stack, if available.
    #[serde(default)]
    pub prob: Option<PathBuf>,
    /// Ground-truth label mask, if available.
    #[serde(default)]
    pub gt_mask: Option<PathBuf>,
    /// Overrides the spacing read from the volume headers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<Spacing>,
}

impl CaseManifest {
    pub fn validate(&self) -> Result<()> {
        if self.case_id.is_empty() {
            return Err(Error::Manifest {
                path: String::new(),
                message: "empty case_id".into(),
            });
        }
        if !self.phases.contains_key(&Phase::NC) {
            return Err(Error::Manifest {
                path: String::new(),
                message: format!("case `{}` lacks the mandatory NC phase", self.case_id),
            });
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&json);
        let mut manifest: CaseManifest =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Manifest {
                path: format!("{}:{}", path.display(), e.path()),
                message: e.inner().to_string(),
            })?;
        manifest.validate().map_err(|e| match e {
            Error::Manifest { message, .. } => Error::Manifest {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in manifest.phases.values_mut() {
            *p = base.join(&*p);
        }
        if let Some(p) = manifest.prob.as_mut() {
            *p = base.join(&*p);
        }
        if let Some(p) = manifest.gt_mask.as_mut() {
            *p = base.join(&*p);
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Finds `manifest.json` files under a directory, sorted by path.
pub fn discover_manifests(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| {
                let n = n.to_string_lossy();
                n == "manifest.json" || n.ends_with(".manifest.json")
            }) {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}
