//! Patient records and the evidence items derived from them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceCategory {
    Demographics,
    History,
    Cognition,
    Lab,
    Genetic,
    Biomarker,
    Imaging,
}

/// One clinical fact rendered as a short textual descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub id: String,
    pub descriptor: String,
    /// Dotted path of the record field the descriptor was rendered from.
    pub source_field: String,
    pub category: EvidenceCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anatomy_ref: Option<String>,
}

impl EvidenceItem {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.source_field.is_empty() {
            return Err(Error::Config(format!(
                "evidence `{}` needs an id and a source field",
                self.id
            )));
        }
        if self.anatomy_ref.is_some() && self.category != EvidenceCategory::Imaging {
            return Err(Error::Config(format!(
                "evidence `{}` has an anatomy reference but is not imaging-derived",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: f64,
    pub sex: String,
    pub education_years: f64,
}

/// Per-domain cognitive z-scores; lower is worse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cognition {
    pub memory: f64,
    pub executive: f64,
    pub visuospatial: f64,
    pub language: f64,
}

impl Cognition {
    pub fn as_array(&self) -> [f64; 4] {
        [self.memory, self.executive, self.visuospatial, self.language]
    }
}

/// CSF concentrations in pg/mL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biomarkers {
    pub abeta: f64,
    pub ttau: f64,
    pub ptau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genetics {
    pub apoe: [u8; 2],
}

impl Genetics {
    pub fn e4_count(&self) -> usize {
        self.apoe.iter().filter(|&&a| a == 4).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub family_history: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labs {
    /// Serum vitamin B12 in pmol/L.
    pub b12: f64,
}

/// Axis-aligned ellipsoid in voxel coordinates (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let p = [z, y, x];
        let s: f64 = (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum();
        s <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub name: String,
    pub shape: Ellipsoid,
    pub volume_mm3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub demographics: Demographics,
    pub cognition: Cognition,
    pub biomarkers: Biomarkers,
    pub genetics: Genetics,
    pub history: History,
    pub labs: Labs,
    pub evidence: Vec<EvidenceItem>,
    pub gt_label: Label,
    #[serde(default)]
    pub structures: Vec<Structure>,
    /// Structure name to mask path relative to the cohort directory.
    #[serde(default)]
    pub mask_files: BTreeMap<String, String>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        let b = &self.biomarkers;
        if [b.abeta, b.ttau, b.ptau]
            .iter()
            .any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::Config(format!(
                "patient `{}` has a non-positive biomarker value",
                self.id
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.evidence {
            e.validate()?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!(
                    "patient `{}` repeats evidence id `{}`",
                    self.id, e.id
                )));
            }
        }
        Ok(())
    }

    pub fn evidence_index(&self, id: &str) -> Option<usize> {
        self.evidence.iter().position(|e| e.id == id)
    }

    pub fn evidence_by_anatomy(&self, structure: &str) -> Option<&EvidenceItem> {
        self.evidence
            .iter()
            .find(|e| e.anatomy_ref.as_deref() == Some(structure))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipsoid_membership() {
        let e = Ellipsoid {
            center: [5.0, 5.0, 5.0],
            radii: [2.0, 3.0, 1.0],
        };
        assert!(e.contains(5.0, 5.0, 5.0));
        assert!(e.contains(7.0, 5.0, 5.0));
        assert!(!e.contains(5.0, 5.0, 6.5));
    }

    #[test]
    fn anatomy_only_on_imaging() {
        let e = EvidenceItem {
            id: "e1".into(),
            descriptor: "Age 70 years".into(),
            source_field: "demographics.age".into(),
            category: EvidenceCategory::Demographics,
            anatomy_ref: Some("left_hippocampus".into()),
        };
        assert!(e.validate().is_err());
    }
}
