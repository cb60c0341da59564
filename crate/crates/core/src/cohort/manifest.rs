use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_annotations, Annotation, CohortError, Label, PatientInfo, Trial};
use crate::dicom::{load_volume, ScanVolume};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    /// Slice folder, relative to the manifest.
    pub directory: PathBuf,
    pub trial: Trial,
    pub label: Label,
}

/// Cohort description: where each patient's slices live, its trial and
/// class, and the annotation CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub schema_version: u32,
    /// Annotation CSV, relative to the manifest.
    pub annotations: PathBuf,
    pub patients: Vec<PatientEntry>,
}

/// Everything a manifest points at, loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub volumes: Vec<ScanVolume>,
    pub annotations: Vec<Annotation>,
    pub patients: Vec<PatientInfo>,
    /// SHA-256 over the manifest and annotation bytes.
    pub content_hash: String,
}

impl CohortManifest {
    pub fn from_json(text: &str) -> Result<Self, CohortError> {
        let manifest: CohortManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(CohortError::InvalidManifest(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        let mut seen = HashSet::new();
        for p in &self.patients {
            if !seen.insert(&p.patient_id) {
                return Err(CohortError::InvalidManifest(format!(
                    "patient {} listed twice",
                    p.patient_id
                )));
            }
            if p.label.is_tampered() && p.trial == Trial::Na {
                return Err(CohortError::MissingTrial(p.patient_id.clone()));
            }
        }
        Ok(())
    }

    pub fn patient_infos(&self) -> Vec<PatientInfo> {
        self.patients
            .iter()
            .map(|p| PatientInfo {
                patient_id: p.patient_id.clone(),
                trial: p.trial,
                label: p.label,
            })
            .collect()
    }

    /// Read the manifest at `path` and load every volume and annotation it
    /// references.
    pub fn load(path: &Path) -> Result<LoadedCohort, CohortError> {
        let io = |source| CohortError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = fs::read_to_string(path).map_err(io)?;
        let manifest = CohortManifest::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let csv_path = base.join(&manifest.annotations);
        let csv_bytes = fs::read(&csv_path).map_err(|source| CohortError::Io {
            path: csv_path.clone(),
            source,
        })?;
        let annotations = load_annotations(&csv_path)?;
        let volumes = manifest
            .patients
            .par_iter()
            .map(|p| -> Result<ScanVolume, CohortError> {
                let volume = load_volume(&base.join(&p.directory))?;
                if volume.patient_id() != p.patient_id {
                    return Err(CohortError::InvalidManifest(format!(
                        "directory {} holds patient {}, manifest says {}",
                        p.directory.display(),
                        volume.patient_id(),
                        p.patient_id
                    )));
                }
                Ok(volume)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher.update(&csv_bytes);
        Ok(LoadedCohort {
            volumes,
            annotations,
            patients: manifest.patient_infos(),
            content_hash: hex::encode(hasher.finalize()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_validation() {
        let m = CohortManifest {
            schema_version: 1,
            annotations: "annotations.csv".into(),
            patients: vec![PatientEntry {
                patient_id: "P0".into(),
                directory: "P0".into(),
                trial: Trial::Blind,
                label: Label::Fm,
            }],
        };
        assert_eq!(CohortManifest::from_json(&m.to_json()).unwrap(), m);

        let mut bad = m.clone();
        bad.patients[0].trial = Trial::Na;
        assert!(matches!(bad.validate(), Err(CohortError::MissingTrial(_))));
        let mut dup = m.clone();
        dup.patients.push(m.patients[0].clone());
        assert!(matches!(
            dup.validate(),
            Err(CohortError::InvalidManifest(_))
        ));
    }
}
