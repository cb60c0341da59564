//! Labeled sample sets: annotation ingestion, cohort manifests, sample
//! assembly, class balancing and train/test partitioning.

mod annotations;
mod assemble;
mod convert;
mod manifest;
mod split;

use std::fmt;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::DicomError;
use crate::preprocess::PreprocessError;

pub use annotations::{load_annotations, parse_annotations, write_annotations, ANNOTATION_HEADER};
pub use assemble::{assemble, assemble_staged, AssemblyStage, PatientInfo};
pub use convert::{convert_annotations, ConversionReport, SourceFormat};
pub use manifest::{CohortManifest, LoadedCohort, PatientEntry, MANIFEST_SCHEMA_VERSION};
pub use split::{balance, equalize, equalize_labels, split, SplitPlan, SplitPolicy};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("line {line}: malformed annotation row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: unknown tag {tag:?}")]
    UnknownTag { line: u64, tag: String },
    #[error("annotation references unknown patient {0}")]
    UnresolvedAnnotation(String),
    #[error("annotation {patient_id} slice {slice_index} ({x}, {y}) lies outside the volume")]
    OutOfBounds {
        patient_id: String,
        slice_index: usize,
        x: i64,
        y: i64,
    },
    #[error("tampered annotation on patient {0} without a BLIND or OPEN trial")]
    MissingTrial(String),
    #[error("class {label} has {count} samples; at least 2 are needed to split")]
    ClassTooSmall { label: Label, count: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Annotation tag as written in the CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotationTag {
    #[serde(rename = "FB")]
    Fb,
    #[serde(rename = "FM")]
    Fm,
    #[serde(rename = "NODULE")]
    Nodule,
}

impl AnnotationTag {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationTag::Fb => "FB",
            AnnotationTag::Fm => "FM",
            AnnotationTag::Nodule => "NODULE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "FB" => Some(AnnotationTag::Fb),
            "FM" => Some(AnnotationTag::Fm),
            "NODULE" => Some(AnnotationTag::Nodule),
            _ => None,
        }
    }

    pub fn label(self) -> Label {
        match self {
            AnnotationTag::Fb => Label::Fb,
            AnnotationTag::Fm => Label::Fm,
            AnnotationTag::Nodule => Label::Untampered,
        }
    }
}

/// A labeled site: column `x`, row `y` on slice `slice_index` of a patient.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Annotation {
    pub patient_id: String,
    pub slice_index: usize,
    pub x: i64,
    pub y: i64,
    pub tag: AnnotationTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Untampered,
    Fb,
    Fm,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Untampered, Label::Fb, Label::Fm];

    pub fn is_tampered(self) -> bool {
        self != Label::Untampered
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Untampered => "UNTAMPERED",
            Label::Fb => "FB",
            Label::Fm => "FM",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Trial {
    Blind,
    Open,
    Na,
}

/// Identity of a sample: the slice it came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleSource {
    pub patient_id: String,
    pub slice_index: usize,
}

/// One preprocessed image with its label and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array2<f32>,
    pub label: Label,
    pub trial: Trial,
    pub source: SampleSource,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub untampered: usize,
    pub fb: usize,
    pub fm: usize,
    pub total: usize,
}

impl ClassCounts {
    pub fn of<'a>(labels: impl IntoIterator<Item = &'a Label>) -> Self {
        let mut c = ClassCounts::default();
        for l in labels {
            match l {
                Label::Untampered => c.untampered += 1,
                Label::Fb => c.fb += 1,
                Label::Fm => c.fm += 1,
            }
            c.total += 1;
        }
        c
    }

    pub fn of_samples(samples: &[Sample]) -> Self {
        Self::of(samples.iter().map(|s| &s.label))
    }

    pub fn tampered(&self) -> usize {
        self.fb + self.fm
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Untampered => self.untampered,
            Label::Fb => self.fb,
            Label::Fm => self.fm,
        }
    }
}
