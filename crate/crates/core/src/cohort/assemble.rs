use std::collections::{HashMap, HashSet};

use log::warn;
use rayon::prelude::*;

use super::{Annotation, CohortError, Label, Sample, SampleSource, Trial};
use crate::dicom::ScanVolume;
use crate::preprocess::PreprocessRegime;

/// Per-patient manifest facts needed to label samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientInfo {
    pub patient_id: String,
    pub trial: Trial,
    pub label: Label,
}

/// How far down the regime's pipeline `assemble_staged` goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyStage {
    /// Windowed plus the pre-augmentation spatial step (localized crop).
    PreAugment,
    /// Every regime step.
    Full,
}

/// Build fully preprocessed samples.
///
/// Annotated slices become samples labeled by their tag. Untampered
/// patients without any annotation contribute every slice, localized (if
/// applicable) on the image centre. Only the first annotation per slice is
/// used.
pub fn assemble(
    volumes: &[ScanVolume],
    annotations: &[Annotation],
    patients: &[PatientInfo],
    regime: &PreprocessRegime,
) -> Result<Vec<Sample>, CohortError> {
    assemble_staged(volumes, annotations, patients, regime, AssemblyStage::Full)
}

struct Job<'a> {
    volume: &'a ScanVolume,
    slice_index: usize,
    center: (i64, i64),
    label: Label,
    trial: Trial,
}

pub fn assemble_staged(
    volumes: &[ScanVolume],
    annotations: &[Annotation],
    patients: &[PatientInfo],
    regime: &PreprocessRegime,
    stage: AssemblyStage,
) -> Result<Vec<Sample>, CohortError> {
    regime.validate()?;
    let by_id: HashMap<&str, &ScanVolume> = volumes.iter().map(|v| (v.patient_id(), v)).collect();
    let info: HashMap<&str, &PatientInfo> = patients
        .iter()
        .map(|p| (p.patient_id.as_str(), p))
        .collect();

    let mut jobs = Vec::new();
    let mut used = HashSet::new();
    let mut annotated_patients = HashSet::new();
    for a in annotations {
        let volume = *by_id
            .get(a.patient_id.as_str())
            .ok_or_else(|| CohortError::UnresolvedAnnotation(a.patient_id.clone()))?;
        let in_bounds = a.slice_index < volume.len()
            && (0..i64::from(volume.cols())).contains(&a.x)
            && (0..i64::from(volume.rows())).contains(&a.y);
        if !in_bounds {
            return Err(CohortError::OutOfBounds {
                patient_id: a.patient_id.clone(),
                slice_index: a.slice_index,
                x: a.x,
                y: a.y,
            });
        }
        annotated_patients.insert(a.patient_id.as_str());
        if !used.insert((a.patient_id.as_str(), a.slice_index)) {
            warn!(
                "patient {} slice {}: duplicate annotation ignored",
                a.patient_id, a.slice_index
            );
            continue;
        }
        let label = a.tag.label();
        let trial = if label.is_tampered() {
            match info.get(a.patient_id.as_str()).map(|p| p.trial) {
                Some(t @ (Trial::Blind | Trial::Open)) => t,
                _ => return Err(CohortError::MissingTrial(a.patient_id.clone())),
            }
        } else {
            Trial::Na
        };
        jobs.push(Job {
            volume,
            slice_index: a.slice_index,
            center: (a.x, a.y),
            label,
            trial,
        });
    }
    for volume in volumes {
        let id = volume.patient_id();
        let untampered = info.get(id).is_none_or(|p| p.label == Label::Untampered);
        if annotated_patients.contains(id) || !untampered {
            continue;
        }
        let center = (i64::from(volume.cols()) / 2, i64::from(volume.rows()) / 2);
        for slice_index in 0..volume.len() {
            jobs.push(Job {
                volume,
                slice_index,
                center,
                label: Label::Untampered,
                trial: Trial::Na,
            });
        }
    }

    jobs.par_iter()
        .map(|job| {
            let slice = &volume_slice(job);
            let windowed = regime.window(slice);
            let mut image = regime.pre_augment(windowed, job.center)?;
            if stage == AssemblyStage::Full {
                image = regime.post_augment(image)?;
            }
            Ok(Sample {
                image,
                label: job.label,
                trial: job.trial,
                source: SampleSource {
                    patient_id: job.volume.patient_id().to_string(),
                    slice_index: job.slice_index,
                },
            })
        })
        .collect()
}

fn volume_slice<'a>(job: &Job<'a>) -> &'a crate::dicom::DicomSlice {
    job.volume
        .slice(job.slice_index)
        .expect("slice index checked during job construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{AnnotationTag, ClassCounts};
    use crate::dicom::{DicomSlice, PixelRepresentation, Rescale};
    use crate::preprocess::RegimeKind;

    fn volume(id: &str, n: u32) -> ScanVolume {
        let named = (0..n)
            .map(|i| {
                let s = DicomSlice::new(
                    id,
                    i,
                    32,
                    32,
                    PixelRepresentation::Unsigned,
                    Rescale::ct_default(),
                    vec![1024 + i as u16; 32 * 32],
                )
                .unwrap();
                (format!("{i}"), s)
            })
            .collect();
        ScanVolume::from_slices(named).unwrap()
    }

    fn ann(id: &str, slice: usize, tag: AnnotationTag) -> Annotation {
        Annotation {
            patient_id: id.into(),
            slice_index: slice,
            x: 16,
            y: 16,
            tag,
        }
    }

    #[test]
    fn unannotated_untampered_volume_yields_all_slices() {
        let v = vec![volume("C", 3)];
        let s = assemble(&v, &[], &[], &PreprocessRegime::new(RegimeKind::Raw)).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s
            .iter()
            .all(|x| x.label == Label::Untampered && x.trial == Trial::Na));
    }

    #[test]
    fn labels_and_trials_follow_manifest() {
        let vols = vec![volume("A", 4), volume("B", 4), volume("C", 2)];
        let patients = vec![
            PatientInfo {
                patient_id: "A".into(),
                trial: Trial::Blind,
                label: Label::Fm,
            },
            PatientInfo {
                patient_id: "B".into(),
                trial: Trial::Open,
                label: Label::Fb,
            },
            PatientInfo {
                patient_id: "C".into(),
                trial: Trial::Na,
                label: Label::Untampered,
            },
        ];
        let anns = vec![
            ann("A", 0, AnnotationTag::Fm),
            ann("A", 2, AnnotationTag::Fm),
            ann("A", 2, AnnotationTag::Fm),
            ann("B", 1, AnnotationTag::Fb),
        ];
        let mut regime = PreprocessRegime::new(RegimeKind::Localized);
        regime.crop_size = 16;
        let s = assemble(&vols, &anns, &patients, &regime).unwrap();
        let counts = ClassCounts::of_samples(&s);
        assert_eq!(
            counts,
            ClassCounts {
                untampered: 2,
                fb: 1,
                fm: 2,
                total: 5
            }
        );
        assert!(s.iter().all(|x| x.image.dim() == (16, 16)));
        assert_eq!(s[0].trial, Trial::Blind);
        assert_eq!(s[2].trial, Trial::Open);
    }

    #[test]
    fn errors() {
        let vols = vec![volume("A", 2)];
        let regime = PreprocessRegime::new(RegimeKind::Raw);
        assert!(matches!(
            assemble(&vols, &[ann("Z", 0, AnnotationTag::Fm)], &[], &regime),
            Err(CohortError::UnresolvedAnnotation(p)) if p == "Z"
        ));
        assert!(matches!(
            assemble(&vols, &[ann("A", 5, AnnotationTag::Nodule)], &[], &regime),
            Err(CohortError::OutOfBounds { .. })
        ));
        let mut far = ann("A", 0, AnnotationTag::Nodule);
        far.x = 32;
        assert!(matches!(
            assemble(&vols, &[far], &[], &regime),
            Err(CohortError::OutOfBounds { .. })
        ));
        assert!(matches!(
            assemble(&vols, &[ann("A", 0, AnnotationTag::Fb)], &[], &regime),
            Err(CohortError::MissingTrial(_))
        ));
    }
}
