use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use log::debug;
use rayon::prelude::*;

use super::{parse_slice, DicomError, DicomSlice};

/// An ordered stack of slices from one patient with shared geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanVolume {
    patient_id: String,
    rows: u16,
    cols: u16,
    slices: Vec<DicomSlice>,
}

impl ScanVolume {
    /// Build a volume from named slices. The names only break ordering ties.
    pub fn from_slices(mut named: Vec<(String, DicomSlice)>) -> Result<Self, DicomError> {
        let Some((_, first)) = named.first() else {
            return Err(DicomError::EmptyVolume(Default::default()));
        };
        let (patient_id, rows, cols) = (first.patient_id().to_string(), first.rows(), first.cols());
        for (name, s) in &named {
            if s.patient_id() != patient_id {
                return Err(DicomError::MixedPatients {
                    expected: patient_id,
                    found: s.patient_id().to_string(),
                });
            }
            if (s.rows(), s.cols()) != (rows, cols) {
                return Err(DicomError::InconsistentGeometry {
                    expected_rows: rows,
                    expected_cols: cols,
                    rows: s.rows(),
                    cols: s.cols(),
                    file: name.clone(),
                });
            }
        }
        named.sort_by(|(na, a), (nb, b)| slice_order(a, b).then_with(|| na.cmp(nb)));
        Ok(ScanVolume {
            patient_id,
            rows,
            cols,
            slices: named.into_iter().map(|(_, s)| s).collect(),
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn rows(&self) -> u16 {
        self.rows
    }

    pub fn cols(&self) -> u16 {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice(&self, index: usize) -> Option<&DicomSlice> {
        self.slices.get(index)
    }

    pub fn slices(&self) -> &[DicomSlice] {
        &self.slices
    }
}

/// Instance number first, then slice location (absent locations last).
fn slice_order(a: &DicomSlice, b: &DicomSlice) -> Ordering {
    a.instance_number().cmp(&b.instance_number()).then_with(|| {
        match (a.slice_location(), b.slice_location()) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        }
    })
}

/// Load every DICOM file in `dir` (non-recursive) as one volume.
///
/// Files without the Part-10 magic are ignored; any other parse failure is
/// an error naming the file.
pub fn load_volume(dir: &Path) -> Result<ScanVolume, DicomError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            paths.push(entry.path());
        }
    }
    let parsed: Vec<Option<(String, DicomSlice)>> = paths
        .par_iter()
        .map(|path| {
            let bytes = fs::read(path)?;
            match parse_slice(&bytes) {
                Ok(slice) => {
                    let name = path
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    Ok(Some((name, slice)))
                }
                Err(DicomError::MissingMagic) => {
                    debug!("skipping non-DICOM file {}", path.display());
                    Ok(None)
                }
                Err(e) => Err(DicomError::File {
                    path: path.clone(),
                    source: Box::new(e),
                }),
            }
        })
        .collect::<Result<_, DicomError>>()?;
    let named: Vec<_> = parsed.into_iter().flatten().collect();
    if named.is_empty() {
        return Err(DicomError::EmptyVolume(dir.to_path_buf()));
    }
    ScanVolume::from_slices(named)
}
