use super::{DicomError, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PixelRepresentation {
    Unsigned,
    Signed,
}

impl PixelRepresentation {
    pub fn code(self) -> u16 {
        match self {
            PixelRepresentation::Unsigned => 0,
            PixelRepresentation::Signed => 1,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(PixelRepresentation::Unsigned),
            1 => Some(PixelRepresentation::Signed),
            _ => None,
        }
    }
}

/// Linear map from stored values to Hounsfield units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescale {
    pub slope: f64,
    pub intercept: f64,
}

impl Rescale {
    pub fn new(slope: f64, intercept: f64) -> Result<Self, DicomError> {
        if !slope.is_finite() || slope == 0.0 {
            return Err(DicomError::invalid(
                Tag::RESCALE_SLOPE,
                format!("slope must be finite and non-zero, got {slope}"),
            ));
        }
        if !intercept.is_finite() {
            return Err(DicomError::invalid(
                Tag::RESCALE_INTERCEPT,
                format!("intercept must be finite, got {intercept}"),
            ));
        }
        Ok(Rescale { slope, intercept })
    }

    /// The common CT calibration: stored 0 maps to -1024 HU.
    pub fn ct_default() -> Self {
        Rescale {
            slope: 1.0,
            intercept: -1024.0,
        }
    }

    #[inline]
    pub fn apply(&self, stored: i32) -> f64 {
        self.slope * f64::from(stored) + self.intercept
    }
}

/// One CT slice: identifying metadata, geometry, rescale and 16-bit stored
/// pixels in row-major order.
///
/// Construction validates every invariant, so a `DicomSlice` in hand is
/// always writable.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomSlice {
    patient_id: String,
    instance_number: u32,
    slice_location: Option<f64>,
    rows: u16,
    cols: u16,
    pixel_representation: PixelRepresentation,
    rescale: Rescale,
    pixels: Vec<u16>,
}

impl DicomSlice {
    /// `pixels` holds the raw 16-bit words; their interpretation follows
    /// `pixel_representation`.
    pub fn new(
        patient_id: impl Into<String>,
        instance_number: u32,
        rows: u16,
        cols: u16,
        pixel_representation: PixelRepresentation,
        rescale: Rescale,
        pixels: Vec<u16>,
    ) -> Result<Self, DicomError> {
        let patient_id = patient_id.into();
        validate_patient_id(&patient_id)?;
        if rows == 0 {
            return Err(DicomError::invalid(Tag::ROWS, "rows must be positive"));
        }
        if cols == 0 {
            return Err(DicomError::invalid(
                Tag::COLUMNS,
                "columns must be positive",
            ));
        }
        let rescale = Rescale::new(rescale.slope, rescale.intercept)?;
        let expected = usize::from(rows) * usize::from(cols);
        if pixels.len() != expected {
            return Err(DicomError::PixelLengthMismatch {
                expected: expected * 2,
                actual: pixels.len() * 2,
            });
        }
        Ok(DicomSlice {
            patient_id,
            instance_number,
            slice_location: None,
            rows,
            cols,
            pixel_representation,
            rescale,
            pixels,
        })
    }

    pub fn with_slice_location(mut self, location: Option<f64>) -> Result<Self, DicomError> {
        if let Some(loc) = location {
            if !loc.is_finite() {
                return Err(DicomError::invalid(
                    Tag::SLICE_LOCATION,
                    "slice location must be finite",
                ));
            }
        }
        self.slice_location = location;
        Ok(self)
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn instance_number(&self) -> u32 {
        self.instance_number
    }

    pub fn slice_location(&self) -> Option<f64> {
        self.slice_location
    }

    pub fn rows(&self) -> u16 {
        self.rows
    }

    pub fn cols(&self) -> u16 {
        self.cols
    }

    pub fn bits_allocated(&self) -> u16 {
        16
    }

    pub fn pixel_representation(&self) -> PixelRepresentation {
        self.pixel_representation
    }

    pub fn rescale(&self) -> Rescale {
        self.rescale
    }

    /// Raw stored words, row-major.
    pub fn raw_pixels(&self) -> &[u16] {
        &self.pixels
    }

    /// Stored value at a flat index, sign-interpreted.
    #[inline]
    pub fn stored(&self, index: usize) -> i32 {
        let word = self.pixels[index];
        match self.pixel_representation {
            PixelRepresentation::Unsigned => i32::from(word),
            PixelRepresentation::Signed => i32::from(word as i16),
        }
    }

    pub fn stored_values(&self) -> impl Iterator<Item = i32> + '_ {
        (0..self.pixels.len()).map(move |i| self.stored(i))
    }
}

fn validate_patient_id(id: &str) -> Result<(), DicomError> {
    let bad = |reason: &str| Err(DicomError::invalid(Tag::PATIENT_ID, reason));
    if id.is_empty() {
        return bad("patient id must not be empty");
    }
    if id.len() > 64 {
        return bad("patient id longer than 64 bytes");
    }
    if id.starts_with(' ') || id.ends_with(' ') {
        return bad("patient id has leading or trailing spaces");
    }
    if id
        .chars()
        .any(|c| c == '\\' || c.is_control() || !c.is_ascii())
    {
        return bad("patient id must be printable ASCII without backslashes");
    }
    Ok(())
}
