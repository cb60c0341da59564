//! Minimal DICOM Part-10 codec for uncompressed CT slices.
//!
//! Only Explicit VR Little Endian and Implicit VR Little Endian transfer
//! syntaxes are understood. Everything outside that subset surfaces as a
//! typed [`DicomError`]; the reader never trusts a declared length without
//! checking it against the remaining input.

mod reader;
mod slice;
mod volume;
mod writer;

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub use reader::{parse_slice, parse_slice_with_warnings, read_elements, ParseWarning};
pub use slice::{DicomSlice, PixelRepresentation, Rescale};
pub use volume::{load_volume, ScanVolume};
pub use writer::write_slice;

pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";
pub const IMPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2";
pub const CT_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.2";

/// A (group, element) attribute tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl Tag {
    pub const FILE_META_GROUP_LENGTH: Tag = Tag(0x0002, 0x0000);
    pub const FILE_META_VERSION: Tag = Tag(0x0002, 0x0001);
    pub const MEDIA_STORAGE_SOP_CLASS_UID: Tag = Tag(0x0002, 0x0002);
    pub const MEDIA_STORAGE_SOP_INSTANCE_UID: Tag = Tag(0x0002, 0x0003);
    pub const TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
    pub const IMPLEMENTATION_CLASS_UID: Tag = Tag(0x0002, 0x0012);
    pub const SOP_CLASS_UID: Tag = Tag(0x0008, 0x0016);
    pub const SOP_INSTANCE_UID: Tag = Tag(0x0008, 0x0018);
    pub const MODALITY: Tag = Tag(0x0008, 0x0060);
    pub const PATIENT_ID: Tag = Tag(0x0010, 0x0020);
    pub const STUDY_INSTANCE_UID: Tag = Tag(0x0020, 0x000D);
    pub const SERIES_INSTANCE_UID: Tag = Tag(0x0020, 0x000E);
    pub const INSTANCE_NUMBER: Tag = Tag(0x0020, 0x0013);
    pub const SLICE_LOCATION: Tag = Tag(0x0020, 0x1041);
    pub const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    pub const PHOTOMETRIC_INTERPRETATION: Tag = Tag(0x0028, 0x0004);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const BITS_STORED: Tag = Tag(0x0028, 0x0101);
    pub const HIGH_BIT: Tag = Tag(0x0028, 0x0102);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
    pub const RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

/// Two-character value representation code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vr(pub [u8; 2]);

impl Vr {
    pub const AE: Vr = Vr(*b"AE");
    pub const CS: Vr = Vr(*b"CS");
    pub const DS: Vr = Vr(*b"DS");
    pub const IS: Vr = Vr(*b"IS");
    pub const LO: Vr = Vr(*b"LO");
    pub const OB: Vr = Vr(*b"OB");
    pub const OW: Vr = Vr(*b"OW");
    pub const SQ: Vr = Vr(*b"SQ");
    pub const UI: Vr = Vr(*b"UI");
    pub const UL: Vr = Vr(*b"UL");
    pub const UN: Vr = Vr(*b"UN");
    pub const US: Vr = Vr(*b"US");

    /// VRs whose explicit encoding uses two reserved bytes and a 32-bit length.
    pub fn has_long_length(self) -> bool {
        matches!(
            &self.0,
            b"OB"
                | b"OD"
                | b"OF"
                | b"OL"
                | b"OV"
                | b"OW"
                | b"SQ"
                | b"SV"
                | b"UC"
                | b"UN"
                | b"UR"
                | b"UT"
                | b"UV"
        )
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).unwrap_or("??")
    }
}

impl fmt::Display for Vr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One encoded data element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagValue {
    pub tag: Tag,
    pub vr: Vr,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum DicomError {
    #[error("missing DICM magic: not a DICOM Part-10 file")]
    MissingMagic,
    #[error("unsupported transfer syntax or encoding: {0}")]
    UnsupportedTransferSyntax(String),
    #[error("missing required tag {0}")]
    MissingRequiredTag(Tag),
    #[error("pixel data length mismatch: expected {expected} bytes, found {actual}")]
    PixelLengthMismatch { expected: usize, actual: usize },
    #[error("element at offset {offset} runs past the end of the data")]
    Truncated { offset: usize },
    #[error("invalid value for {tag}: {reason}")]
    InvalidValue { tag: Tag, reason: String },
    #[error("unsupported pixel format: {0}")]
    UnsupportedPixelFormat(String),
    #[error("no DICOM slices found in {}", .0.display())]
    EmptyVolume(PathBuf),
    #[error("inconsistent geometry: {expected_rows}x{expected_cols} vs {rows}x{cols} in {file}")]
    InconsistentGeometry {
        expected_rows: u16,
        expected_cols: u16,
        rows: u16,
        cols: u16,
        file: String,
    },
    #[error("mixed patients in one volume: {expected} and {found}")]
    MixedPatients { expected: String, found: String },
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<DicomError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DicomError {
    pub(crate) fn invalid(tag: Tag, reason: impl Into<String>) -> Self {
        DicomError::InvalidValue {
            tag,
            reason: reason.into(),
        }
    }
}
