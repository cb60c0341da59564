use log::warn;

use super::{
    DicomError, DicomSlice, PixelRepresentation, Rescale, Tag, TagValue, Vr,
    EXPLICIT_VR_LITTLE_ENDIAN, IMPLICIT_VR_LITTLE_ENDIAN,
};

const PREAMBLE_LEN: usize = 128;
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

/// Non-fatal conditions encountered while parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// (0028,0103) absent; pixels interpreted as unsigned.
    MissingPixelRepresentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    ExplicitLittle,
    ImplicitLittle,
}

struct Element<'a> {
    tag: Tag,
    vr: Option<Vr>,
    offset: usize,
    declared_len: usize,
    value: &'a [u8],
}

/// Walks data elements without ever indexing past the input.
struct ElementReader<'a> {
    buf: &'a [u8],
    pos: usize,
    encoding: Encoding,
}

impl<'a> ElementReader<'a> {
    fn new(buf: &'a [u8], pos: usize, encoding: Encoding) -> Self {
        ElementReader { buf, pos, encoding }
    }

    fn peek_group(&self) -> Option<u16> {
        self.buf
            .get(self.pos..self.pos + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DicomError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DicomError::Truncated { offset: self.pos })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, DicomError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DicomError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn next_element(&mut self) -> Option<Result<Element<'a>, DicomError>> {
        if self.pos >= self.buf.len() {
            return None;
        }
        Some(self.read_element())
    }

    fn read_element(&mut self) -> Result<Element<'a>, DicomError> {
        let offset = self.pos;
        let tag = Tag(self.u16()?, self.u16()?);
        let (vr, len) = match self.encoding {
            Encoding::ExplicitLittle => {
                let code = self.take(2)?;
                let vr = Vr([code[0], code[1]]);
                if !vr.0.iter().all(u8::is_ascii_uppercase) {
                    return Err(DicomError::invalid(
                        tag,
                        format!(
                            "invalid VR bytes {:02X}{:02X} at offset {offset}",
                            code[0], code[1]
                        ),
                    ));
                }
                let len = if vr.has_long_length() {
                    self.take(2)?;
                    self.u32()?
                } else {
                    u32::from(self.u16()?)
                };
                (Some(vr), len)
            }
            Encoding::ImplicitLittle => (None, self.u32()?),
        };
        if len == UNDEFINED_LENGTH {
            let what = if tag == Tag::PIXEL_DATA {
                "encapsulated (compressed) pixel data"
            } else {
                "undefined-length element"
            };
            return Err(DicomError::UnsupportedTransferSyntax(format!(
                "{what} {tag}"
            )));
        }
        let declared_len = len as usize;
        let available = self.buf.len() - self.pos;
        if declared_len > available {
            if tag == Tag::PIXEL_DATA {
                // Reported by the caller, which knows the expected size.
                let value = &self.buf[self.pos..];
                self.pos = self.buf.len();
                return Ok(Element {
                    tag,
                    vr,
                    offset,
                    declared_len,
                    value,
                });
            }
            return Err(DicomError::Truncated { offset });
        }
        let value = self.take(declared_len)?;
        Ok(Element {
            tag,
            vr,
            offset,
            declared_len,
            value,
        })
    }
}

fn check_magic(bytes: &[u8]) -> Result<(), DicomError> {
    match bytes.get(PREAMBLE_LEN..PREAMBLE_LEN + 4) {
        Some(m) if m == b"DICM" => Ok(()),
        _ => Err(DicomError::MissingMagic),
    }
}

/// Reads the file meta group and returns the dataset encoding and the
/// offset at which the dataset starts.
fn read_meta(bytes: &[u8]) -> Result<(Encoding, usize), DicomError> {
    check_magic(bytes)?;
    let mut reader = ElementReader::new(bytes, PREAMBLE_LEN + 4, Encoding::ExplicitLittle);
    let mut syntax = None;
    while reader.peek_group() == Some(0x0002) {
        let el = reader.read_element()?;
        if el.tag == Tag::TRANSFER_SYNTAX_UID {
            syntax = Some(trim_text(el.value).to_string());
        }
    }
    let syntax = syntax.ok_or(DicomError::MissingRequiredTag(Tag::TRANSFER_SYNTAX_UID))?;
    let encoding = match syntax.as_str() {
        EXPLICIT_VR_LITTLE_ENDIAN => Encoding::ExplicitLittle,
        IMPLICIT_VR_LITTLE_ENDIAN => Encoding::ImplicitLittle,
        other => return Err(DicomError::UnsupportedTransferSyntax(other.to_string())),
    };
    Ok((encoding, reader.pos))
}

/// Every element of a Part-10 file, meta group included, in file order.
///
/// Sequences are returned as opaque payloads. Useful for dumping files and
/// for tests that need to inspect the encoded stream.
pub fn read_elements(bytes: &[u8]) -> Result<Vec<TagValue>, DicomError> {
    let (encoding, start) = read_meta(bytes)?;
    let mut out = Vec::new();
    let mut meta = ElementReader::new(bytes, PREAMBLE_LEN + 4, Encoding::ExplicitLittle);
    while meta.pos < start {
        let el = meta.read_element()?;
        out.push(to_tag_value(&el));
    }
    let mut reader = ElementReader::new(bytes, start, encoding);
    while let Some(el) = reader.next_element() {
        let el = el?;
        if el.value.len() != el.declared_len {
            return Err(DicomError::Truncated { offset: el.offset });
        }
        out.push(to_tag_value(&el));
    }
    Ok(out)
}

fn to_tag_value(el: &Element<'_>) -> TagValue {
    TagValue {
        tag: el.tag,
        vr: el.vr.unwrap_or_else(|| implicit_vr(el.tag)),
        payload: el.value.to_vec(),
    }
}

/// VR dictionary for the tags this codec interprets; used under the
/// implicit transfer syntax.
fn implicit_vr(tag: Tag) -> Vr {
    match tag {
        Tag::PATIENT_ID => Vr::LO,
        Tag::INSTANCE_NUMBER => Vr::IS,
        Tag::SLICE_LOCATION | Tag::RESCALE_INTERCEPT | Tag::RESCALE_SLOPE => Vr::DS,
        Tag::ROWS
        | Tag::COLUMNS
        | Tag::BITS_ALLOCATED
        | Tag::BITS_STORED
        | Tag::HIGH_BIT
        | Tag::PIXEL_REPRESENTATION
        | Tag::SAMPLES_PER_PIXEL => Vr::US,
        Tag::PIXEL_DATA => Vr::OW,
        Tag::SOP_CLASS_UID | Tag::SOP_INSTANCE_UID => Vr::UI,
        Tag::MODALITY | Tag::PHOTOMETRIC_INTERPRETATION => Vr::CS,
        _ => Vr::UN,
    }
}

/// Parse one CT slice, logging any warnings.
pub fn parse_slice(bytes: &[u8]) -> Result<DicomSlice, DicomError> {
    let (slice, warnings) = parse_slice_with_warnings(bytes)?;
    for w in warnings {
        match w {
            ParseWarning::MissingPixelRepresentation => warn!(
                "patient {} instance {}: PixelRepresentation absent, assuming unsigned",
                slice.patient_id(),
                slice.instance_number()
            ),
        }
    }
    Ok(slice)
}

#[derive(Default)]
struct Fields<'a> {
    patient_id: Option<&'a [u8]>,
    instance_number: Option<&'a [u8]>,
    slice_location: Option<&'a [u8]>,
    rows: Option<&'a [u8]>,
    cols: Option<&'a [u8]>,
    bits_allocated: Option<&'a [u8]>,
    pixel_representation: Option<&'a [u8]>,
    intercept: Option<&'a [u8]>,
    slope: Option<&'a [u8]>,
    pixel_data: Option<(&'a [u8], usize)>,
}

/// Parse one CT slice and return the non-fatal warnings alongside it.
pub fn parse_slice_with_warnings(
    bytes: &[u8],
) -> Result<(DicomSlice, Vec<ParseWarning>), DicomError> {
    let (encoding, start) = read_meta(bytes)?;
    let mut reader = ElementReader::new(bytes, start, encoding);
    let mut f = Fields::default();
    while let Some(el) = reader.next_element() {
        let el = el?;
        let slot = match el.tag {
            Tag::PATIENT_ID => &mut f.patient_id,
            Tag::INSTANCE_NUMBER => &mut f.instance_number,
            Tag::SLICE_LOCATION => &mut f.slice_location,
            Tag::ROWS => &mut f.rows,
            Tag::COLUMNS => &mut f.cols,
            Tag::BITS_ALLOCATED => &mut f.bits_allocated,
            Tag::PIXEL_REPRESENTATION => &mut f.pixel_representation,
            Tag::RESCALE_INTERCEPT => &mut f.intercept,
            Tag::RESCALE_SLOPE => &mut f.slope,
            Tag::PIXEL_DATA => {
                if f.pixel_data.is_none() {
                    f.pixel_data = Some((el.value, el.declared_len));
                }
                continue;
            }
            _ => continue,
        };
        if slot.is_none() {
            *slot = Some(el.value);
        }
    }

    let patient_id = trim_text(required(f.patient_id, Tag::PATIENT_ID)?).to_string();
    let instance_number = parse_is(
        Tag::INSTANCE_NUMBER,
        required(f.instance_number, Tag::INSTANCE_NUMBER)?,
    )?;
    let slice_location = match f.slice_location {
        Some(v) if !trim_text(v).is_empty() => Some(parse_ds(Tag::SLICE_LOCATION, v)?),
        _ => None,
    };
    let rows = parse_us(Tag::ROWS, required(f.rows, Tag::ROWS)?)?;
    let cols = parse_us(Tag::COLUMNS, required(f.cols, Tag::COLUMNS)?)?;
    let bits = parse_us(
        Tag::BITS_ALLOCATED,
        required(f.bits_allocated, Tag::BITS_ALLOCATED)?,
    )?;
    if bits != 16 {
        return Err(DicomError::UnsupportedPixelFormat(format!(
            "BitsAllocated = {bits}, only 16 is supported"
        )));
    }
    let mut warnings = Vec::new();
    let representation = match f.pixel_representation {
        Some(v) => {
            let code = parse_us(Tag::PIXEL_REPRESENTATION, v)?;
            PixelRepresentation::from_code(code).ok_or_else(|| {
                DicomError::invalid(Tag::PIXEL_REPRESENTATION, format!("unknown code {code}"))
            })?
        }
        None => {
            warnings.push(ParseWarning::MissingPixelRepresentation);
            PixelRepresentation::Unsigned
        }
    };
    let intercept = parse_ds(
        Tag::RESCALE_INTERCEPT,
        required(f.intercept, Tag::RESCALE_INTERCEPT)?,
    )?;
    let slope = parse_ds(Tag::RESCALE_SLOPE, required(f.slope, Tag::RESCALE_SLOPE)?)?;
    let rescale = Rescale::new(slope, intercept)?;

    let (data, declared) = f
        .pixel_data
        .ok_or(DicomError::MissingRequiredTag(Tag::PIXEL_DATA))?;
    let expected = usize::from(rows) * usize::from(cols) * 2;
    if declared != expected || data.len() != expected {
        return Err(DicomError::PixelLengthMismatch {
            expected,
            actual: data.len(),
        });
    }
    let pixels = data
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();

    let slice = DicomSlice::new(
        patient_id,
        instance_number,
        rows,
        cols,
        representation,
        rescale,
        pixels,
    )?
    .with_slice_location(slice_location)?;
    Ok((slice, warnings))
}

fn required(v: Option<&[u8]>, tag: Tag) -> Result<&[u8], DicomError> {
    v.ok_or(DicomError::MissingRequiredTag(tag))
}

fn trim_text(v: &[u8]) -> &str {
    let s = match std::str::from_utf8(v) {
        Ok(s) => s,
        Err(e) => std::str::from_utf8(&v[..e.valid_up_to()]).unwrap_or(""),
    };
    s.trim_matches(|c: char| c == ' ' || c == '\0')
}

fn parse_us(tag: Tag, v: &[u8]) -> Result<u16, DicomError> {
    match v {
        [a, b, ..] => Ok(u16::from_le_bytes([*a, *b])),
        _ => Err(DicomError::invalid(
            tag,
            format!("US value of {} bytes", v.len()),
        )),
    }
}

fn first_value(tag: Tag, v: &[u8]) -> Result<&str, DicomError> {
    let s = std::str::from_utf8(v).map_err(|_| DicomError::invalid(tag, "value is not ASCII"))?;
    // Multi-valued strings: only the first value is meaningful here.
    let first = s.split('\\').next().unwrap_or("");
    Ok(first.trim_matches(|c: char| c == ' ' || c == '\0'))
}

fn parse_ds(tag: Tag, v: &[u8]) -> Result<f64, DicomError> {
    let s = first_value(tag, v)?;
    let value: f64 = s
        .parse()
        .map_err(|_| DicomError::invalid(tag, format!("not a decimal string: {s:?}")))?;
    if !value.is_finite() {
        return Err(DicomError::invalid(tag, format!("non-finite value {s:?}")));
    }
    Ok(value)
}

fn parse_is(tag: Tag, v: &[u8]) -> Result<u32, DicomError> {
    let s = first_value(tag, v)?;
    let s = s.strip_prefix('+').unwrap_or(s);
    s.parse()
        .map_err(|_| DicomError::invalid(tag, format!("not a non-negative integer: {s:?}")))
}
