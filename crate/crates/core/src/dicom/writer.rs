use sha2::{Digest, Sha256};

use super::{DicomSlice, Tag, Vr, CT_IMAGE_STORAGE, EXPLICIT_VR_LITTLE_ENDIAN};

const IMPLEMENTATION_CLASS_UID: &str = "2.25.184390285741938274650291837465019283";

/// Encode a slice as Explicit VR Little Endian Part-10 bytes.
///
/// Output is a pure function of the slice: UIDs are derived from the
/// patient id and instance number, so writing the same slice twice yields
/// identical bytes.
pub fn write_slice(slice: &DicomSlice) -> Vec<u8> {
    let instance_uid = derived_uid(&[
        b"instance",
        slice.patient_id().as_bytes(),
        &slice.instance_number().to_le_bytes(),
    ]);
    let study_uid = derived_uid(&[b"study", slice.patient_id().as_bytes()]);
    let series_uid = derived_uid(&[b"series", slice.patient_id().as_bytes()]);

    let mut meta = Vec::with_capacity(256);
    put_element(&mut meta, Tag::FILE_META_VERSION, Vr::OB, &[0x00, 0x01]);
    put_element(
        &mut meta,
        Tag::MEDIA_STORAGE_SOP_CLASS_UID,
        Vr::UI,
        &uid(CT_IMAGE_STORAGE),
    );
    put_element(
        &mut meta,
        Tag::MEDIA_STORAGE_SOP_INSTANCE_UID,
        Vr::UI,
        &uid(&instance_uid),
    );
    put_element(
        &mut meta,
        Tag::TRANSFER_SYNTAX_UID,
        Vr::UI,
        &uid(EXPLICIT_VR_LITTLE_ENDIAN),
    );
    put_element(
        &mut meta,
        Tag::IMPLEMENTATION_CLASS_UID,
        Vr::UI,
        &uid(IMPLEMENTATION_CLASS_UID),
    );

    let pixel_bytes = slice.raw_pixels().len() * 2;
    let mut out = Vec::with_capacity(132 + 12 + meta.len() + 512 + pixel_bytes);
    out.extend_from_slice(&[0u8; 128]);
    out.extend_from_slice(b"DICM");
    put_element(
        &mut out,
        Tag::FILE_META_GROUP_LENGTH,
        Vr::UL,
        &(meta.len() as u32).to_le_bytes(),
    );
    out.extend_from_slice(&meta);

    put_element(&mut out, Tag::SOP_CLASS_UID, Vr::UI, &uid(CT_IMAGE_STORAGE));
    put_element(&mut out, Tag::SOP_INSTANCE_UID, Vr::UI, &uid(&instance_uid));
    put_element(&mut out, Tag::MODALITY, Vr::CS, &text("CT"));
    put_element(&mut out, Tag::PATIENT_ID, Vr::LO, &text(slice.patient_id()));
    put_element(&mut out, Tag::STUDY_INSTANCE_UID, Vr::UI, &uid(&study_uid));
    put_element(
        &mut out,
        Tag::SERIES_INSTANCE_UID,
        Vr::UI,
        &uid(&series_uid),
    );
    put_element(
        &mut out,
        Tag::INSTANCE_NUMBER,
        Vr::IS,
        &text(&slice.instance_number().to_string()),
    );
    if let Some(loc) = slice.slice_location() {
        put_element(
            &mut out,
            Tag::SLICE_LOCATION,
            Vr::DS,
            &text(&format_ds(loc)),
        );
    }
    put_element(
        &mut out,
        Tag::SAMPLES_PER_PIXEL,
        Vr::US,
        &1u16.to_le_bytes(),
    );
    put_element(
        &mut out,
        Tag::PHOTOMETRIC_INTERPRETATION,
        Vr::CS,
        &text("MONOCHROME2"),
    );
    put_element(&mut out, Tag::ROWS, Vr::US, &slice.rows().to_le_bytes());
    put_element(&mut out, Tag::COLUMNS, Vr::US, &slice.cols().to_le_bytes());
    put_element(&mut out, Tag::BITS_ALLOCATED, Vr::US, &16u16.to_le_bytes());
    put_element(&mut out, Tag::BITS_STORED, Vr::US, &16u16.to_le_bytes());
    put_element(&mut out, Tag::HIGH_BIT, Vr::US, &15u16.to_le_bytes());
    put_element(
        &mut out,
        Tag::PIXEL_REPRESENTATION,
        Vr::US,
        &slice.pixel_representation().code().to_le_bytes(),
    );
    let rescale = slice.rescale();
    put_element(
        &mut out,
        Tag::RESCALE_INTERCEPT,
        Vr::DS,
        &text(&format_ds(rescale.intercept)),
    );
    put_element(
        &mut out,
        Tag::RESCALE_SLOPE,
        Vr::DS,
        &text(&format_ds(rescale.slope)),
    );

    let mut pixels = Vec::with_capacity(pixel_bytes);
    for word in slice.raw_pixels() {
        pixels.extend_from_slice(&word.to_le_bytes());
    }
    put_element(&mut out, Tag::PIXEL_DATA, Vr::OW, &pixels);
    out
}

fn put_element(out: &mut Vec<u8>, tag: Tag, vr: Vr, value: &[u8]) {
    debug_assert!(value.len().is_multiple_of(2), "values are padded to even length");
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(&vr.0);
    if vr.has_long_length() {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

fn text(s: &str) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(b' ');
    }
    v
}

fn uid(s: &str) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(0);
    }
    v
}

/// Decimal string for a DS value.
///
/// Uses the shortest representation that parses back to the same `f64`,
/// picking positional or exponent notation, whichever is shorter. Values
/// needing more than 16 characters are still written exactly rather than
/// rounded.
pub(crate) fn format_ds(v: f64) -> String {
    let plain = format!("{v}");
    if plain.len() <= 16 {
        return plain;
    }
    let exp = format!("{v:e}");
    if exp.len() < plain.len() {
        exp
    } else {
        plain
    }
}

fn derived_uid(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 16];
    bytes.copy_from_slice(&digest[..16]);
    // 2.25 UIDs are decimal renderings of a 128-bit integer.
    format!("2.25.{}", u128::from_be_bytes(bytes))
}
