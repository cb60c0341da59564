//! Converters from the annotation layouts shipped by public sources to the
//! native `patient_id,slice,x,y,tag` CSV.
//!
//! Rows that cannot be converted are reported with their line number and
//! skipped; conversion itself only fails when the header is unusable.
//!
//! | format   | columns used                              | mapping                                  |
//! |----------|-------------------------------------------|------------------------------------------|
//! | native   | `patient_id,slice,x,y,tag`                | identity                                 |
//! | ctgan    | `type,uuid,slice,x,y`                     | FB→FB, FM→FM, TB/TM→NODULE; uuid→patient |
//! | lidc     | `case,slice no.,x loc.,y loc.`            | `LIDC-IDRI-%04d`, slice no. − 1, NODULE  |
//! | phantom  | phantom `ground_truth.json`               | sites copied verbatim                    |

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Annotation, AnnotationTag, CohortError};
use crate::phantom::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Native,
    Ctgan,
    Lidc,
    Phantom,
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(SourceFormat::Native),
            "ctgan" => Ok(SourceFormat::Ctgan),
            "lidc" => Ok(SourceFormat::Lidc),
            "phantom" => Ok(SourceFormat::Phantom),
            other => Err(format!(
                "unknown source format {other:?} (native, ctgan, lidc, phantom)"
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConversionReport {
    pub annotations: Vec<Annotation>,
    /// (line, message) for every skipped row.
    pub skipped: Vec<(u64, String)>,
}

pub fn convert_annotations(
    format: SourceFormat,
    input: &[u8],
) -> Result<ConversionReport, CohortError> {
    match format {
        SourceFormat::Phantom => {
            let truth: GroundTruth = serde_json::from_slice(input)?;
            Ok(ConversionReport {
                annotations: truth.annotations(),
                skipped: Vec::new(),
            })
        }
        SourceFormat::Native => {
            convert_csv(input, &["patient_id", "slice", "x", "y", "tag"], |f| {
                let tag =
                    AnnotationTag::parse(f[4]).ok_or_else(|| format!("unknown tag {:?}", f[4]))?;
                row(f[0].to_string(), f[1], f[2], f[3], tag, 0)
            })
        }
        SourceFormat::Ctgan => convert_csv(input, &["uuid", "slice", "x", "y", "type"], |f| {
            let tag = match f[4].to_ascii_uppercase().as_str() {
                "FB" => AnnotationTag::Fb,
                "FM" => AnnotationTag::Fm,
                "TB" | "TM" => AnnotationTag::Nodule,
                other => return Err(format!("unknown type {other:?}")),
            };
            row(f[0].to_string(), f[1], f[2], f[3], tag, 0)
        }),
        SourceFormat::Lidc => convert_csv(input, &["case", "slice no.", "x loc.", "y loc."], |f| {
            let case: u32 = f[0].parse().map_err(|_| format!("bad case {:?}", f[0]))?;
            row(
                format!("LIDC-IDRI-{case:04}"),
                f[1],
                f[2],
                f[3],
                AnnotationTag::Nodule,
                1,
            )
        }),
    }
}

fn row(
    patient_id: String,
    slice: &str,
    x: &str,
    y: &str,
    tag: AnnotationTag,
    slice_base: usize,
) -> Result<Annotation, String> {
    if patient_id.is_empty() {
        return Err("empty patient id".into());
    }
    let slice: usize = slice.parse().map_err(|_| format!("bad slice {slice:?}"))?;
    let slice_index = slice
        .checked_sub(slice_base)
        .ok_or_else(|| format!("slice {slice} below base {slice_base}"))?;
    let x = parse_coord(x)?;
    let y = parse_coord(y)?;
    Ok(Annotation {
        patient_id,
        slice_index,
        x,
        y,
        tag,
    })
}

/// Integer or integral decimal pixel coordinate.
fn parse_coord(v: &str) -> Result<i64, String> {
    if let Ok(i) = v.parse::<i64>() {
        return Ok(i);
    }
    let f: f64 = v.parse().map_err(|_| format!("bad coordinate {v:?}"))?;
    if !f.is_finite() || f.abs() > 1e9 {
        return Err(format!("bad coordinate {v:?}"));
    }
    Ok(f.round() as i64)
}

fn convert_csv(
    input: &[u8],
    columns: &[&str],
    map: impl Fn(&[&str]) -> Result<Annotation, String>,
) -> Result<ConversionReport, CohortError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = reader.headers().map_err(|e| CohortError::MalformedRow {
        line: 1,
        reason: e.to_string(),
    })?;
    let position: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
        .collect();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            position
                .get(*c)
                .copied()
                .ok_or_else(|| CohortError::MalformedRow {
                    line: 1,
                    reason: format!("missing column {c:?}"),
                })
        })
        .collect::<Result<_, _>>()?;

    let mut report = ConversionReport::default();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.skipped.push((line, e.to_string()));
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fields: Option<Vec<&str>> = idx.iter().map(|&i| record.get(i).map(str::trim)).collect();
        let Some(fields) = fields else {
            report
                .skipped
                .push((line, format!("expected at least {} fields", idx.len())));
            continue;
        };
        match map(&fields) {
            Ok(a) => report.annotations.push(a),
            Err(msg) => report.skipped.push((line, msg)),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{parse_annotations, write_annotations};

    #[test]
    fn native_identity() {
        let text = "patient_id,slice,x,y,tag\nP1,3,10,20,FB\nP2,0,5,6,NODULE\n";
        let r = convert_annotations(SourceFormat::Native, text.as_bytes()).unwrap();
        assert!(r.skipped.is_empty());
        let mut out = Vec::new();
        write_annotations(&mut out, &r.annotations).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
        let crlf = text.replace('\n', "\r\n");
        let r2 = convert_annotations(SourceFormat::Native, crlf.as_bytes()).unwrap();
        assert_eq!(r2.annotations, r.annotations);
    }

    #[test]
    fn malformed_rows_skipped_with_line() {
        let text = "patient_id,slice,x,y,tag\nP1,3,10,20,FB\nP1,zz,10,20,FB\nP1,4,1,2,QQ\nP1,5,1\nP2,1,1,1,FM\n";
        let r = convert_annotations(SourceFormat::Native, text.as_bytes()).unwrap();
        assert_eq!(r.annotations.len(), 2);
        assert_eq!(
            r.skipped.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![3, 4, 5]
        );
        let strict = parse_annotations(text.as_bytes());
        assert!(strict.is_err());
    }

    #[test]
    fn ctgan_mapping() {
        let text = "type,uuid,slice,x,y\nFM,1280,90,300,312\nTB,1337,41,200,150\nTM,1,2,3.0,4\n";
        let r = convert_annotations(SourceFormat::Ctgan, text.as_bytes()).unwrap();
        let tags: Vec<_> = r.annotations.iter().map(|a| a.tag).collect();
        assert_eq!(
            tags,
            vec![
                AnnotationTag::Fm,
                AnnotationTag::Nodule,
                AnnotationTag::Nodule
            ]
        );
        assert_eq!(r.annotations[0].patient_id, "1280");
        assert_eq!(r.annotations[2].x, 3);
    }

    #[test]
    fn lidc_mapping() {
        let text =
            "case,scan,roi,volume,eq. diam.,x loc.,y loc.,slice no.\n1,1,1,5000,20.0,317,367,87\n";
        let r = convert_annotations(SourceFormat::Lidc, text.as_bytes()).unwrap();
        assert_eq!(
            r.annotations,
            vec![Annotation {
                patient_id: "LIDC-IDRI-0001".into(),
                slice_index: 86,
                x: 317,
                y: 367,
                tag: AnnotationTag::Nodule
            }]
        );
    }

    #[test]
    fn missing_column_is_error() {
        let text = "a,b\n1,2\n";
        assert!(convert_annotations(SourceFormat::Ctgan, text.as_bytes()).is_err());
    }
}
