use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Annotation, AnnotationTag, CohortError};

pub const ANNOTATION_HEADER: [&str; 5] = ["patient_id", "slice", "x", "y", "tag"];

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, CohortError> {
    let file = File::open(path).map_err(|source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_annotations(file)
}

/// Parse `patient_id,slice,x,y,tag` rows. Line numbers in errors count the
/// header as line 1.
pub fn parse_annotations<R: Read>(input: R) -> Result<Vec<Annotation>, CohortError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = reader.headers().map_err(|e| CohortError::MalformedRow {
        line: 1,
        reason: e.to_string(),
    })?;
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != ANNOTATION_HEADER {
        return Err(CohortError::MalformedRow {
            line: 1,
            reason: format!(
                "expected header {}, found {}",
                ANNOTATION_HEADER.join(","),
                found.join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CohortError::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 5 {
            return Err(CohortError::MalformedRow {
                line,
                reason: format!("expected 5 fields, found {}", record.len()),
            });
        }
        let malformed = |what: &str, v: &str| CohortError::MalformedRow {
            line,
            reason: format!("{what} {v:?}"),
        };
        let patient_id = record[0].trim();
        if patient_id.is_empty() {
            return Err(malformed("empty patient id", patient_id));
        }
        let slice_index = record[1]
            .trim()
            .parse()
            .map_err(|_| malformed("bad slice index", &record[1]))?;
        let x = record[2]
            .trim()
            .parse()
            .map_err(|_| malformed("bad x", &record[2]))?;
        let y = record[3]
            .trim()
            .parse()
            .map_err(|_| malformed("bad y", &record[3]))?;
        let tag =
            AnnotationTag::parse(record[4].trim()).ok_or_else(|| CohortError::UnknownTag {
                line,
                tag: record[4].to_string(),
            })?;
        out.push(Annotation {
            patient_id: patient_id.to_string(),
            slice_index,
            x,
            y,
            tag,
        });
    }
    Ok(out)
}

/// Write annotations as UTF-8 CSV with LF line endings.
pub fn write_annotations<W: Write>(out: W, annotations: &[Annotation]) -> Result<(), CohortError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    writer.write_record(ANNOTATION_HEADER)?;
    for a in annotations {
        writer.write_record([
            a.patient_id.as_str(),
            &a.slice_index.to_string(),
            &a.x.to_string(),
            &a.y.to_string(),
            a.tag.as_str(),
        ])?;
    }
    writer.flush().map_err(|source| CohortError::Io {
        path: Default::default(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_row() {
        let csv = "patient_id,slice,x,y,tag\nP001,42,251,312,FM\n";
        let a = parse_annotations(csv.as_bytes()).unwrap();
        assert_eq!(
            a,
            vec![Annotation {
                patient_id: "P001".into(),
                slice_index: 42,
                x: 251,
                y: 312,
                tag: AnnotationTag::Fm
            }]
        );
    }

    #[test]
    fn unknown_tag_reports_line() {
        let csv = "patient_id,slice,x,y,tag\nP001,42,251,312,XX\n";
        match parse_annotations(csv.as_bytes()) {
            Err(CohortError::UnknownTag { line, tag }) => {
                assert_eq!(line, 2);
                assert_eq!(tag, "XX");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows() {
        for csv in [
            "patient_id,slice,x,y,tag\nP1,-3,1,1,FB\n",
            "patient_id,slice,x,y,tag\nP1,3,1,FB\n",
            "patient_id,slice,x,y,tag\nP1,3,a,1,FB\n",
            "pid,slice,x,y,tag\nP1,3,1,1,FB\n",
        ] {
            assert!(
                matches!(
                    parse_annotations(csv.as_bytes()),
                    Err(CohortError::MalformedRow { .. })
                ),
                "{csv}"
            );
        }
        let csv = "patient_id,slice,x,y,tag\nP1,1,1,1,FB\nP1,x,1,1,FB\n";
        assert!(matches!(
            parse_annotations(csv.as_bytes()),
            Err(CohortError::MalformedRow { line: 3, .. })
        ));
    }

    #[test]
    fn write_then_parse() {
        let a = vec![
            Annotation {
                patient_id: "A".into(),
                slice_index: 0,
                x: -1,
                y: 7,
                tag: AnnotationTag::Nodule,
            },
            Annotation {
                patient_id: "B,1".into(),
                slice_index: 9,
                x: 3,
                y: 4,
                tag: AnnotationTag::Fb,
            },
        ];
        let mut buf = Vec::new();
        write_annotations(&mut buf, &a).unwrap();
        assert!(!buf.contains(&b'\r'));
        assert_eq!(parse_annotations(buf.as_slice()).unwrap(), a);
    }
}
