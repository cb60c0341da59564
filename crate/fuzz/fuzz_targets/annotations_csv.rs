#![no_main]
use ctforensics::cohort::{parse_annotations, write_annotations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_annotations(data) {
        let mut out = Vec::new();
        write_annotations(&mut out, &rows).unwrap();
        assert_eq!(parse_annotations(out.as_slice()).unwrap(), rows);
    }
});
