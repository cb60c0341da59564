#![no_main]
use ctforensics::dicom::{parse_slice, write_slice};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(slice) = parse_slice(data) {
        let again = parse_slice(&write_slice(&slice)).expect("re-encoded slice parses");
        assert_eq!(again, slice);
    }
});
