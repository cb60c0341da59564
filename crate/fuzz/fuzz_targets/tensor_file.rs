#![no_main]
use ctforensics::tensor::{read_tensor, write_tensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = read_tensor(data) {
        let mut out = Vec::new();
        write_tensor(&mut out, &t.fingerprint, &t.data, &t.labels).unwrap();
        assert_eq!(out, data);
    }
});
