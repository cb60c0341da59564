#![no_main]
use ctforensics::learners::{read_model, write_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = read_model(data) {
        assert_eq!(read_model(&write_model(&model)).unwrap(), model);
    }
});
