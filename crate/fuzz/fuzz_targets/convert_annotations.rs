#![no_main]
use ctforensics::cohort::{convert_annotations, SourceFormat};
use libfuzzer_sys::fuzz_target;

const FORMATS: [SourceFormat; 4] = [
    SourceFormat::Native,
    SourceFormat::Ctgan,
    SourceFormat::Lidc,
    SourceFormat::Phantom,
];

fuzz_target!(|data: &[u8]| {
    let Some((&selector, rest)) = data.split_first() else {
        return;
    };
    let _ = convert_annotations(FORMATS[usize::from(selector) % FORMATS.len()], rest);
});
