#![no_main]
use ctforensics::cohort::CohortManifest;
use ctforensics::evalkit::MetricsReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = CohortManifest::from_json(text) {
        assert_eq!(CohortManifest::from_json(&m.to_json()).unwrap(), m);
    }
    let _ = MetricsReport::from_json(text);
});
