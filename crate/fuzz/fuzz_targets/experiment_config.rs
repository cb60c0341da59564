#![no_main]
use ctforensics::pipeline::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ExperimentConfig::from_toml(text) {
        let _ = config.hash();
        let _ = config.regime().expect("validated config has a regime");
    }
});
