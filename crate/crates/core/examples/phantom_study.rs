//! Run one study on a freshly generated phantom and print the accuracy.
//!
//! `cargo run --release --example phantom_study -- NEGSPACE_AUG 1.0 [seed] [key=value,...]`

use std::time::Instant;

use ctforensics::phantom::PhantomSpec;
use ctforensics::pipeline::{run, DataSource, ExperimentConfig, Study};

fn main() {
    let mut args = std::env::args().skip(1);
    let study: Study = args
        .next()
        .as_deref()
        .unwrap_or("LOCALIZED_AUG")
        .parse()
        .expect("study");
    let strength: f64 = args.next().map_or(1.0, |s| s.parse().expect("strength"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let mut table = toml::Table::new();
    for pair in args
        .next()
        .unwrap_or_default()
        .split(',')
        .filter(|p| !p.is_empty())
    {
        let (k, v) = pair.split_once('=').expect("key=value");
        let v: toml::Table = toml::from_str(&format!("v = {v}")).expect("value");
        table.insert(k.to_string(), v["v"].clone());
    }
    table.insert("seed".into(), (seed as i64).into());
    table.insert("tamper_signature_strength".into(), strength.into());
    let spec: PhantomSpec = table.try_into().expect("phantom overrides");
    let mut config = ExperimentConfig::new(study, DataSource::Phantom(spec));
    config.seed = seed;
    config.output_dir = std::env::temp_dir().join("ctforensics-phantom-study");
    let t = Instant::now();
    let out = run(&config, None).expect("run");
    let r = &out.report;
    println!(
        "{study} strength={strength} seed={seed} accuracy={:.4} test={} confusion={:?} elapsed={:.1}s",
        r.accuracy,
        r.confusion.total(),
        r.confusion.counts,
        t.elapsed().as_secs_f64()
    );
}
