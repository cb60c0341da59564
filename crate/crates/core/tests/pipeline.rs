use ctforensics::learners::{ForestParams, LearnerParams, TreeParams};
use ctforensics::phantom::PhantomSpec;
use ctforensics::pipeline::{
    run, DataSource, ExperimentConfig, PipelineError, RegimeOverrides, Study,
};

fn small_phantom(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        n_patients: 10,
        slices_per_patient: 6,
        sites_per_patient: 3,
        dims: (128, 128),
        lesion_radius_px: (3.0, 5.0),
        fingerprint_radius_px: 10.0,
        ..PhantomSpec::default()
    }
}

fn small_config(study: Study, spec: PhantomSpec, out: &std::path::Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::new(study, DataSource::Phantom(spec));
    config.seed = 5;
    config.output_dir = out.to_path_buf();
    config.learner = LearnerParams::Tree(TreeParams::default());
    config.regime = RegimeOverrides {
        crop_size: Some(32),
        canvas: Some((72, 96)),
        ..RegimeOverrides::default()
    };
    config
}

#[test]
fn every_study_runs_and_reports_its_classes() {
    let out = tempfile::tempdir().unwrap();
    for study in Study::ALL {
        let config = small_config(study, small_phantom(7), out.path());
        let r = run(&config, None).unwrap_or_else(|e| panic!("{study}: {e}"));
        let classes: Vec<String> = r.report.per_class.keys().cloned().collect();
        let mut want = study.class_names();
        want.sort();
        assert_eq!(classes, want, "{study}");
        assert!((0.0..=1.0).contains(&r.report.accuracy));
        assert_eq!(r.report.run_metadata.study, study.as_str());
        for f in ["report.json", "model.bin", "model.json", "config.json"] {
            assert!(r.dir.join(f).exists(), "{study}: {f}");
        }
        let train = &r.report.run_metadata.train_class_counts;
        if study == Study::Multiclass {
            let n: Vec<usize> = train.values().copied().collect();
            assert!(n.iter().all(|&c| c == n[0] && c > 0), "{train:?}");
        }
    }
}

#[test]
fn augmentation_multiplies_training_rows() {
    let out = tempfile::tempdir().unwrap();
    let plain = run(
        &small_config(Study::Localized, small_phantom(3), out.path()),
        None,
    )
    .unwrap();
    let aug = run(
        &small_config(Study::LocalizedAug, small_phantom(3), out.path()),
        None,
    )
    .unwrap();
    let total = |r: &ctforensics::pipeline::RunOutput, train: bool| -> usize {
        let m = &r.report.run_metadata;
        if train {
            &m.train_class_counts
        } else {
            &m.test_class_counts
        }
        .values()
        .sum()
    };
    assert_eq!(total(&aug, true), 71 * total(&plain, true));
    assert_eq!(total(&aug, false), total(&plain, false));

    let mut config = small_config(Study::LocalizedAug, small_phantom(3), out.path());
    config.augment_test = true;
    let both = run(&config, None).unwrap();
    let test = |r: &ctforensics::pipeline::RunOutput, class: &str| {
        r.report.run_metadata.test_class_counts[class]
    };
    assert_eq!(test(&both, "UNTAMPERED"), test(&aug, "UNTAMPERED"));
    assert_eq!(test(&both, "TAMPERED"), 71 * test(&aug, "TAMPERED"));
}

#[test]
fn augment_test_needs_an_augmented_study() {
    let out = tempfile::tempdir().unwrap();
    let mut config = small_config(Study::Negspace, small_phantom(1), out.path());
    config.augment_test = true;
    assert!(matches!(run(&config, None), Err(PipelineError::Config(_))));
}

#[test]
fn cache_holds_one_tensor_per_role() {
    let out = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let config = small_config(Study::RawBinary, small_phantom(2), out.path());
    let first = run(&config, Some(cache.path())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(cache.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2, "{names:?}");
    assert!(names[0].ends_with("_test.tensor") && names[1].ends_with("_train.tensor"));
    let second = run(&config, Some(cache.path())).unwrap();
    assert_eq!(first.model_bytes, second.model_bytes);
}

#[test]
fn missing_manifest_fails() {
    let out = tempfile::tempdir().unwrap();
    let mut config = small_config(Study::Localized, small_phantom(1), out.path());
    config.data = DataSource::Manifest(out.path().join("absent.json"));
    assert!(run(&config, None).is_err());
}

#[test]
fn separability_is_monotone_in_signature_strength() {
    let out = tempfile::tempdir().unwrap();
    let mut mean = Vec::new();
    for strength in [1.0, 0.5, 0.0] {
        let mut sum = 0.0;
        for seed in 1..=5 {
            let spec = PhantomSpec {
                tamper_signature_strength: strength,
                ..small_phantom(seed)
            };
            let mut config = small_config(Study::Localized, spec, out.path());
            config.learner = LearnerParams::Forest(ForestParams {
                n_trees: 30,
                ..ForestParams::default()
            });
            sum += run(&config, None).unwrap().report.accuracy;
        }
        mean.push(sum / 5.0);
    }
    assert!(
        mean[0] >= mean[1] && mean[1] >= mean[2] && mean[0] > mean[2],
        "{mean:?}"
    );
}
