//! End-to-end experiment runs from a declarative config: data, sample
//! assembly, augmentation, training, evaluation and on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::{Array2, ShapeBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{augment_image, AugmentError, AugmentSpec};
use crate::cohort::{
    assemble_staged, balance, equalize_labels, split, AssemblyStage, CohortError, CohortManifest,
    Label, Sample, SplitPolicy,
};
use crate::evalkit::{evaluate, EvalError, MetricsReport, RunMetadata};
use crate::learners::{
    write_model, LearnerError, LearnerParams, ModelMetadata, TrainedModel, CONTAINER_VERSION,
};
use crate::phantom::{generate, PhantomError, PhantomSpec};
use crate::preprocess::{PreprocessError, PreprocessRegime, RegimeKind};
use crate::seeding::mix_seed;
use crate::tensor::{load_tensor, save_tensor, TensorError};

/// Environment variable naming the tensor cache directory.
pub const CACHE_ENV: &str = "CTFORENSICS_CACHE";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Study {
    RawBinary,
    Localized,
    LocalizedAug,
    Negspace,
    NegspaceAug,
    Multiclass,
}

impl Study {
    pub const ALL: [Study; 6] = [
        Study::RawBinary,
        Study::Localized,
        Study::LocalizedAug,
        Study::Negspace,
        Study::NegspaceAug,
        Study::Multiclass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Study::RawBinary => "RAW_BINARY",
            Study::Localized => "LOCALIZED",
            Study::LocalizedAug => "LOCALIZED_AUG",
            Study::Negspace => "NEGSPACE",
            Study::NegspaceAug => "NEGSPACE_AUG",
            Study::Multiclass => "MULTICLASS",
        }
    }

    pub fn regime_kind(self) -> RegimeKind {
        match self {
            Study::RawBinary => RegimeKind::Raw,
            Study::Localized | Study::LocalizedAug => RegimeKind::Localized,
            Study::Negspace | Study::NegspaceAug | Study::Multiclass => RegimeKind::Negspace,
        }
    }

    pub fn augmented(self) -> bool {
        matches!(
            self,
            Study::LocalizedAug | Study::NegspaceAug | Study::Multiclass
        )
    }

    pub fn multiclass(self) -> bool {
        self == Study::Multiclass
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = if self.multiclass() {
            &["UNTAMPERED", "FB", "FM"]
        } else {
            &["UNTAMPERED", "TAMPERED"]
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Class index of a sample label under this study.
    pub fn class_of(self, label: Label) -> usize {
        match (self.multiclass(), label) {
            (_, Label::Untampered) => 0,
            (false, _) | (true, Label::Fb) => 1,
            (true, Label::Fm) => 2,
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Study {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Study::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<&str> = Study::ALL.iter().map(|st| st.as_str()).collect();
                format!("unknown study {s:?}; expected one of {}", valid.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Path to a cohort manifest JSON.
    Manifest(PathBuf),
    Phantom(PhantomSpec),
}

/// Per-field replacements for the study's default regime.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeOverrides {
    pub window_low: Option<f64>,
    pub window_high: Option<f64>,
    pub crop_size: Option<usize>,
    pub canvas: Option<(usize, usize)>,
    pub body_threshold: Option<f32>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_split_policy() -> SplitPolicy {
    SplitPolicy::TrialBased
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: Study,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub regime: RegimeOverrides,
    #[serde(default)]
    pub learner: LearnerParams,
    #[serde(default)]
    pub augment: AugmentSpec,
    /// Also augment tampered test samples; augmented studies only.
    #[serde(default)]
    pub augment_test: bool,
    #[serde(default = "default_split_policy")]
    pub split_policy: SplitPolicy,
}

impl ExperimentConfig {
    pub fn new(study: Study, data: DataSource) -> Self {
        ExperimentConfig {
            study,
            seed: 0,
            output_dir: default_output_dir(),
            data,
            regime: RegimeOverrides::default(),
            learner: LearnerParams::default(),
            augment: AugmentSpec::default(),
            augment_test: false,
            split_policy: default_split_policy(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.regime()?;
        if let DataSource::Phantom(spec) = &self.data {
            spec.validate()?;
        }
        match &self.learner {
            LearnerParams::Tree(p) => p.validate()?,
            LearnerParams::Forest(p) => p.validate()?,
            LearnerParams::Svm(p) => p.validate()?,
        }
        if self.study.augmented() {
            self.augment.validate()?;
        } else if self.augment_test {
            return Err(PipelineError::Config(format!(
                "augment_test requires an augmented study, not {}",
                self.study
            )));
        }
        Ok(())
    }

    /// Study default with overrides applied.
    pub fn regime(&self) -> Result<PreprocessRegime, PipelineError> {
        let mut r = PreprocessRegime::new(self.study.regime_kind());
        let o = &self.regime;
        r.window_low = o.window_low.unwrap_or(r.window_low);
        r.window_high = o.window_high.unwrap_or(r.window_high);
        r.crop_size = o.crop_size.unwrap_or(r.crop_size);
        r.canvas = o.canvas.unwrap_or(r.canvas);
        r.body_threshold = o.body_threshold.unwrap_or(r.body_threshold);
        r.validate()?;
        Ok(r)
    }

    /// Learner hyperparameters with the run seed applied.
    pub fn resolved_learner(&self) -> LearnerParams {
        let mut params = self.learner.clone();
        if let LearnerParams::Forest(p) = &mut params {
            p.seed = self.seed;
        }
        params
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form,
    /// ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = self.to_json_value();
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        short_hash(v.to_string().as_bytes())
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

struct Data {
    volumes: Vec<crate::dicom::ScanVolume>,
    annotations: Vec<crate::cohort::Annotation>,
    patients: Vec<crate::cohort::PatientInfo>,
    cohort_hash: String,
}

fn load_data(source: &DataSource) -> Result<Data, PipelineError> {
    match source {
        DataSource::Manifest(path) => {
            let c = CohortManifest::load(path)?;
            Ok(Data {
                volumes: c.volumes,
                annotations: c.annotations,
                patients: c.patients,
                cohort_hash: c.content_hash,
            })
        }
        DataSource::Phantom(spec) => {
            let p = generate(spec)?;
            let spec_json = serde_json::to_string(spec).expect("spec serializes");
            Ok(Data {
                patients: p.patient_infos(),
                volumes: p.volumes,
                annotations: p.annotations,
                cohort_hash: hex::encode(Sha256::digest(format!("phantom\n{spec_json}"))),
            })
        }
    }
}

/// One matrix row: a sample and the augmentation member to take from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Row {
    sample: usize,
    member: usize,
}

fn expand(indices: &[usize], members: impl Fn(usize) -> usize) -> Vec<Row> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted
        .into_iter()
        .flat_map(|sample| (0..members(sample)).map(move |member| Row { sample, member }))
        .collect()
}

fn equalize_rows(rows: Vec<Row>, samples: &[Sample], seed: u64) -> Vec<Row> {
    let labels: Vec<Label> = rows.iter().map(|r| samples[r.sample].label).collect();
    equalize_labels(&labels, seed)
        .into_iter()
        .map(|i| rows[i])
        .collect()
}

/// Preprocess and flatten `rows` into a feature matrix, augmenting each
/// source sample at most once.
fn build_matrix(
    samples: &[Sample],
    rows: &[Row],
    regime: &PreprocessRegime,
    augment: &AugmentSpec,
    column_major: bool,
) -> Result<Array2<f32>, PipelineError> {
    let mut out: Option<Array2<f32>> = None;
    let n = rows.len();
    let mut start = 0;
    while start < n {
        let sample = rows[start].sample;
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| r.sample == sample)
                .count();
        let members: Vec<usize> = rows[start..end].iter().map(|r| r.member).collect();
        let img = &samples[sample].image;
        let family = if members.iter().any(|&m| m > 0) {
            augment_image(img.view(), augment)?
        } else {
            vec![img.clone()]
        };
        let flat: Vec<Vec<f32>> = members
            .par_iter()
            .map(|&m| -> Result<Vec<f32>, PipelineError> {
                let done = regime.post_augment(family[m].clone())?;
                Ok(done.iter().copied().collect())
            })
            .collect::<Result<_, _>>()?;
        let d = flat[0].len();
        let out = out.get_or_insert_with(|| Array2::zeros((n, d).set_f(column_major)));
        if let Some(bad) = flat.iter().find(|v| v.len() != out.ncols()) {
            return Err(PipelineError::Config(format!(
                "images differ in size ({} vs {} pixels); choose a cropping regime",
                bad.len(),
                out.ncols()
            )));
        }
        let buf = out
            .as_slice_memory_order_mut()
            .expect("fresh matrix is contiguous");
        if column_major {
            for j in 0..d {
                let col = &mut buf[j * n + start..j * n + end];
                for (slot, v) in col.iter_mut().zip(&flat) {
                    *slot = v[j];
                }
            }
        } else {
            for (i, v) in flat.iter().enumerate() {
                buf[(start + i) * d..(start + i + 1) * d].copy_from_slice(v);
            }
        }
        start = end;
    }
    Ok(out.unwrap_or_else(|| Array2::zeros((0, 0))))
}

/// Rows plus labels, possibly served from the tensor cache.
fn matrix_for(
    samples: &[Sample],
    rows: &[Row],
    ctx: &MatrixContext<'_>,
    role: &str,
    column_major: bool,
) -> Result<(Array2<f32>, Vec<usize>), PipelineError> {
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| ctx.study.class_of(samples[r.sample].label))
        .collect();
    let fingerprint = format!("{}|{}|{role}", ctx.regime.fingerprint(), ctx.cache_key);
    let path = ctx.cache_root.map(|root| {
        root.join(format!(
            "{}_{role}.tensor",
            short_hash(fingerprint.as_bytes())
        ))
    });
    if let Some(path) = path.as_deref().filter(|p| p.exists()) {
        match load_tensor(path, column_major) {
            Ok(t)
                if t.fingerprint == fingerprint
                    && t.labels
                        .iter()
                        .map(|&l| l as usize)
                        .eq(labels.iter().copied()) =>
            {
                info!("{role} matrix from cache {}", path.display());
                return Ok((t.data, labels));
            }
            Ok(_) => warn!(
                "cache entry {} does not match this run; rebuilding",
                path.display()
            ),
            Err(e) => warn!("unreadable cache entry {}: {e}; rebuilding", path.display()),
        }
    }
    let x = build_matrix(samples, rows, ctx.regime, ctx.augment, column_major)?;
    if let Some(path) = path {
        let root = path.parent().expect("cache file has a parent");
        fs::create_dir_all(root).map_err(io_err(root))?;
        let l32: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        save_tensor(&path, &fingerprint, &x, &l32)?;
    }
    Ok((x, labels))
}

struct MatrixContext<'a> {
    study: Study,
    regime: &'a PreprocessRegime,
    augment: &'a AugmentSpec,
    cache_root: Option<&'a Path>,
    cache_key: String,
}

fn class_counts(labels: &[usize], names: &[String]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = names.iter().map(|n| (n.clone(), 0)).collect();
    for &l in labels {
        *counts.get_mut(&names[l]).expect("label in range") += 1;
    }
    counts
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub model: TrainedModel,
    pub model_bytes: Vec<u8>,
    /// `output_dir/<config hash>`.
    pub dir: PathBuf,
}

/// Execute one experiment and write its artifacts.
///
/// With `cache_root` set, preprocessed matrices are reused across runs
/// that share data, regime, split and augmentation.
pub fn run(
    config: &ExperimentConfig,
    cache_root: Option<&Path>,
) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let study = config.study;
    let regime = config.regime()?;
    let names = study.class_names();
    let seed = config.seed;

    let data = load_data(&config.data)?;
    info!(
        "{} volumes, {} annotations",
        data.volumes.len(),
        data.annotations.len()
    );
    let mut samples = assemble_staged(
        &data.volumes,
        &data.annotations,
        &data.patients,
        &regime,
        AssemblyStage::PreAugment,
    )?;
    drop(data.volumes);
    if !study.multiclass() {
        samples = balance(samples, seed);
    }
    let plan = split(&samples, config.split_policy, seed)?;
    let m = if study.augmented() {
        config.augment.multiplicity()
    } else {
        1
    };

    let mut train_rows = expand(&plan.train, |s| {
        if study.multiclass() && !samples[s].label.is_tampered() {
            1
        } else {
            m
        }
    });
    let mut test_rows = expand(&plan.test, |s| {
        if config.augment_test && samples[s].label.is_tampered() {
            m
        } else {
            1
        }
    });
    if study.multiclass() {
        train_rows = equalize_rows(train_rows, &samples, mix_seed(seed) ^ 1);
        test_rows = equalize_rows(test_rows, &samples, mix_seed(seed) ^ 2);
    }
    info!(
        "{} train rows, {} test rows",
        train_rows.len(),
        test_rows.len()
    );

    let cache_key = {
        let key = serde_json::json!({
            "cohort": data.cohort_hash,
            "study": study,
            "seed": seed,
            "split": config.split_policy,
            "augment": config.augment,
            "augment_test": config.augment_test,
        });
        short_hash(key.to_string().as_bytes())
    };
    let ctx = MatrixContext {
        study,
        regime: &regime,
        augment: &config.augment,
        cache_root,
        cache_key,
    };
    let params = config.resolved_learner();
    let column_major = !matches!(params, LearnerParams::Svm(_));
    let (x_train, y_train) = matrix_for(&samples, &train_rows, &ctx, "train", column_major)?;
    let (x_test, y_test) = matrix_for(&samples, &test_rows, &ctx, "test", false)?;
    drop(samples);

    info!(
        "fitting {} on {}x{}",
        params.name(),
        x_train.nrows(),
        x_train.ncols()
    );
    let model = TrainedModel::fit(&params, x_train.view(), &y_train, names.len())?;
    drop(x_train);

    let train_counts = class_counts(&y_train, &names);
    let metadata = RunMetadata {
        study: study.as_str().to_string(),
        learner: params.name().to_string(),
        hyperparameters: serde_json::to_value(model.params()).expect("params serialize"),
        regime: serde_json::to_value(&regime).expect("regime serializes"),
        regime_fingerprint: regime.fingerprint(),
        seed,
        score_kind: model.score_kind().to_string(),
        train_class_counts: train_counts.clone(),
        test_class_counts: class_counts(&y_test, &names),
        cohort_hash: data.cohort_hash.clone(),
        config_hash: config.hash(),
        config: config.to_json_value(),
        warnings: Vec::new(),
    };
    let report = evaluate(&model, x_test.view(), &y_test, &names, metadata)?;
    info!("test accuracy {:.4}", report.accuracy);

    let model_bytes = write_model(&model);
    let model_meta = ModelMetadata {
        format_version: CONTAINER_VERSION,
        kind: params.name().to_string(),
        n_features: model.n_features(),
        class_names: names.clone(),
        regime_fingerprint: regime.fingerprint(),
        seed,
        class_counts: train_counts,
        score_kind: model.score_kind().to_string(),
    };
    let dir = config.output_dir.join(config.hash());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let write = |name: &str, bytes: &[u8]| -> Result<(), PipelineError> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))
    };
    write("report.json", report.to_json().as_bytes())?;
    write("model.bin", &model_bytes)?;
    let mut meta_json = serde_json::to_string_pretty(&model_meta).expect("metadata serializes");
    meta_json.push('\n');
    write("model.json", meta_json.as_bytes())?;
    let mut config_json =
        serde_json::to_string_pretty(&config.to_json_value()).expect("config serializes");
    config_json.push('\n');
    write("config.json", config_json.as_bytes())?;
    for (class, curve) in &report.roc {
        let stem = MetricsReport::roc_file_stem(class);
        write(&format!("{stem}.csv"), curve.to_csv().as_bytes())?;
        write(
            &format!("{stem}.svg"),
            curve.to_svg(&format!("{study} {class} vs rest")).as_bytes(),
        )?;
    }
    Ok(RunOutput {
        report,
        model,
        model_bytes,
        dir,
    })
}
