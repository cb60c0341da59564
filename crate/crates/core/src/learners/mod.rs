//! Classical learners over flattened image vectors: CART decision tree,
//! random forest and a one-vs-rest SMO support vector machine.

mod container;
mod forest;
mod svm;
mod tree;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use container::{read_model, write_model, ModelMetadata, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use forest::{fit_forest, ForestParams, RandomForestModel};
pub use svm::{fit_svm, BinarySvm, KernelSpec, SvmModel, SvmParams};
pub use tree::{fit_tree, weighted_gini, DecisionTreeModel, Node, TreeParams};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training labels contain a single class")]
    SingleClassInput,
    #[error("expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCountMismatch { rows: usize, labels: usize },
    #[error("label {label} outside 0..{n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("SMO did not converge within {max_iter} iterations (max violation {violation:.3e})")]
    NonConvergence {
        max_iter: usize,
        violation: f64,
        partial: Box<SvmModel>,
    },
    #[error("model container: {0}")]
    Format(String),
}

/// Per-class scores, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionScores(pub Array2<f64>);

impl DecisionScores {
    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    /// Argmax per row; the lowest class index wins ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.0
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }

    /// Scores of one class across samples.
    pub fn class(&self, c: usize) -> Vec<f64> {
        self.0.column(c).to_vec()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Hyperparameters of any learner; tagged by `kind` in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerParams {
    Tree(TreeParams),
    Forest(ForestParams),
    Svm(SvmParams),
}

impl Default for LearnerParams {
    fn default() -> Self {
        LearnerParams::Forest(ForestParams::default())
    }
}

impl LearnerParams {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerParams::Tree(_) => "tree",
            LearnerParams::Forest(_) => "forest",
            LearnerParams::Svm(_) => "svm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Tree(DecisionTreeModel),
    Forest(RandomForestModel),
    Svm(SvmModel),
}

impl TrainedModel {
    pub fn fit(
        params: &LearnerParams,
        x: ArrayView2<f32>,
        y: &[usize],
        n_classes: usize,
    ) -> Result<Self, LearnerError> {
        Ok(match params {
            LearnerParams::Tree(p) => TrainedModel::Tree(fit_tree(x, y, n_classes, p)?),
            LearnerParams::Forest(p) => TrainedModel::Forest(fit_forest(x, y, n_classes, p)?),
            LearnerParams::Svm(p) => TrainedModel::Svm(fit_svm(x, y, n_classes, p)?),
        })
    }

    pub fn n_features(&self) -> usize {
        match self {
            TrainedModel::Tree(m) => m.n_features(),
            TrainedModel::Forest(m) => m.n_features(),
            TrainedModel::Svm(m) => m.n_features(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            TrainedModel::Tree(m) => m.n_classes(),
            TrainedModel::Forest(m) => m.n_classes(),
            TrainedModel::Svm(m) => m.n_classes(),
        }
    }

    /// Hyperparameters as resolved at fit time.
    pub fn params(&self) -> LearnerParams {
        match self {
            TrainedModel::Tree(m) => LearnerParams::Tree(m.params().clone()),
            TrainedModel::Forest(m) => LearnerParams::Forest(m.params().clone()),
            TrainedModel::Svm(m) => LearnerParams::Svm(m.params().clone()),
        }
    }

    pub fn scores(&self, x: ArrayView2<f32>) -> Result<DecisionScores, LearnerError> {
        match self {
            TrainedModel::Tree(m) => m.scores(x),
            TrainedModel::Forest(m) => m.scores(x),
            TrainedModel::Svm(m) => m.scores(x),
        }
    }

    pub fn predict(&self, x: ArrayView2<f32>) -> Result<Vec<usize>, LearnerError> {
        Ok(self.scores(x)?.argmax())
    }

    /// What the per-class scores mean, for reports.
    pub fn score_kind(&self) -> &'static str {
        match self {
            TrainedModel::Tree(_) => "leaf class distribution",
            TrainedModel::Forest(_) => "vote fraction",
            TrainedModel::Svm(_) => "signed margin",
        }
    }
}

pub(crate) fn check_dims(expected: usize, x: &ArrayView2<f32>) -> Result<(), LearnerError> {
    if x.ncols() != expected {
        return Err(LearnerError::DimensionMismatch {
            expected,
            actual: x.ncols(),
        });
    }
    Ok(())
}

pub(crate) fn check_training(
    x: &ArrayView2<f32>,
    y: &[usize],
    n_classes: usize,
) -> Result<(), LearnerError> {
    if x.nrows() == 0 {
        return Err(LearnerError::EmptyTrainingSet);
    }
    if x.ncols() == 0 {
        return Err(LearnerError::InvalidParams("zero features".into()));
    }
    if y.len() != x.nrows() {
        return Err(LearnerError::LabelCountMismatch {
            rows: x.nrows(),
            labels: y.len(),
        });
    }
    if let Some(&label) = y.iter().find(|&&l| l >= n_classes) {
        return Err(LearnerError::LabelOutOfRange { label, n_classes });
    }
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(LearnerError::NonFiniteInput { row, col });
        }
    }
    Ok(())
}
