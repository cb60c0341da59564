use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{FeatureDraw, Grower};
use super::{
    check_dims, check_training, DecisionScores, DecisionTreeModel, LearnerError, TreeParams,
};
use crate::seeding::mix_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` means `floor(sqrt(d))`, resolved at fit time.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            features_per_split: None,
            bootstrap: true,
            max_depth: None,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.n_trees == 0 {
            return Err(LearnerError::InvalidParams(
                "n_trees must be at least 1".into(),
            ));
        }
        if self.features_per_split == Some(0) {
            return Err(LearnerError::InvalidParams(
                "features_per_split must be at least 1".into(),
            ));
        }
        self.tree_params().validate()
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestModel {
    params: ForestParams,
    n_features: usize,
    n_classes: usize,
    trees: Vec<DecisionTreeModel>,
}

impl RandomForestModel {
    pub fn from_parts(
        params: ForestParams,
        n_features: usize,
        n_classes: usize,
        trees: Vec<DecisionTreeModel>,
    ) -> Result<Self, LearnerError> {
        if trees.is_empty() {
            return Err(LearnerError::Format("forest without trees".into()));
        }
        if trees
            .iter()
            .any(|t| t.n_features() != n_features || t.n_classes() != n_classes)
        {
            return Err(LearnerError::Format("trees disagree on dimensions".into()));
        }
        Ok(RandomForestModel {
            params,
            n_features,
            n_classes,
            trees,
        })
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn trees(&self) -> &[DecisionTreeModel] {
        &self.trees
    }

    /// Fraction of trees voting for each class.
    pub fn scores(&self, x: ArrayView2<f32>) -> Result<DecisionScores, LearnerError> {
        check_dims(self.n_features, &x)?;
        let mut out = Array2::zeros((x.nrows(), self.n_classes));
        let share = 1.0 / self.trees.len() as f64;
        out.axis_iter_mut(ndarray::Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(ndarray::Axis(0)).into_par_iter())
            .for_each(|(mut o, row)| {
                for t in &self.trees {
                    o[t.leaf_class(row)] += share;
                }
            });
        Ok(DecisionScores(out))
    }

    /// Majority vote; the lowest class index wins ties.
    pub fn predict(&self, x: ArrayView2<f32>) -> Result<Vec<usize>, LearnerError> {
        Ok(self.scores(x)?.argmax())
    }
}

pub fn fit_forest(
    x: ArrayView2<f32>,
    y: &[usize],
    n_classes: usize,
    params: &ForestParams,
) -> Result<RandomForestModel, LearnerError> {
    params.validate()?;
    check_training(&x, y, n_classes)?;
    let (n, d) = x.dim();
    let k = params
        .features_per_split
        .unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).max(1))
        .min(d);
    let mut resolved = params.clone();
    resolved.features_per_split = Some(k);

    let xt = x.t();
    let cols = xt.as_standard_layout();
    let tree_params = params.tree_params();
    let grower = Grower {
        cols: cols.as_slice().expect("standard layout"),
        n_rows: n,
        labels: y,
        n_classes,
        params: &tree_params,
    };
    let base = mix_seed(params.seed);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(base ^ t as u64);
            let idx: Vec<u32> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n as u32)).collect()
            } else {
                (0..n as u32).collect()
            };
            let nodes = if k >= d {
                grower.grow(idx, &mut FeatureDraw::All { n_features: d })
            } else {
                grower.grow(
                    idx,
                    &mut FeatureDraw::Random {
                        k,
                        rng: &mut rng,
                        perm: (0..d as u32).collect(),
                    },
                )
            };
            DecisionTreeModel::from_parts(tree_params.clone(), d, n_classes, nodes)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RandomForestModel {
        params: resolved,
        n_features: d,
        n_classes,
        trees,
    })
}
