use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dims, check_training, DecisionScores, LearnerError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or cannot be split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.min_samples_leaf == 0 {
            return Err(LearnerError::InvalidParams(
                "min_samples_leaf must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        class: u32,
        distribution: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTreeModel {
    params: TreeParams,
    n_features: usize,
    n_classes: usize,
    nodes: Vec<Node>,
}

impl DecisionTreeModel {
    /// Assemble a tree from parts, checking structural invariants: children
    /// come after their parent, features are in range and leaf
    /// distributions are normalized.
    pub fn from_parts(
        params: TreeParams,
        n_features: usize,
        n_classes: usize,
        nodes: Vec<Node>,
    ) -> Result<Self, LearnerError> {
        let bad = |m: String| Err(LearnerError::Format(m));
        if nodes.is_empty() {
            return bad("tree without nodes".into());
        }
        if n_classes == 0 {
            return bad("tree without classes".into());
        }
        for (i, node) in nodes.iter().enumerate() {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let (l, r) = (*left as usize, *right as usize);
                    if l <= i || r <= i || l >= nodes.len() || r >= nodes.len() || l == r {
                        return bad(format!("node {i}: invalid children {l}, {r}"));
                    }
                    if *feature as usize >= n_features {
                        return bad(format!("node {i}: feature {feature} out of range"));
                    }
                    if !threshold.is_finite() {
                        return bad(format!("node {i}: non-finite threshold"));
                    }
                }
                Node::Leaf {
                    class,
                    distribution,
                } => {
                    if distribution.len() != n_classes || *class as usize >= n_classes {
                        return bad(format!("node {i}: leaf does not match {n_classes} classes"));
                    }
                    let sum: f64 = distribution.iter().sum();
                    if distribution.iter().any(|p| !(0.0..=1.0).contains(p))
                        || (sum - 1.0).abs() > 1e-9
                    {
                        return bad(format!("node {i}: leaf distribution is not normalized"));
                    }
                }
            }
        }
        // Every node but the root must be referenced exactly once.
        let mut refs = vec![0u32; nodes.len()];
        for node in &nodes {
            if let Node::Split { left, right, .. } = node {
                refs[*left as usize] += 1;
                refs[*right as usize] += 1;
            }
        }
        if refs[0] != 0 || refs[1..].iter().any(|&r| r != 1) {
            return bad("nodes do not form a single tree".into());
        }
        Ok(DecisionTreeModel {
            params,
            n_features,
            n_classes,
            nodes,
        })
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            max = max.max(depth[i]);
            if let Node::Split { left, right, .. } = node {
                depth[*left as usize] = depth[i] + 1;
                depth[*right as usize] = depth[i] + 1;
            }
        }
        max
    }

    /// Index of the leaf reached by `row`.
    pub fn leaf_index(&self, row: ArrayView1<f32>) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if f64::from(row[*feature as usize]) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub(crate) fn leaf_class(&self, row: ArrayView1<f32>) -> usize {
        match &self.nodes[self.leaf_index(row)] {
            Node::Leaf { class, .. } => *class as usize,
            Node::Split { .. } => unreachable!("leaf_index stops at leaves"),
        }
    }

    pub fn scores(&self, x: ArrayView2<f32>) -> Result<DecisionScores, LearnerError> {
        check_dims(self.n_features, &x)?;
        let mut out = Array2::zeros((x.nrows(), self.n_classes));
        for (mut o, row) in out.rows_mut().into_iter().zip(x.rows()) {
            if let Node::Leaf { distribution, .. } = &self.nodes[self.leaf_index(row)] {
                o.iter_mut().zip(distribution).for_each(|(o, p)| *o = *p);
            }
        }
        Ok(DecisionScores(out))
    }

    pub fn predict(&self, x: ArrayView2<f32>) -> Result<Vec<usize>, LearnerError> {
        check_dims(self.n_features, &x)?;
        Ok(x.rows().into_iter().map(|r| self.leaf_class(r)).collect())
    }
}

/// Weighted Gini impurity of a two-way partition given per-class counts.
pub fn weighted_gini(left: &[usize], right: &[usize]) -> f64 {
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    (split_cost(left, nl) + split_cost(right, nr)) / (nl + nr) as f64
}

/// `n * gini` for one side; exact for integer counts up to rounding.
#[inline]
fn split_cost(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let sq: usize = counts.iter().map(|c| c * c).sum();
    n as f64 - sq as f64 / n as f64
}

pub fn fit_tree(
    x: ArrayView2<f32>,
    y: &[usize],
    n_classes: usize,
    params: &TreeParams,
) -> Result<DecisionTreeModel, LearnerError> {
    params.validate()?;
    check_training(&x, y, n_classes)?;
    let xt = x.t();
    let cols = xt.as_standard_layout();
    let grower = Grower {
        cols: cols.as_slice().expect("standard layout"),
        n_rows: x.nrows(),
        labels: y,
        n_classes,
        params,
    };
    let idx: Vec<u32> = (0..x.nrows() as u32).collect();
    let nodes = grower.grow(
        idx,
        &mut FeatureDraw::All {
            n_features: x.ncols(),
        },
    );
    Ok(DecisionTreeModel {
        params: params.clone(),
        n_features: x.ncols(),
        n_classes,
        nodes,
    })
}

pub(crate) enum FeatureDraw<'r> {
    All {
        n_features: usize,
    },
    /// Draw features without replacement until `k` non-constant ones have
    /// been evaluated or every feature has been seen.
    Random {
        k: usize,
        rng: &'r mut ChaCha8Rng,
        perm: Vec<u32>,
    },
}

/// Column-major training data shared across trees.
pub(crate) struct Grower<'a> {
    pub cols: &'a [f32],
    pub n_rows: usize,
    pub labels: &'a [usize],
    pub n_classes: usize,
    pub params: &'a TreeParams,
}

enum Candidate {
    Constant,
    NoValidSplit,
    Split { cost: f64, threshold: f64 },
}

struct Best {
    cost: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    fn column(&self, f: usize) -> &[f32] {
        &self.cols[f * self.n_rows..(f + 1) * self.n_rows]
    }

    fn counts(&self, idx: &[u32]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.labels[i as usize]] += 1;
        }
        c
    }

    fn leaf(counts: &[usize]) -> Node {
        let n: usize = counts.iter().sum();
        let distribution: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let mut class = 0;
        for (k, &c) in counts.iter().enumerate() {
            if c > counts[class] {
                class = k;
            }
        }
        Node::Leaf {
            class: class as u32,
            distribution,
        }
    }

    fn evaluate(
        &self,
        f: usize,
        idx: &[u32],
        total: &[usize],
        buf: &mut Vec<(f32, u32)>,
        left: &mut [usize],
    ) -> Candidate {
        let col = self.column(f);
        buf.clear();
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &i in idx {
            let v = col[i as usize];
            lo = lo.min(v);
            hi = hi.max(v);
            buf.push((v, self.labels[i as usize] as u32));
        }
        if lo >= hi {
            return Candidate::Constant;
        }
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        left.iter_mut().for_each(|c| *c = 0);
        let m = buf.len();
        let msl = self.params.min_samples_leaf;
        let mut right_sq: usize = total.iter().map(|c| c * c).sum();
        let mut left_sq = 0usize;
        let mut best: Option<(f64, f64)> = None;
        for i in 0..m - 1 {
            let k = buf[i].1 as usize;
            // Moving one sample of class k: (c+1)^2 - c^2 = 2c + 1.
            left_sq += 2 * left[k] + 1;
            right_sq -= 2 * (total[k] - left[k]) - 1;
            left[k] += 1;
            if buf[i].0 >= buf[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = m - nl;
            if nl < msl || nr < msl {
                continue;
            }
            let cost = (nl as f64 - left_sq as f64 / nl as f64)
                + (nr as f64 - right_sq as f64 / nr as f64);
            if best.is_none_or(|(b, _)| cost < b - 1e-12 * m as f64) {
                let threshold = (f64::from(buf[i].0) + f64::from(buf[i + 1].0)) / 2.0;
                best = Some((cost, threshold));
            }
        }
        match best {
            Some((cost, threshold)) => Candidate::Split { cost, threshold },
            None => Candidate::NoValidSplit,
        }
    }

    pub(crate) fn grow(&self, mut idx: Vec<u32>, draw: &mut FeatureDraw) -> Vec<Node> {
        let mut nodes = vec![Node::Leaf {
            class: 0,
            distribution: Vec::new(),
        }];
        let mut stack = vec![(0usize, 0usize, idx.len(), 0usize)];
        let mut buf = Vec::with_capacity(idx.len());
        let mut left = vec![0usize; self.n_classes];
        let mut scratch = Vec::with_capacity(idx.len());
        while let Some((slot, start, end, depth)) = stack.pop() {
            let range = &idx[start..end];
            let m = range.len();
            let counts = self.counts(range);
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            let depth_capped = self.params.max_depth.is_some_and(|d| depth >= d);
            if pure || depth_capped || m < 2 * self.params.min_samples_leaf {
                nodes[slot] = Self::leaf(&counts);
                continue;
            }
            let eps = 1e-12 * m as f64;
            let mut best: Option<Best> = None;
            let mut consider = |f: usize, c: Candidate| -> bool {
                match c {
                    Candidate::Constant => false,
                    Candidate::NoValidSplit => true,
                    Candidate::Split { cost, threshold } => {
                        let better = match &best {
                            None => true,
                            Some(b) => {
                                cost < b.cost - eps
                                    || (cost <= b.cost + eps
                                        && (f, threshold) < (b.feature, b.threshold))
                            }
                        };
                        if better {
                            best = Some(Best {
                                cost,
                                feature: f,
                                threshold,
                            });
                        }
                        true
                    }
                }
            };
            match draw {
                FeatureDraw::All { n_features } => {
                    for f in 0..*n_features {
                        let c = self.evaluate(f, range, &counts, &mut buf, &mut left);
                        consider(f, c);
                    }
                }
                FeatureDraw::Random { k, rng, perm } => {
                    let d = perm.len();
                    let mut found = 0;
                    let mut visited = 0;
                    while visited < d && found < *k {
                        let j = rng.random_range(visited..d);
                        perm.swap(visited, j);
                        let f = perm[visited] as usize;
                        visited += 1;
                        let c = self.evaluate(f, range, &counts, &mut buf, &mut left);
                        if consider(f, c) {
                            found += 1;
                        }
                    }
                }
            }
            let Some(best) = best else {
                nodes[slot] = Self::leaf(&counts);
                continue;
            };
            let col = self.column(best.feature);
            scratch.clear();
            let range = &mut idx[start..end];
            let mut n_left = 0;
            for p in 0..range.len() {
                let i = range[p];
                if f64::from(col[i as usize]) <= best.threshold {
                    range[n_left] = i;
                    n_left += 1;
                } else {
                    scratch.push(i);
                }
            }
            range[n_left..].copy_from_slice(&scratch);
            let l = nodes.len();
            nodes.push(Node::Leaf {
                class: 0,
                distribution: Vec::new(),
            });
            nodes.push(Node::Leaf {
                class: 0,
                distribution: Vec::new(),
            });
            nodes[slot] = Node::Split {
                feature: best.feature as u32,
                threshold: best.threshold,
                left: l as u32,
                right: (l + 1) as u32,
            };
            stack.push((l + 1, start + n_left, end, depth + 1));
            stack.push((l, start, start + n_left, depth + 1));
        }
        nodes
    }
}
