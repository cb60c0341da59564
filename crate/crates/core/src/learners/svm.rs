//! Soft-margin SVM trained by SMO with maximal-violating-pair working set
//! selection; multiclass via one-vs-rest.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_dims, check_training, DecisionScores, LearnerError};

/// Rows of the kernel matrix kept in memory when it does not fit whole.
const FULL_CACHE_LIMIT: usize = 8192;
const CACHE_BYTES: usize = 512 << 20;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub kernel: KernelSpec,
    /// RBF width; `None` means `1 / (d * var(X))`, resolved at fit time.
    pub gamma: Option<f64>,
    pub c: f64,
    pub tol: f64,
    /// `None` means `max(10^7, 100 n)`.
    pub max_iter: Option<usize>,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            kernel: KernelSpec::Rbf,
            gamma: None,
            c: 1.0,
            tol: 1e-3,
            max_iter: None,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: String| Err(LearnerError::InvalidParams(m));
        if !(self.c.is_finite() && self.c > 0.0) {
            return bad(format!("C must be positive, got {}", self.c));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g > 0.0) {
                return bad(format!("gamma must be positive, got {g}"));
            }
        }
        if self.max_iter == Some(0) {
            return bad("max_iter must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kernel {
    Linear,
    Rbf(f64),
}

impl Kernel {
    #[inline]
    fn eval(self, dot: f64, norm_a: f64, norm_b: f64) -> f64 {
        match self {
            Kernel::Linear => dot,
            Kernel::Rbf(g) => (-g * (norm_a + norm_b - 2.0 * dot).max(0.0)).exp(),
        }
    }
}

fn dot(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum(),
        _ => a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum(),
    }
}

/// One binary machine: `f(x) = sum_s coef_s K(sv_s, x) + bias`, positive
/// side is `positive_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    pub positive_class: u32,
    /// Indices into the model's support vector matrix.
    pub support: Vec<u32>,
    /// `alpha_s * y_s`.
    pub coef: Vec<f64>,
    pub bias: f64,
    /// Dual objective `1/2 a'Qa - e'a` at termination.
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    params: SvmParams,
    n_features: usize,
    n_classes: usize,
    support_vectors: Array2<f32>,
    /// Training row of each support vector.
    support_rows: Vec<u32>,
    machines: Vec<BinarySvm>,
}

impl SvmModel {
    pub fn from_parts(
        params: SvmParams,
        n_classes: usize,
        support_vectors: Array2<f32>,
        support_rows: Vec<u32>,
        machines: Vec<BinarySvm>,
    ) -> Result<Self, LearnerError> {
        let bad = |m: String| Err(LearnerError::Format(m));
        if params.validate().is_err() {
            return bad("invalid hyperparameters".into());
        }
        if params.kernel == KernelSpec::Rbf && params.gamma.is_none() {
            return bad("unresolved gamma".into());
        }
        let expected = if n_classes == 2 { 1 } else { n_classes };
        if n_classes < 2 || machines.len() != expected {
            return bad(format!(
                "{} machines for {n_classes} classes",
                machines.len()
            ));
        }
        if support_rows.len() != support_vectors.nrows() {
            return bad("support row count mismatch".into());
        }
        if support_vectors.iter().any(|v| !v.is_finite()) {
            return bad("non-finite support vector".into());
        }
        for (k, m) in machines.iter().enumerate() {
            if m.support.len() != m.coef.len() {
                return bad(format!("machine {k}: support/coef length mismatch"));
            }
            if m.positive_class as usize >= n_classes || !m.bias.is_finite() {
                return bad(format!("machine {k}: invalid class or bias"));
            }
            let limit = params.c * (1.0 + 1e-9);
            if m.coef.iter().any(|c| !c.is_finite() || c.abs() > limit) {
                return bad(format!("machine {k}: coefficient outside [-C, C]"));
            }
            if m.support
                .iter()
                .any(|&s| s as usize >= support_vectors.nrows())
            {
                return bad(format!("machine {k}: support index out of range"));
            }
        }
        Ok(SvmModel {
            params,
            n_features: support_vectors.ncols(),
            n_classes,
            support_vectors,
            support_rows,
            machines,
        })
    }

    pub fn params(&self) -> &SvmParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn support_vectors(&self) -> &Array2<f32> {
        &self.support_vectors
    }

    pub fn support_rows(&self) -> &[u32] {
        &self.support_rows
    }

    pub fn machines(&self) -> &[BinarySvm] {
        &self.machines
    }

    fn kernel(&self) -> Kernel {
        match self.params.kernel {
            KernelSpec::Linear => Kernel::Linear,
            KernelSpec::Rbf => Kernel::Rbf(self.params.gamma.expect("resolved at fit time")),
        }
    }

    /// Raw decision values, one column per machine.
    pub fn decision_function(&self, x: ArrayView2<f32>) -> Result<Array2<f64>, LearnerError> {
        check_dims(self.n_features, &x)?;
        let kernel = self.kernel();
        let sv_norms: Vec<f64> = self
            .support_vectors
            .rows()
            .into_iter()
            .map(|r| dot(r, r))
            .collect();
        let mut out = Array2::zeros((x.nrows(), self.machines.len()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut o, row)| {
                let norm = dot(row, row);
                let k: Vec<f64> = self
                    .support_vectors
                    .rows()
                    .into_iter()
                    .zip(&sv_norms)
                    .map(|(sv, &n)| kernel.eval(dot(sv, row), n, norm))
                    .collect();
                for (m, machine) in self.machines.iter().enumerate() {
                    let f: f64 = machine
                        .support
                        .iter()
                        .zip(&machine.coef)
                        .map(|(&s, &c)| c * k[s as usize])
                        .sum();
                    o[m] = f + machine.bias;
                }
            });
        Ok(out)
    }

    /// Binary: `[-f, f]`. One-vs-rest: each class's own margin.
    pub fn scores(&self, x: ArrayView2<f32>) -> Result<DecisionScores, LearnerError> {
        let f = self.decision_function(x)?;
        if self.n_classes == 2 {
            let mut out = Array2::zeros((f.nrows(), 2));
            for (i, v) in f.column(0).iter().enumerate() {
                out[[i, 0]] = -v;
                out[[i, 1]] = *v;
            }
            return Ok(DecisionScores(out));
        }
        Ok(DecisionScores(f))
    }

    pub fn predict(&self, x: ArrayView2<f32>) -> Result<Vec<usize>, LearnerError> {
        Ok(self.scores(x)?.argmax())
    }
}

/// Lazily computed kernel rows; unbounded up to `FULL_CACHE_LIMIT` rows,
/// least-recently-used eviction beyond.
struct KernelCache<'a> {
    x: ArrayView2<'a, f32>,
    norms: Vec<f64>,
    kernel: Kernel,
    rows: Vec<Option<Vec<f64>>>,
    last_used: Vec<u64>,
    clock: u64,
    capacity: usize,
    cached: usize,
}

impl<'a> KernelCache<'a> {
    fn new(x: ArrayView2<'a, f32>, kernel: Kernel) -> Self {
        let n = x.nrows();
        let norms = x.rows().into_iter().map(|r| dot(r, r)).collect();
        let capacity = if n <= FULL_CACHE_LIMIT {
            n
        } else {
            (CACHE_BYTES / (8 * n)).max(2)
        };
        KernelCache {
            x,
            norms,
            kernel,
            rows: vec![None; n],
            last_used: vec![0; n],
            clock: 0,
            capacity,
            cached: 0,
        }
    }

    fn diag(&self, i: usize) -> f64 {
        self.kernel
            .eval(self.norms[i], self.norms[i], self.norms[i])
    }

    fn row(&mut self, i: usize) -> &[f64] {
        self.clock += 1;
        self.last_used[i] = self.clock;
        if self.rows[i].is_none() {
            if self.cached >= self.capacity {
                let victim = (0..self.rows.len())
                    .filter(|&j| j != i && self.rows[j].is_some())
                    .min_by_key(|&j| self.last_used[j])
                    .expect("cache holds at least one row");
                self.rows[victim] = None;
                self.cached -= 1;
            }
            let xi = self.x.row(i);
            let ni = self.norms[i];
            let kernel = self.kernel;
            let norms = &self.norms;
            let row: Vec<f64> = (0..self.x.nrows())
                .into_par_iter()
                .map(|t| kernel.eval(dot(xi, self.x.row(t)), ni, norms[t]))
                .collect();
            self.rows[i] = Some(row);
            self.cached += 1;
        }
        self.rows[i].as_deref().expect("row just filled")
    }
}

struct Solution {
    alpha: Vec<f64>,
    bias: f64,
    objective: f64,
    iterations: usize,
    violation: f64,
    converged: bool,
}

/// Solve `min 1/2 a'Qa - e'a` s.t. `0 <= a <= C`, `y'a = 0` with
/// `Q_ij = y_i y_j K_ij`.
fn smo(cache: &mut KernelCache, y: &[f64], c: f64, tol: f64, max_iter: usize) -> Solution {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut iterations = 0;
    let mut violation;
    let mut converged = false;
    loop {
        // i maximizes -y_t G_t over I_up, j minimizes it over I_low.
        let mut g_max = f64::NEG_INFINITY;
        let mut g_max2 = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        let mut j = usize::MAX;
        for t in 0..n {
            let up = if y[t] > 0.0 {
                alpha[t] < c
            } else {
                alpha[t] > 0.0
            };
            let low = if y[t] > 0.0 {
                alpha[t] > 0.0
            } else {
                alpha[t] < c
            };
            let v = -y[t] * grad[t];
            if up && v >= g_max {
                g_max = v;
                i = t;
            }
            if low && -v >= g_max2 {
                g_max2 = -v;
                j = t;
            }
        }
        violation = g_max + g_max2;
        if i == usize::MAX || j == usize::MAX || violation < tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let q_ii = cache.diag(i);
        let q_jj = cache.diag(j);
        let k_ij = cache.row(i)[j];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (q_ii + q_jj - 2.0 * k_ij).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let d_i = (alpha[i] - old_i) * y[i];
        let d_j = (alpha[j] - old_j) * y[j];
        let row_i = cache.row(i).to_vec();
        let row_j = cache.row(j);
        for t in 0..n {
            grad[t] += y[t] * (row_i[t] * d_i + row_j[t] * d_j);
        }
    }

    // Bias from free vectors, or the midpoint of the feasible interval.
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut n_free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            free_sum += yg;
        }
    }
    let rho = if n_free > 0 {
        free_sum / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    let objective = alpha
        .iter()
        .zip(&grad)
        .map(|(a, g)| a * (g - 1.0))
        .sum::<f64>()
        / 2.0;
    Solution {
        alpha,
        bias: -rho,
        objective,
        iterations,
        violation,
        converged,
    }
}

pub fn fit_svm(
    x: ArrayView2<f32>,
    y: &[usize],
    n_classes: usize,
    params: &SvmParams,
) -> Result<SvmModel, LearnerError> {
    params.validate()?;
    check_training(&x, y, n_classes)?;
    let (n, d) = x.dim();
    let mut present = vec![false; n_classes];
    y.iter().for_each(|&l| present[l] = true);
    if n_classes < 2 || present.iter().any(|p| !p) {
        return Err(LearnerError::SingleClassInput);
    }

    let mut resolved = params.clone();
    if params.kernel == KernelSpec::Rbf && params.gamma.is_none() {
        let count = (n * d) as f64;
        let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / count;
        let var = x
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / count;
        resolved.gamma = Some(if var > 0.0 {
            1.0 / (d as f64 * var)
        } else {
            1.0
        });
    }
    let kernel = match resolved.kernel {
        KernelSpec::Linear => Kernel::Linear,
        KernelSpec::Rbf => Kernel::Rbf(resolved.gamma.expect("resolved above")),
    };
    let max_iter = params.max_iter.unwrap_or(10_000_000usize.max(100 * n));

    let rows = x.as_standard_layout();
    let mut cache = KernelCache::new(rows.view(), kernel);
    let positives: Vec<usize> = if n_classes == 2 {
        vec![1]
    } else {
        (0..n_classes).collect()
    };
    let mut solutions = Vec::with_capacity(positives.len());
    for &p in &positives {
        let signs: Vec<f64> = y.iter().map(|&l| if l == p { 1.0 } else { -1.0 }).collect();
        solutions.push((p, smo(&mut cache, &signs, params.c, params.tol, max_iter)));
    }

    // Union of support vectors across machines, in training order.
    let mut slot = vec![u32::MAX; n];
    let mut support_rows = Vec::new();
    for (t, slot) in slot.iter_mut().enumerate() {
        if solutions.iter().any(|(_, s)| s.alpha[t] > 0.0) {
            *slot = support_rows.len() as u32;
            support_rows.push(t as u32);
        }
    }
    let support_vectors = rows.select(
        Axis(0),
        &support_rows.iter().map(|&r| r as usize).collect::<Vec<_>>(),
    );
    let mut failure = None;
    let machines = solutions
        .into_iter()
        .map(|(p, s)| {
            if !s.converged && failure.is_none() {
                failure = Some(s.violation);
            }
            let (support, coef) = (0..n)
                .filter(|&t| s.alpha[t] > 0.0)
                .map(|t| {
                    let sign = if y[t] == p { 1.0 } else { -1.0 };
                    (slot[t], s.alpha[t] * sign)
                })
                .unzip();
            BinarySvm {
                positive_class: p as u32,
                support,
                coef,
                bias: s.bias,
                objective: s.objective,
                iterations: s.iterations,
            }
        })
        .collect();
    let model = SvmModel {
        params: resolved,
        n_features: d,
        n_classes,
        support_vectors,
        support_rows,
        machines,
    };
    match failure {
        Some(violation) => Err(LearnerError::NonConvergence {
            max_iter,
            violation,
            partial: Box::new(model),
        }),
        None => Ok(model),
    }
}
