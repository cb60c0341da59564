//! Confusion matrices, precision/recall, ROC curves with trapezoidal AUC,
//! and the on-disk report formats (`report.json`, ROC CSV and SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learners::{LearnerError, TrainedModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{truth} true labels but {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} outside the {n_classes}-class set")]
    LabelOutsideClassSet { label: usize, n_classes: usize },
    #[error("ROC needs both positive and negative samples")]
    SingleClassEval,
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.n_classes())
            .filter(|&r| r != class)
            .map(|r| self.counts[r][class])
            .sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.n_classes())
            .filter(|&c| c != class)
            .map(|c| self.counts[class][c])
            .sum()
    }

    pub fn true_negatives(&self, class: usize) -> u64 {
        self.total()
            - self.true_positives(class)
            - self.false_positives(class)
            - self.false_negatives(class)
    }

    fn validate(&self) -> Result<(), EvalError> {
        let k = self.n_classes();
        if k == 0 || self.counts.len() != k || self.counts.iter().any(|r| r.len() != k) {
            return Err(EvalError::InvalidReport(
                "confusion matrix is not square over the class set".into(),
            ));
        }
        Ok(())
    }
}

pub fn confusion(
    y_true: &[usize],
    y_pred: &[usize],
    class_names: &[String],
) -> Result<ConfusionMatrix, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch {
            truth: y_true.len(),
            predicted: y_pred.len(),
        });
    }
    let k = class_names.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= k) {
            return Err(EvalError::LabelOutsideClassSet {
                label,
                n_classes: k,
            });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        class_names: class_names.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// No positive predictions; precision reported as 1.
    pub precision_undefined: bool,
    /// No positive samples; recall reported as 1.
    pub recall_undefined: bool,
}

pub fn precision_recall(cm: &ConfusionMatrix, class: usize) -> PrecisionRecall {
    let tp = cm.true_positives(class);
    let fp = cm.false_positives(class);
    let fn_ = cm.false_negatives(class);
    let ratio = |den: u64| {
        if den == 0 {
            1.0
        } else {
            tp as f64 / den as f64
        }
    };
    PrecisionRecall {
        precision: ratio(tp + fp),
        recall: ratio(tp + fn_),
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `None` is +infinity.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

impl RocCurve {
    fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidReport(format!("ROC: {m}")));
        let (Some(first), Some(last)) = (self.points.first(), self.points.last()) else {
            return bad("no points");
        };
        if (first.fpr, first.tpr) != (0.0, 0.0) || (last.fpr, last.tpr) != (1.0, 1.0) {
            return bad("curve must run from (0,0) to (1,1)");
        }
        if self
            .points
            .windows(2)
            .any(|w| w[1].fpr < w[0].fpr || w[1].tpr < w[0].tpr)
        {
            return bad("points are not monotone");
        }
        if (trapezoid(&self.points) - self.auc).abs() > 1e-12 {
            return bad("auc does not match the stored points");
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            match p.threshold {
                Some(t) => writeln!(out, "{t},{},{}", p.fpr, p.tpr),
                None => writeln!(out, "inf,{},{}", p.fpr, p.tpr),
            }
            .expect("writing to a String");
        }
        out
    }

    pub fn to_svg(&self, title: &str) -> String {
        const SIZE: f64 = 360.0;
        const PAD: f64 = 40.0;
        let px = |f: f64| PAD + f * SIZE;
        let py = |t: f64| PAD + (1.0 - t) * SIZE;
        let path: Vec<String> = self
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.fpr), py(p.tpr)))
            .collect();
        let side = SIZE + 2.0 * PAD;
        let mut svg = String::new();
        writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" viewBox="0 0 {side} {side}">"#
        )
        .expect("writing to a String");
        let _ = writeln!(
            svg,
            r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0)
        );
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14">{} (AUC {:.3})</text>"#,
            PAD,
            PAD - 12.0,
            escape(title),
            self.auc
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">false positive rate</text>"#,
            px(0.35),
            side - 10.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="12" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 12 {})">true positive rate</text>"#,
            py(0.35),
            py(0.35)
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// ROC over distinct score values, highest first; tied scores share a
/// single point.
pub fn roc(positive: &[bool], scores: &[f64]) -> Result<RocCurve, EvalError> {
    if positive.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            truth: positive.len(),
            predicted: scores.len(),
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassEval);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: Some(s),
        });
    }
    let auc = trapezoid(&points);
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
}

/// Everything needed to audit and re-run an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub study: String,
    pub learner: String,
    /// Resolved hyperparameters, including seeds.
    pub hyperparameters: serde_json::Value,
    pub regime: serde_json::Value,
    pub regime_fingerprint: String,
    pub seed: u64,
    pub score_kind: String,
    pub train_class_counts: BTreeMap<String, usize>,
    pub test_class_counts: BTreeMap<String, usize>,
    pub cohort_hash: String,
    pub config_hash: String,
    /// The full resolved experiment configuration.
    pub config: serde_json::Value,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Seconds since the Unix epoch; excluded from determinism checks.
    pub timestamp: u64,
    pub accuracy: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub confusion: ConfusionMatrix,
    /// One-vs-rest per class; classes absent from one side are omitted.
    pub roc: BTreeMap<String, RocCurve>,
    pub run_metadata: RunMetadata,
}

impl MetricsReport {
    /// Assemble a report from raw predictions and scores.
    pub fn build(
        y_true: &[usize],
        y_pred: &[usize],
        scores: ArrayView2<f64>,
        class_names: &[String],
        mut run_metadata: RunMetadata,
    ) -> Result<Self, EvalError> {
        let cm = confusion(y_true, y_pred, class_names)?;
        if scores.nrows() != y_true.len() || scores.ncols() != class_names.len() {
            return Err(EvalError::LengthMismatch {
                truth: y_true.len(),
                predicted: scores.nrows(),
            });
        }
        let mut per_class = BTreeMap::new();
        for (c, name) in class_names.iter().enumerate() {
            let pr = precision_recall(&cm, c);
            if pr.precision_undefined {
                run_metadata.warnings.push(format!(
                    "precision of {name} is 0/0 (no positive predictions); reported as 1"
                ));
            }
            if pr.recall_undefined {
                run_metadata.warnings.push(format!(
                    "recall of {name} is 0/0 (no test samples); reported as 1"
                ));
            }
            per_class.insert(
                name.clone(),
                ClassMetrics {
                    precision: pr.precision,
                    recall: pr.recall,
                    support: cm.counts[c].iter().sum(),
                },
            );
        }
        let curves: Vec<(String, Result<RocCurve, EvalError>)> = (0..class_names.len())
            .into_par_iter()
            .map(|c| {
                let positive: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
                let s = scores.column(c).to_vec();
                (class_names[c].clone(), roc(&positive, &s))
            })
            .collect();
        let mut roc_map = BTreeMap::new();
        for (name, curve) in curves {
            match curve {
                Ok(curve) => {
                    roc_map.insert(name, curve);
                }
                Err(EvalError::SingleClassEval) => run_metadata.warnings.push(format!(
                    "ROC for {name} omitted: test set lacks positives or negatives"
                )),
                Err(e) => return Err(e),
            }
        }
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Ok(MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            timestamp,
            accuracy: cm.accuracy(),
            per_class,
            confusion: cm,
            roc: roc_map,
            run_metadata,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Parse and re-validate every derived quantity against the stored
    /// confusion counts.
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let report: MetricsReport = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidReport(m));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema version {}",
                self.schema_version
            ));
        }
        self.confusion.validate()?;
        if self.confusion.total() == 0 {
            return bad("empty confusion matrix".into());
        }
        if self.accuracy != self.confusion.accuracy() {
            return bad(format!(
                "accuracy {} disagrees with confusion trace/total {}",
                self.accuracy,
                self.confusion.accuracy()
            ));
        }
        if self.per_class.len() != self.confusion.n_classes() {
            return bad("per-class metrics do not cover the class set".into());
        }
        for (c, name) in self.confusion.class_names.iter().enumerate() {
            let Some(m) = self.per_class.get(name) else {
                return bad(format!("no metrics for class {name}"));
            };
            let pr = precision_recall(&self.confusion, c);
            if m.precision != pr.precision || m.recall != pr.recall {
                return bad(format!(
                    "precision/recall of {name} disagree with confusion counts"
                ));
            }
            if m.support != self.confusion.counts[c].iter().sum::<u64>() {
                return bad(format!("support of {name} disagrees with confusion counts"));
            }
        }
        for (name, curve) in &self.roc {
            if !self.confusion.class_names.contains(name) {
                return bad(format!("ROC for unknown class {name}"));
            }
            curve.validate()?;
        }
        Ok(())
    }

    /// File stem for a class's ROC artifacts.
    pub fn roc_file_stem(class: &str) -> String {
        format!("roc_{}", class.to_ascii_lowercase())
    }
}

/// Score a trained model on a test matrix.
pub fn evaluate(
    model: &TrainedModel,
    x_test: ArrayView2<f32>,
    y_test: &[usize],
    class_names: &[String],
    run_metadata: RunMetadata,
) -> Result<MetricsReport, EvalError> {
    if class_names.len() != model.n_classes() {
        return Err(EvalError::LabelOutsideClassSet {
            label: class_names.len(),
            n_classes: model.n_classes(),
        });
    }
    let scores = model.scores(x_test)?;
    let predicted = scores.argmax();
    MetricsReport::build(
        y_test,
        &predicted,
        scores.0.view(),
        class_names,
        run_metadata,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names(n: usize) -> Vec<String> {
        ["A", "B", "C"][..n].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn confusion_example() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], &names(2)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert!(matches!(
            confusion(&[0, 2], &[0, 0], &names(2)),
            Err(EvalError::LabelOutsideClassSet { label: 2, .. })
        ));
    }

    #[test]
    fn precision_recall_arithmetic() {
        let cm = ConfusionMatrix {
            class_names: names(2),
            counts: vec![vec![5, 1], vec![1, 15]],
        };
        let pr = precision_recall(&cm, 1);
        assert_eq!(pr.recall, 0.9375);
        let cm = ConfusionMatrix {
            class_names: names(2),
            counts: vec![vec![0, 1], vec![0, 9]],
        };
        assert_eq!(precision_recall(&cm, 1).precision, 0.9);
        let zero = precision_recall(&cm, 0);
        assert!(zero.precision_undefined && zero.precision == 1.0);
    }

    #[test]
    fn roc_examples() {
        let r = roc(&[false, false, true, true], &[0.1, 0.4, 0.35, 0.8]).unwrap();
        assert!((r.auc - 0.75).abs() < 1e-15);
        let tied = roc(&[false, true, false, true], &[0.5; 4]).unwrap();
        assert_eq!(tied.points.len(), 2);
        assert_eq!(tied.auc, 0.5);
        let perfect = roc(&[false, true], &[0.0, 1.0]).unwrap();
        assert_eq!(perfect.auc, 1.0);
        assert!(matches!(
            roc(&[true, true], &[0.0, 1.0]),
            Err(EvalError::SingleClassEval)
        ));
    }

    fn metadata() -> RunMetadata {
        RunMetadata {
            study: "TEST".into(),
            learner: "tree".into(),
            hyperparameters: serde_json::Value::Null,
            regime: serde_json::Value::Null,
            regime_fingerprint: String::new(),
            seed: 0,
            score_kind: String::new(),
            train_class_counts: BTreeMap::new(),
            test_class_counts: BTreeMap::new(),
            cohort_hash: String::new(),
            config_hash: String::new(),
            config: serde_json::Value::Null,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn report_round_trip_and_tamper_detection() {
        let scores = array![[0.9, 0.1], [0.4, 0.6], [0.2, 0.8], [0.7, 0.3]];
        let r = MetricsReport::build(
            &[0, 0, 1, 1],
            &[0, 1, 1, 0],
            scores.view(),
            &names(2),
            metadata(),
        )
        .unwrap();
        assert_eq!(r.accuracy, 0.5);
        let back = MetricsReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let mut forged = r.clone();
        forged.accuracy = 0.75;
        assert!(MetricsReport::from_json(&forged.to_json()).is_err());
        let mut forged = r;
        forged.confusion.counts[0][0] += 1;
        assert!(forged.validate().is_err());
    }

    #[test]
    fn zero_denominator_is_flagged() {
        let scores = array![[1.0, 0.0], [1.0, 0.0]];
        let r =
            MetricsReport::build(&[0, 1], &[0, 0], scores.view(), &names(2), metadata()).unwrap();
        assert_eq!(r.per_class["B"].precision, 1.0);
        assert!(r
            .run_metadata
            .warnings
            .iter()
            .any(|w| w.contains("precision of B")));
    }

    #[test]
    fn csv_and_svg() {
        let r = roc(&[false, true], &[0.25, 0.75]).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("threshold,fpr,tpr\ninf,0,0\n0.75,0,1\n"));
        assert!(r.to_svg("T<").contains("T&lt; (AUC 1.000)"));
    }
}
