//! Binary model container.
//!
//! ```text
//! magic        8 bytes  "CTFMODEL"
//! version      u16      CONTAINER_VERSION
//! byte order   u16      0xFEFF as written (reads 0xFFFE on a byte-swapped file)
//! kind         u8       1 tree, 2 forest, 3 svm
//! params       u32 length + JSON hyperparameters
//! payload      u64 length + kind-specific body
//! ```
//!
//! Integers are little-endian; reals are IEEE-754 `f64` except support
//! vectors (`f32`).

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    BinarySvm, DecisionTreeModel, LearnerError, LearnerParams, Node, RandomForestModel, SvmModel,
    TrainedModel,
};

pub const CONTAINER_MAGIC: &[u8; 8] = b"CTFMODEL";
pub const CONTAINER_VERSION: u16 = 1;
const BYTE_ORDER_MARK: u16 = 0xFEFF;

const KIND_TREE: u8 = 1;
const KIND_FOREST: u8 = 2;
const KIND_SVM: u8 = 3;

/// JSON sidecar describing how a model was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format_version: u16,
    pub kind: String,
    pub n_features: usize,
    pub class_names: Vec<String>,
    pub regime_fingerprint: String,
    pub seed: u64,
    pub class_counts: BTreeMap<String, usize>,
    pub score_kind: String,
}

pub fn write_model(model: &TrainedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&BYTE_ORDER_MARK.to_le_bytes());
    let kind = match model {
        TrainedModel::Tree(_) => KIND_TREE,
        TrainedModel::Forest(_) => KIND_FOREST,
        TrainedModel::Svm(_) => KIND_SVM,
    };
    out.push(kind);
    let params = serde_json::to_vec(&model.params()).expect("params serialize");
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    out.extend_from_slice(&params);
    let mut body = Vec::new();
    match model {
        TrainedModel::Tree(t) => put_tree(&mut body, t),
        TrainedModel::Forest(f) => {
            put_u32(&mut body, f.n_features() as u32);
            put_u32(&mut body, f.n_classes() as u32);
            put_u32(&mut body, f.trees().len() as u32);
            for t in f.trees() {
                let mut tree = Vec::new();
                put_tree(&mut tree, t);
                body.extend_from_slice(&(tree.len() as u64).to_le_bytes());
                body.extend_from_slice(&tree);
            }
        }
        TrainedModel::Svm(s) => put_svm(&mut body, s),
    }
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tree(out: &mut Vec<u8>, t: &DecisionTreeModel) {
    put_u32(out, t.n_features() as u32);
    put_u32(out, t.n_classes() as u32);
    put_u32(out, t.nodes().len() as u32);
    for node in t.nodes() {
        match node {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                out.push(1);
                put_u32(out, *feature);
                put_f64(out, *threshold);
                put_u32(out, *left);
                put_u32(out, *right);
            }
            Node::Leaf {
                class,
                distribution,
            } => {
                out.push(0);
                put_u32(out, *class);
                distribution.iter().for_each(|p| put_f64(out, *p));
            }
        }
    }
}

fn put_svm(out: &mut Vec<u8>, s: &SvmModel) {
    let sv = s.support_vectors();
    put_u32(out, s.n_features() as u32);
    put_u32(out, s.n_classes() as u32);
    put_u32(out, sv.nrows() as u32);
    for &r in s.support_rows() {
        put_u32(out, r);
    }
    for v in sv.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(out, s.machines().len() as u32);
    for m in s.machines() {
        put_u32(out, m.positive_class);
        put_f64(out, m.bias);
        put_f64(out, m.objective);
        out.extend_from_slice(&(m.iterations as u64).to_le_bytes());
        put_u32(out, m.support.len() as u32);
        for (&i, &c) in m.support.iter().zip(&m.coef) {
            put_u32(out, i);
            put_f64(out, c);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn err<T>(m: impl Into<String>) -> Result<T, LearnerError> {
    Err(LearnerError::Format(m.into()))
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LearnerError> {
        if self.bytes.len() - self.pos < n {
            return err(format!("truncated at byte {} (need {n} more)", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, LearnerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, LearnerError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, LearnerError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, LearnerError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, LearnerError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// Element count whose encoding needs at least `unit` bytes each; fails
    /// before any allocation if the remaining input cannot hold them.
    fn count(&mut self, unit: usize) -> Result<usize, LearnerError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(unit) > self.bytes.len() - self.pos {
            return err(format!("count {n} exceeds remaining input"));
        }
        Ok(n)
    }

    fn done(&self) -> Result<(), LearnerError> {
        if self.pos != self.bytes.len() {
            return err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

pub fn read_model(bytes: &[u8]) -> Result<TrainedModel, LearnerError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CONTAINER_MAGIC {
        return err("bad magic");
    }
    let version = c.u16()?;
    if version != CONTAINER_VERSION {
        return err(format!("unsupported container version {version}"));
    }
    match c.u16()? {
        BYTE_ORDER_MARK => {}
        0xFFFE => return err("big-endian container not supported"),
        other => return err(format!("bad byte-order tag {other:#06x}")),
    }
    let kind = c.u8()?;
    let params_len = c.count(1)?;
    let params: LearnerParams = serde_json::from_slice(c.take(params_len)?)
        .map_err(|e| LearnerError::Format(format!("hyperparameters: {e}")))?;
    let body_len = c.u64()?;
    if body_len != (bytes.len() - c.pos) as u64 {
        return err("payload length does not match file size");
    }
    let model = match (kind, params) {
        (KIND_TREE, LearnerParams::Tree(p)) => {
            let (d, k, nodes) = get_tree(&mut c)?;
            TrainedModel::Tree(DecisionTreeModel::from_parts(p, d, k, nodes)?)
        }
        (KIND_FOREST, LearnerParams::Forest(p)) => {
            p.validate()
                .map_err(|e| LearnerError::Format(e.to_string()))?;
            let d = c.u32()? as usize;
            let k = c.u32()? as usize;
            let n = c.count(8)?;
            let tree_params = super::TreeParams {
                max_depth: p.max_depth,
                min_samples_leaf: p.min_samples_leaf,
            };
            let mut trees = Vec::with_capacity(n);
            for _ in 0..n {
                let len = c.u64()?;
                let start = c.pos;
                let (td, tk, nodes) = get_tree(&mut c)?;
                if (c.pos - start) as u64 != len || td != d || tk != k {
                    return err("forest member framing mismatch");
                }
                trees.push(DecisionTreeModel::from_parts(
                    tree_params.clone(),
                    d,
                    k,
                    nodes,
                )?);
            }
            TrainedModel::Forest(RandomForestModel::from_parts(p, d, k, trees)?)
        }
        (KIND_SVM, LearnerParams::Svm(p)) => TrainedModel::Svm(get_svm(&mut c, p)?),
        (kind @ (KIND_TREE | KIND_FOREST | KIND_SVM), params) => {
            return err(format!(
                "kind byte {kind} disagrees with {} hyperparameters",
                params.name()
            ))
        }
        (kind, _) => return err(format!("unknown model kind {kind}")),
    };
    c.done()?;
    Ok(model)
}

fn get_tree(c: &mut Cursor) -> Result<(usize, usize, Vec<Node>), LearnerError> {
    let d = c.u32()? as usize;
    let k = c.u32()? as usize;
    if k == 0 {
        return err("tree without classes");
    }
    let n = c.count(5)?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let node = match c.u8()? {
            1 => Node::Split {
                feature: c.u32()?,
                threshold: c.f64()?,
                left: c.u32()?,
                right: c.u32()?,
            },
            0 => {
                let class = c.u32()?;
                if k.saturating_mul(8) > c.bytes.len() - c.pos {
                    return err("leaf distribution exceeds remaining input");
                }
                let distribution = (0..k).map(|_| c.f64()).collect::<Result<_, _>>()?;
                Node::Leaf {
                    class,
                    distribution,
                }
            }
            tag => return err(format!("unknown node tag {tag}")),
        };
        nodes.push(node);
    }
    Ok((d, k, nodes))
}

fn get_svm(c: &mut Cursor, params: super::SvmParams) -> Result<SvmModel, LearnerError> {
    let d = c.u32()? as usize;
    let k = c.u32()? as usize;
    let n_sv = c.count(4)?;
    let support_rows = (0..n_sv).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
    let cells = n_sv
        .checked_mul(d)
        .filter(|&v| v.saturating_mul(4) <= c.bytes.len() - c.pos);
    let Some(cells) = cells else {
        return err("support vector block exceeds remaining input");
    };
    let raw = c.take(cells * 4)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let support_vectors = Array2::from_shape_vec((n_sv, d), values).expect("shape checked");
    let n_machines = c.count(32)?;
    let mut machines = Vec::with_capacity(n_machines);
    for _ in 0..n_machines {
        let positive_class = c.u32()?;
        let bias = c.f64()?;
        let objective = c.f64()?;
        let iterations = c.u64()? as usize;
        let n = c.count(12)?;
        let mut support = Vec::with_capacity(n);
        let mut coef = Vec::with_capacity(n);
        for _ in 0..n {
            support.push(c.u32()?);
            coef.push(c.f64()?);
        }
        machines.push(BinarySvm {
            positive_class,
            support,
            coef,
            bias,
            objective,
            iterations,
        });
    }
    if d == 0 {
        return err("svm without features");
    }
    SvmModel::from_parts(params, k, support_vectors, support_rows, machines)
}
