//! Reverse-mode differentiation over the real-valued computation graph.
//!
//! A [`Tape`] is an append-only list of primitive records; forward values
//! are computed eagerly at record time and saved, and [`Tape::backward`]
//! accumulates adjoints in reverse insertion order (which is a reverse
//! topological order, since inputs always precede their consumers).
//!
//! Matrix-function nodes save their eigendecomposition and reuse it in
//! the backward pass through the Loewner contraction
//! ([`crate::kernels::dsym_apply`]), so eigenvector derivatives are never
//! formed explicitly. Fréchet-mean nodes are stop-gradient: the anchor of
//! a tangent-space combination is treated as a reference point, and the
//! backward pass does not differentiate through the mean iteration.

pub mod adam;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{self, EigDecomp, ScalarFn, SpdMatrix, SymMatrix};
use crate::manifold::{frechet_mean_incremental, ManifoldPoint};

/// Index of a node on a tape.
pub type NodeId = usize;

/// Index of a registered parameter tensor.
pub type ParamId = usize;

/// Distance-node gradients vanish below this to avoid the sqrt kink at 0.
const DIST_GRAD_FLOOR: f64 = 1e-12;

/// A registered trainable tensor: flat row-major storage plus shape.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Registry of all trainable tensors of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> ParamId {
        assert_eq!(values.len(), rows * cols, "parameter shape mismatch");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            values,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id].values
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn as_matrix(&self, id: ParamId) -> DMatrix<f64> {
        let e = &self.entries[id];
        DMatrix::from_row_slice(e.rows, e.cols, &e.values)
    }
}

/// A forward value on the tape. Vectors are column matrices.
#[derive(Debug, Clone)]
pub enum Value {
    Scalar(f64),
    Mat(DMatrix<f64>),
}

impl Value {
    pub fn scalar(&self) -> Result<f64> {
        match self {
            Value::Scalar(s) => Ok(*s),
            Value::Mat(_) => Err(Error::ContractViolation(
                "expected scalar value, found matrix".into(),
            )),
        }
    }

    pub fn mat(&self) -> Result<&DMatrix<f64>> {
        match self {
            Value::Mat(m) => Ok(m),
            Value::Scalar(_) => Err(Error::ContractViolation(
                "expected matrix value, found scalar".into(),
            )),
        }
    }

    fn zeros_like(&self) -> Value {
        match self {
            Value::Scalar(_) => Value::Scalar(0.0),
            Value::Mat(m) => Value::Mat(DMatrix::zeros(m.nrows(), m.ncols())),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(s) => s.is_finite(),
            Value::Mat(m) => m.iter().all(|x| x.is_finite()),
        }
    }
}

/// How an affine node receives its input vector: a single column node, or
/// individual scalar nodes packed in order.
#[derive(Debug, Clone)]
pub enum AffineArg {
    Vector(NodeId),
    Scalars(Vec<NodeId>),
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    ParamElem {
        id: ParamId,
        index: usize,
    },
    ParamMat {
        id: ParamId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        s: NodeId,
        x: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Trace {
        x: NodeId,
    },
    EigFn {
        x: NodeId,
        f: ScalarFn,
        decomp: EigDecomp,
    },
    /// Stop-gradient: value is the Fréchet mean of the inputs' values.
    FrechetMean,
    Relu {
        x: NodeId,
        threshold: NodeId,
    },
    Affine {
        weight: NodeId,
        bias: NodeId,
        xs: AffineArg,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    /// Geodesic distance to a fixed SPD reference point.
    DistanceTo {
        x: NodeId,
        inv_sqrt_ref: DMatrix<f64>,
        decomp: EigDecomp,
        log_mat: DMatrix<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::ParamElem { .. } => "param-elem",
            Op::ParamMat { .. } => "param-mat",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Trace { .. } => "trace",
            Op::EigFn { .. } => "eig-function-apply",
            Op::FrechetMean => "frechet-mean-node",
            Op::Relu { .. } => "relu",
            Op::Affine { .. } => "affine",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::DistanceTo { .. } => "distance-node",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
}

/// Per-parameter gradients, aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradBundle {
    grads: Vec<Vec<f64>>,
}

impl GradBundle {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradBundle {
            grads: params.entries.iter().map(|e| vec![0.0; e.values.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id]
    }

    /// Adds `other` into `self`, in parameter-id order.
    pub fn accumulate(&mut self, other: &GradBundle) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (dst, src) in self.grads.iter_mut().zip(other.grads.iter()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Recorded computation over a parameter set.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Value) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn node_value(&self, id: NodeId) -> Result<&Value> {
        self.nodes
            .get(id)
            .map(|n| &n.value)
            .ok_or_else(|| Error::ContractViolation(format!("node id {id} out of range")))
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Constant, Value::Scalar(v))
    }

    pub fn constant_mat(&mut self, m: DMatrix<f64>) -> NodeId {
        self.push(Op::Constant, Value::Mat(m))
    }

    /// A single scalar entry of a registered parameter.
    pub fn param_elem(&mut self, id: ParamId, index: usize) -> Result<NodeId> {
        let entry = self.params.entry(id);
        if index >= entry.values.len() {
            return Err(Error::ContractViolation(format!(
                "param {} index {index} out of range",
                entry.name
            )));
        }
        let v = entry.values[index];
        Ok(self.push(Op::ParamElem { id, index }, Value::Scalar(v)))
    }

    /// A whole parameter tensor as a matrix node.
    pub fn param_mat(&mut self, id: ParamId) -> NodeId {
        let m = self.params.as_matrix(id);
        self.push(Op::ParamMat { id }, Value::Mat(m))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = match (self.node_value(a)?, self.node_value(b)?) {
            (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(x + y),
            (Value::Mat(x), Value::Mat(y)) => {
                if x.shape() != y.shape() {
                    return Err(Error::ContractViolation(format!(
                        "add shape mismatch {:?} vs {:?}",
                        x.shape(),
                        y.shape()
                    )));
                }
                Value::Mat(x + y)
            }
            _ => {
                return Err(Error::ContractViolation(
                    "add requires both operands scalar or both matrix".into(),
                ))
            }
        };
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Scalar times value: `s` must be a scalar node.
    pub fn scale(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        let sv = self.node_value(s)?.scalar()?;
        let value = match self.node_value(x)? {
            Value::Scalar(xv) => Value::Scalar(sv * xv),
            Value::Mat(m) => Value::Mat(m * sv),
        };
        Ok(self.push(Op::Scale { s, x }, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let am = self.node_value(a)?.mat()?;
        let bm = self.node_value(b)?.mat()?;
        if am.ncols() != bm.nrows() {
            return Err(Error::ContractViolation(format!(
                "matmul shape mismatch {:?} x {:?}",
                am.shape(),
                bm.shape()
            )));
        }
        let value = Value::Mat(am * bm);
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    pub fn trace(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.node_value(x)?.mat()?;
        if m.nrows() != m.ncols() {
            return Err(Error::ContractViolation(
                "trace requires a square matrix".into(),
            ));
        }
        let t = m.trace();
        Ok(self.push(Op::Trace { x }, Value::Scalar(t)))
    }

    /// Applies a scalar function through the eigendecomposition of a
    /// symmetric matrix node. The decomposition is saved for the backward
    /// Loewner contraction.
    pub fn eig_fn(&mut self, x: NodeId, f: ScalarFn) -> Result<NodeId> {
        let m = self.node_value(x)?.mat()?;
        if m.nrows() != m.ncols() {
            return Err(Error::ContractViolation(
                "eig-function-apply requires a square matrix".into(),
            ));
        }
        let sym = SymMatrix::symmetrize(m);
        let decomp = kernels::sym_eig(&sym)?;
        if f.needs_positive() && decomp.eigenvalues[0] < kernels::SPD_EIG_FLOOR {
            return Err(Error::NotPositiveDefinite {
                min_eig: decomp.eigenvalues[0],
            });
        }
        let value = Value::Mat(decomp.apply_scalar(|t| f.eval(t)));
        Ok(self.push(Op::EigFn { x, f, decomp }, value))
    }

    /// Stop-gradient Fréchet mean of SPD matrix nodes (uniform weights).
    /// Anchors need a stable reference point, not an optimality
    /// certificate, so the node uses the single-pass incremental mean —
    /// the documented fast path for large point sets. It is deterministic
    /// (fixed input order) and equivariant like the fixed-point mean.
    pub fn frechet_mean_node(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::ContractViolation(
                "frechet-mean-node needs at least one input".into(),
            ));
        }
        // node values are symmetric up to rounding; re-symmetrize before
        // treating them as manifold points
        let points: Vec<ManifoldPoint> = inputs
            .iter()
            .map(|&id| {
                let m = self.node_value(id)?.mat()?;
                Ok(ManifoldPoint::from_spd(SpdMatrix::from_unchecked(
                    SymMatrix::symmetrize(m).into_inner(),
                )))
            })
            .collect::<Result<_>>()?;
        let w = vec![1.0 / points.len() as f64; points.len()];
        let mean = frechet_mean_incremental(&points, &w)?;
        Ok(self.push(Op::FrechetMean, Value::Mat(mean.spd_matrix().into_inner())))
    }

    /// Componentwise `max(entry, threshold)`; the threshold is a scalar
    /// node so it can be trained.
    pub fn relu(&mut self, x: NodeId, threshold: NodeId) -> Result<NodeId> {
        let t = self.node_value(threshold)?.scalar()?;
        let m = self.node_value(x)?.mat()?;
        let value = Value::Mat(m.map(|e| e.max(t)));
        Ok(self.push(Op::Relu { x, threshold }, value))
    }

    /// `W x + b` with `x` either a column node or packed scalar nodes.
    pub fn affine(&mut self, weight: NodeId, bias: NodeId, xs: AffineArg) -> Result<NodeId> {
        let w = self.node_value(weight)?.mat()?.clone();
        let b = self.node_value(bias)?.mat()?.clone();
        let x = self.gather_affine_input(&xs)?;
        if w.ncols() != x.nrows() || b.nrows() != w.nrows() || b.ncols() != 1 || x.ncols() != 1 {
            return Err(Error::ContractViolation(format!(
                "affine shape mismatch: W {:?}, b {:?}, x {:?}",
                w.shape(),
                b.shape(),
                x.shape()
            )));
        }
        let value = Value::Mat(&w * &x + &b);
        Ok(self.push(Op::Affine { weight, bias, xs }, value))
    }

    fn gather_affine_input(&self, xs: &AffineArg) -> Result<DMatrix<f64>> {
        match xs {
            AffineArg::Vector(id) => {
                let m = self.node_value(*id)?.mat()?;
                Ok(m.clone())
            }
            AffineArg::Scalars(ids) => {
                let mut v = DMatrix::zeros(ids.len(), 1);
                for (i, &id) in ids.iter().enumerate() {
                    v[(i, 0)] = self.node_value(id)?.scalar()?;
                }
                Ok(v)
            }
        }
    }

    /// Combined softmax + cross-entropy against an integer label.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let z = self.node_value(logits)?.mat()?;
        if z.ncols() != 1 || label >= z.nrows() {
            return Err(Error::ContractViolation(format!(
                "softmax-cross-entropy: logits {:?}, label {label}",
                z.shape()
            )));
        }
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let loss = -(probs[label].max(1e-300)).ln();
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            Value::Scalar(loss),
        ))
    }

    /// Geodesic distance from an SPD matrix node to a fixed reference
    /// point (typically a stop-gradient Fréchet mean).
    pub fn distance_to(&mut self, x: NodeId, reference: &SpdMatrix) -> Result<NodeId> {
        let m = self.node_value(x)?.mat()?;
        if m.shape() != (reference.dim(), reference.dim()) {
            return Err(Error::ContractViolation(format!(
                "distance-node shape mismatch {:?} vs reference dim {}",
                m.shape(),
                reference.dim()
            )));
        }
        let inv_sqrt_ref = kernels::spd_invsqrtm(reference)?.into_inner();
        let s = &inv_sqrt_ref * m * &inv_sqrt_ref;
        let s = SymMatrix::symmetrize(&s);
        let decomp = kernels::sym_eig(&s)?;
        if decomp.eigenvalues[0] < kernels::SPD_EIG_FLOOR {
            return Err(Error::NotPositiveDefinite {
                min_eig: decomp.eigenvalues[0],
            });
        }
        let log_mat = decomp.apply_scalar(f64::ln);
        let d = log_mat.norm();
        Ok(self.push(
            Op::DistanceTo {
                x,
                inv_sqrt_ref,
                decomp,
                log_mat,
            },
            Value::Scalar(d),
        ))
    }

    /// Runs the backward pass from a scalar loss node, accumulating
    /// adjoints in reverse topological order. Deterministic: identical
    /// tapes yield bit-identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<GradBundle> {
        let loss_node = self
            .nodes
            .get(loss)
            .ok_or_else(|| Error::ContractViolation(format!("loss node {loss} out of range")))?;
        if !matches!(loss_node.value, Value::Scalar(_)) {
            return Err(Error::ContractViolation(
                "backward requires a scalar loss node".into(),
            ));
        }

        let mut adjoints: Vec<Option<Value>> = vec![None; self.nodes.len()];
        adjoints[loss] = Some(Value::Scalar(1.0));
        let mut bundle = GradBundle::zeros_like(self.params);

        for id in (0..=loss).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            let node = &self.nodes[id];
            if !adj.is_finite() {
                return Err(Error::PoisonedGradient {
                    node: id,
                    op: node.op.name().to_string(),
                });
            }
            match &node.op {
                Op::Constant | Op::FrechetMean => {}
                Op::ParamElem { id: pid, index } => {
                    bundle.grads[*pid][*index] += adj.scalar()?;
                }
                Op::ParamMat { id: pid } => {
                    let m = adj.mat()?;
                    let entry = self.params.entry(*pid);
                    for i in 0..entry.rows {
                        for j in 0..entry.cols {
                            bundle.grads[*pid][i * entry.cols + j] += m[(i, j)];
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut adjoints[*a], &adj, &self.nodes[*a].value)?;
                    accumulate(&mut adjoints[*b], &adj, &self.nodes[*b].value)?;
                }
                Op::Scale { s, x } => {
                    let sv = self.nodes[*s].value.scalar()?;
                    let s_adj = match (&adj, &self.nodes[*x].value) {
                        (Value::Scalar(a), Value::Scalar(xv)) => Value::Scalar(a * xv),
                        (Value::Mat(a), Value::Mat(xv)) => Value::Scalar(a.dot(xv)),
                        _ => {
                            return Err(Error::ContractViolation(
                                "scale backward shape mismatch".into(),
                            ))
                        }
                    };
                    accumulate(&mut adjoints[*s], &s_adj, &self.nodes[*s].value)?;
                    let x_adj = match &adj {
                        Value::Scalar(a) => Value::Scalar(a * sv),
                        Value::Mat(a) => Value::Mat(a * sv),
                    };
                    accumulate(&mut adjoints[*x], &x_adj, &self.nodes[*x].value)?;
                }
                Op::MatMul { a, b } => {
                    let g = adj.mat()?;
                    let am = self.nodes[*a].value.mat()?;
                    let bm = self.nodes[*b].value.mat()?;
                    accumulate(
                        &mut adjoints[*a],
                        &Value::Mat(g * bm.transpose()),
                        &self.nodes[*a].value,
                    )?;
                    accumulate(
                        &mut adjoints[*b],
                        &Value::Mat(am.transpose() * g),
                        &self.nodes[*b].value,
                    )?;
                }
                Op::Trace { x } => {
                    let g = adj.scalar()?;
                    let n = self.nodes[*x].value.mat()?.nrows();
                    accumulate(
                        &mut adjoints[*x],
                        &Value::Mat(DMatrix::identity(n, n) * g),
                        &self.nodes[*x].value,
                    )?;
                }
                Op::EigFn { x, f, decomp } => {
                    let g = SymMatrix::symmetrize(adj.mat()?);
                    let back = kernels::dsym_apply(decomp, |t| f.eval(t), |t| f.deriv(t), &g);
                    accumulate(
                        &mut adjoints[*x],
                        &Value::Mat(back.into_inner()),
                        &self.nodes[*x].value,
                    )?;
                }
                Op::Relu { x, threshold } => {
                    let g = adj.mat()?;
                    let t = self.nodes[*threshold].value.scalar()?;
                    let xm = self.nodes[*x].value.mat()?;
                    let mut x_adj = DMatrix::zeros(xm.nrows(), xm.ncols());
                    let mut t_adj = 0.0;
                    for i in 0..xm.nrows() {
                        for j in 0..xm.ncols() {
                            if xm[(i, j)] > t {
                                x_adj[(i, j)] = g[(i, j)];
                            } else {
                                t_adj += g[(i, j)];
                            }
                        }
                    }
                    accumulate(&mut adjoints[*x], &Value::Mat(x_adj), &self.nodes[*x].value)?;
                    accumulate(
                        &mut adjoints[*threshold],
                        &Value::Scalar(t_adj),
                        &self.nodes[*threshold].value,
                    )?;
                }
                Op::Affine { weight, bias, xs } => {
                    let g = adj.mat()?;
                    let w = self.nodes[*weight].value.mat()?;
                    let x = self.gather_affine_input(xs)?;
                    accumulate(
                        &mut adjoints[*weight],
                        &Value::Mat(g * x.transpose()),
                        &self.nodes[*weight].value,
                    )?;
                    accumulate(
                        &mut adjoints[*bias],
                        &Value::Mat(g.clone()),
                        &self.nodes[*bias].value,
                    )?;
                    let x_adj = w.transpose() * g;
                    match xs {
                        AffineArg::Vector(id) => {
                            accumulate(
                                &mut adjoints[*id],
                                &Value::Mat(x_adj),
                                &self.nodes[*id].value,
                            )?;
                        }
                        AffineArg::Scalars(ids) => {
                            for (i, &sid) in ids.iter().enumerate() {
                                accumulate(
                                    &mut adjoints[sid],
                                    &Value::Scalar(x_adj[(i, 0)]),
                                    &self.nodes[sid].value,
                                )?;
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let g = adj.scalar()?;
                    let mut z_adj = DMatrix::zeros(probs.len(), 1);
                    for (k, &p) in probs.iter().enumerate() {
                        let onehot = if k == *label { 1.0 } else { 0.0 };
                        z_adj[(k, 0)] = g * (p - onehot);
                    }
                    accumulate(
                        &mut adjoints[*logits],
                        &Value::Mat(z_adj),
                        &self.nodes[*logits].value,
                    )?;
                }
                Op::DistanceTo {
                    x,
                    inv_sqrt_ref,
                    decomp,
                    log_mat,
                } => {
                    let g = adj.scalar()?;
                    let d = node.value.scalar()?;
                    if d > DIST_GRAD_FLOOR {
                        let l_adj = SymMatrix::symmetrize(&(log_mat * (g / d)));
                        let s_adj =
                            kernels::dsym_apply(decomp, f64::ln, |t| 1.0 / t, &l_adj);
                        let x_adj = inv_sqrt_ref * s_adj.mat() * inv_sqrt_ref;
                        accumulate(
                            &mut adjoints[*x],
                            &Value::Mat(x_adj),
                            &self.nodes[*x].value,
                        )?;
                    }
                }
            }
        }

        if !bundle.all_finite() {
            return Err(Error::PoisonedGradient {
                node: loss,
                op: "gradient-assembly".to_string(),
            });
        }
        Ok(bundle)
    }
}

fn accumulate(slot: &mut Option<Value>, delta: &Value, template: &Value) -> Result<()> {
    let current = slot.get_or_insert_with(|| template.zeros_like());
    match (current, delta) {
        (Value::Scalar(c), Value::Scalar(d)) => *c += d,
        (Value::Mat(c), Value::Mat(d)) => {
            if c.shape() != d.shape() {
                return Err(Error::ContractViolation(format!(
                    "adjoint shape mismatch {:?} vs {:?}",
                    c.shape(),
                    d.shape()
                )));
            }
            *c += d;
        }
        _ => {
            return Err(Error::ContractViolation(
                "adjoint kind mismatch (scalar vs matrix)".into(),
            ))
        }
    }
    Ok(())
}
