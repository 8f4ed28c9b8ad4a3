// Wengert-list reverse-mode differentiation over dense matrices.
//
// Nodes are appended in evaluation order, so a node's inputs always carry a
// smaller id. `backward` walks ids from the loss down to 0 and visits every
// node at most once.

use super::linalg::{condition_estimate, Lu};
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Condition numbers above this make `linear_solve` fail with
/// [`AutodiffError::SingularSystem`].
pub const DEFAULT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds with their non-tensor attributes.
///
/// Unless noted, inputs are matrices of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `a + b`; `b` may also be a `1 × cols` row broadcast over `a`'s rows.
    Add,
    /// `a - b`, same broadcasting as [`OpKind::Add`].
    Sub,
    /// Elementwise product.
    Mul,
    ScalarMul(f64),
    AddScalar(f64),
    MatMul,
    Exp,
    Log,
    Negate,
    /// `n × c -> n × 1`.
    RowSum,
    /// Sum of every element, `-> 1 × 1`.
    Sum,
    /// Divides each row by its sum.
    RowNormalize,
    Softmax,
    /// Inputs `a: n × d`, `b: m × d`, `sigma: 1 × d`; output `n × m` with
    /// entries `Σ_k (a_ik - b_jk)² / (2 σ_k²)`.
    PairwiseScaledSqDist,
    /// Inputs `A: n × n`, `B: n × m`; output `X` with `A·X = B`.
    LinearSolve,
    /// `Σ |x|`, `-> 1 × 1`.
    L1Norm,
    /// Mean negative log-softmax of the labelled class per row, `-> 1 × 1`.
    CrossEntropy {
        labels: Vec<usize>,
    },
    Sigmoid,
    Relu,
    /// Shannon entropy in nats of each row, `n × c -> n × 1`.
    EntropyPerRow,
    ConcatRows,
    SliceRows {
        start: usize,
        len: usize,
    },
    ConcatCols,
    SliceCols {
        start: usize,
        len: usize,
    },
    Clamp {
        lo: f64,
        hi: f64,
    },
    Reshape {
        rows: usize,
        cols: usize,
    },
    /// Channels-last patch extraction for a valid, stride-1 convolution:
    /// `(batch·h·w) × c -> (batch·oh·ow) × (k·k·c)`.
    Im2Col {
        batch: usize,
        height: usize,
        width: usize,
        kernel: usize,
    },
    /// 2×2 max pooling, stride 2, on channels-last rows.
    MaxPool2 {
        batch: usize,
        height: usize,
        width: usize,
    },
    /// Per-column normalization with affine `gamma`, `beta` (`1 × c` each).
    /// With `running = None` the batch statistics are used; otherwise the
    /// supplied `(mean, var)` are treated as constants.
    BatchNorm {
        eps: f64,
        running: Option<(Vec<f64>, Vec<f64>)>,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul(_) => "scalar-mul",
            OpKind::AddScalar(_) => "add-scalar",
            OpKind::MatMul => "matmul",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Negate => "negate",
            OpKind::RowSum => "row-sum",
            OpKind::Sum => "sum",
            OpKind::RowNormalize => "row-normalize",
            OpKind::Softmax => "softmax",
            OpKind::PairwiseScaledSqDist => "pairwise-scaled-sqdist",
            OpKind::LinearSolve => "linear-solve",
            OpKind::L1Norm => "l1-norm",
            OpKind::CrossEntropy { .. } => "cross-entropy",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::EntropyPerRow => "entropy-per-row",
            OpKind::ConcatRows => "concat-rows",
            OpKind::SliceRows { .. } => "slice-rows",
            OpKind::ConcatCols => "concat-cols",
            OpKind::SliceCols { .. } => "slice-cols",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Im2Col { .. } => "im2col",
            OpKind::MaxPool2 { .. } => "maxpool2",
            OpKind::BatchNorm { .. } => "batch-norm",
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Constant,
    Param(ParamId),
    Op(OpKind),
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    Lu(Lu),
    Probs(Tensor),
    Indices(Vec<usize>),
    Norm { xhat: Tensor, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    saved: Saved,
    row_scale: Option<Vec<f64>>,
}

/// Recorded computation. Confined to one thread; build a fresh tape per
/// forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    condition_limit: f64,
    batch_index: Option<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn dims(t: &Tensor) -> String {
    format!("{}×{}", t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), condition_limit: DEFAULT_CONDITION_LIMIT, batch_index: None }
    }

    pub fn with_condition_limit(mut self, limit: f64) -> Self {
        self.condition_limit = limit;
        self
    }

    /// Tags `SingularSystem` errors raised on this tape with a batch index.
    pub fn set_batch_index(&mut self, index: usize) {
        self.batch_index = Some(index);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Constant, Vec::new(), value, Saved::None)
    }

    /// Snapshots a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(NodeKind::Param(id), Vec::new(), store.value(id).clone(), Saved::None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Batch mean and (biased) variance observed by a training-mode
    /// batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes.get(id.0)?.saved {
            Saved::Norm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, value: Tensor, saved: Saved) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { kind, inputs, value, saved, row_scale: None });
        id
    }

    fn check(&self, id: NodeId) -> Result<(), AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(id.0))
        }
    }

    /// Multiplies the upstream gradient arriving at `id` row-wise by `scale`
    /// during backward. The forward value is untouched.
    pub fn set_row_gradient_scale(&mut self, id: NodeId, scale: &[f64]) -> Result<(), AutodiffError> {
        self.check(id)?;
        let rows = self.nodes[id.0].value.rows();
        if scale.len() != rows {
            return Err(AutodiffError::ScaleLength { expected: rows, found: scale.len() });
        }
        if let Some(bad) = scale.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AutodiffError::ScaleRange(*bad));
        }
        self.nodes[id.0].row_scale = Some(scale.to_vec());
        Ok(())
    }

    /// Evaluates `kind` on `inputs` and appends the result.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        for &i in inputs {
            self.check(i)?;
        }
        let (value, saved) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            self.forward(&kind, &vals)?
        };
        Ok(self.push(NodeKind::Op(kind), inputs.to_vec(), value, saved))
    }

    fn forward(&self, kind: &OpKind, x: &[&Tensor]) -> Result<(Tensor, Saved), AutodiffError> {
        let name = kind.name();
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::LinearSolve => Some(2),
            OpKind::PairwiseScaledSqDist | OpKind::BatchNorm { .. } => Some(3),
            OpKind::ConcatRows | OpKind::ConcatCols => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if x.len() != n => {
                return Err(mismatch(name, format!("expected {n} inputs, got {}", x.len())));
            }
            None if x.is_empty() => return Err(mismatch(name, "no inputs".into())),
            _ => {}
        }
        let plain = |t: Tensor| Ok((t, Saved::None));
        match kind {
            OpKind::Add | OpKind::Sub => {
                let (a, b) = (x[0], x[1]);
                let sign = if *kind == OpKind::Add { 1.0 } else { -1.0 };
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(p, q)| p + sign * q).collect();
                    plain(Tensor::new(a.shape().to_vec(), data)?)
                } else if b.rows() == 1 && b.cols() == a.cols() {
                    let c = a.cols();
                    let mut out = a.clone();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v += sign * b.data()[i % c];
                    }
                    plain(out)
                } else {
                    Err(mismatch(name, format!("{} vs {}", dims(a), dims(b))))
                }
            }
            OpKind::Mul => {
                let (a, b) = (x[0], x[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch(name, format!("{} vs {}", dims(a), dims(b))));
                }
                let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
                plain(Tensor::new(a.shape().to_vec(), data)?)
            }
            OpKind::ScalarMul(c) => plain(x[0].map(|v| c * v)),
            OpKind::AddScalar(c) => plain(x[0].map(|v| c + v)),
            OpKind::MatMul => {
                let (a, b) = (x[0], x[1]);
                if a.cols() != b.rows() {
                    return Err(mismatch(
                        name,
                        format!("inner dims {}≠{} ({} · {})", a.cols(), b.rows(), dims(a), dims(b)),
                    ));
                }
                plain(a.matmul(b))
            }
            OpKind::Exp => plain(x[0].map(f64::exp)),
            OpKind::Log => plain(x[0].map(f64::ln)),
            OpKind::Negate => plain(x[0].map(|v| -v)),
            OpKind::RowSum => {
                let a = x[0];
                plain(Tensor::matrix(a.rows(), 1, (0..a.rows()).map(|i| a.row(i).iter().sum()).collect()))
            }
            OpKind::Sum => plain(Tensor::scalar(x[0].data().iter().sum())),
            OpKind::RowNormalize => {
                let mut out = x[0].clone();
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                plain(out)
            }
            OpKind::Softmax => plain(softmax_rows(x[0])),
            OpKind::PairwiseScaledSqDist => {
                let (a, b, s) = (x[0], x[1], x[2]);
                let d = a.cols();
                if b.cols() != d || s.len() != d {
                    return Err(mismatch(name, format!("features {} and {}, bandwidth {}", dims(a), dims(b), dims(s))));
                }
                let inv: Vec<f64> = s.data().iter().map(|v| 0.5 / (v * v)).collect();
                let (n, m) = (a.rows(), b.rows());
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    let ai = a.row(i);
                    for j in 0..m {
                        let bj = b.row(j);
                        let mut acc = 0.0;
                        for k in 0..d {
                            let diff = ai[k] - bj[k];
                            acc += diff * diff * inv[k];
                        }
                        out[i * m + j] = acc;
                    }
                }
                plain(Tensor::matrix(n, m, out))
            }
            OpKind::LinearSolve => {
                let (a, b) = (x[0], x[1]);
                if a.rows() != a.cols() {
                    return Err(mismatch(name, format!("matrix {} is not square", dims(a))));
                }
                if b.rows() != a.rows() {
                    return Err(mismatch(name, format!("rhs {} for matrix {}", dims(b), dims(a))));
                }
                let singular = |condition| AutodiffError::SingularSystem { batch: self.batch_index, condition };
                let lu = Lu::factor(a).ok_or_else(|| singular(f64::INFINITY))?;
                let cond = condition_estimate(a, &lu);
                if cond.is_nan() || cond > self.condition_limit {
                    return Err(singular(cond));
                }
                Ok((lu.solve(b), Saved::Lu(lu)))
            }
            OpKind::L1Norm => plain(Tensor::scalar(x[0].data().iter().map(|v| v.abs()).sum())),
            OpKind::CrossEntropy { labels } => {
                let a = x[0];
                if labels.len() != a.rows() {
                    return Err(mismatch(name, format!("{} labels for {} rows", labels.len(), a.rows())));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= a.cols()) {
                    return Err(mismatch(name, format!("label {bad} outside {} classes", a.cols())));
                }
                let probs = softmax_rows(a);
                let n = a.rows() as f64;
                let loss = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        let row = a.row(i);
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        lse - row[l]
                    })
                    .sum::<f64>()
                    / n;
                Ok((Tensor::scalar(loss), Saved::Probs(probs)))
            }
            OpKind::Sigmoid => plain(x[0].map(sigmoid)),
            OpKind::Relu => plain(x[0].map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 })),
            OpKind::EntropyPerRow => {
                let a = x[0];
                let h = (0..a.rows())
                    .map(|i| -a.row(i).iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>())
                    .collect();
                plain(Tensor::matrix(a.rows(), 1, h))
            }
            OpKind::ConcatRows => {
                let c = x[0].cols();
                if let Some(bad) = x.iter().find(|t| t.cols() != c) {
                    return Err(mismatch(name, format!("{} columns vs {}", bad.cols(), c)));
                }
                let rows = x.iter().map(|t| t.rows()).sum();
                plain(Tensor::matrix(rows, c, x.iter().flat_map(|t| t.data().iter().copied()).collect()))
            }
            OpKind::SliceRows { start, len } => {
                let a = x[0];
                if start + len > a.rows() {
                    return Err(mismatch(name, format!("rows {start}..{} of {}", start + len, dims(a))));
                }
                let c = a.cols();
                plain(Tensor::matrix(*len, c, a.data()[start * c..(start + len) * c].to_vec()))
            }
            OpKind::ConcatCols => {
                let r = x[0].rows();
                if let Some(bad) = x.iter().find(|t| t.rows() != r) {
                    return Err(mismatch(name, format!("{} rows vs {}", bad.rows(), r)));
                }
                let cols: usize = x.iter().map(|t| t.cols()).sum();
                let mut out = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for t in x {
                        out.extend_from_slice(t.row(i));
                    }
                }
                plain(Tensor::matrix(r, cols, out))
            }
            OpKind::SliceCols { start, len } => {
                let a = x[0];
                if start + len > a.cols() {
                    return Err(mismatch(name, format!("cols {start}..{} of {}", start + len, dims(a))));
                }
                let mut out = Vec::with_capacity(a.rows() * len);
                for i in 0..a.rows() {
                    out.extend_from_slice(&a.row(i)[*start..start + len]);
                }
                plain(Tensor::matrix(a.rows(), *len, out))
            }
            OpKind::Clamp { lo, hi } => plain(x[0].map(|v| v.clamp(*lo, *hi))),
            OpKind::Reshape { rows, cols } => plain(x[0].clone().reshaped(vec![*rows, *cols])?),
            OpKind::Im2Col { batch, height, width, kernel } => {
                let a = x[0];
                if a.rows() != batch * height * width || *kernel > (*height).min(*width) {
                    return Err(mismatch(
                        name,
                        format!("input {} for batch {batch} of {height}×{width}, kernel {kernel}", dims(a)),
                    ));
                }
                let index = im2col_index(*batch, *height, *width, *kernel, a.cols());
                let rows = index.len() / (kernel * kernel * a.cols());
                let data = index.iter().map(|&s| a.data()[s]).collect();
                plain(Tensor::matrix(rows, kernel * kernel * a.cols(), data))
            }
            OpKind::MaxPool2 { batch, height, width } => {
                let a = x[0];
                if a.rows() != batch * height * width {
                    return Err(mismatch(name, format!("input {} for batch {batch} of {height}×{width}", dims(a))));
                }
                let c = a.cols();
                let (oh, ow) = (height / 2, width / 2);
                let mut out = Vec::with_capacity(batch * oh * ow * c);
                let mut arg = Vec::with_capacity(out.capacity());
                for b in 0..*batch {
                    for i in 0..oh {
                        for j in 0..ow {
                            for ch in 0..c {
                                let mut best = (usize::MAX, f64::NEG_INFINITY);
                                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let r = (b * height + 2 * i + di) * width + 2 * j + dj;
                                    let idx = r * c + ch;
                                    if a.data()[idx] > best.1 || best.0 == usize::MAX {
                                        best = (idx, a.data()[idx]);
                                    }
                                }
                                out.push(best.1);
                                arg.push(best.0);
                            }
                        }
                    }
                }
                Ok((Tensor::matrix(batch * oh * ow, c, out), Saved::Indices(arg)))
            }
            OpKind::BatchNorm { eps, running } => {
                let (a, gamma, beta) = (x[0], x[1], x[2]);
                let c = a.cols();
                if gamma.len() != c || beta.len() != c {
                    return Err(mismatch(name, format!("input {} with affine {}", dims(a), dims(gamma))));
                }
                let n = a.rows();
                let (mean, var) = match running {
                    Some((m, v)) if m.len() == c && v.len() == c => (m.clone(), v.clone()),
                    Some(_) => return Err(mismatch(name, "running statistics width".into())),
                    None => {
                        let mut mean = vec![0.0; c];
                        for i in 0..n {
                            for (m, v) in mean.iter_mut().zip(a.row(i)) {
                                *m += v;
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= n as f64);
                        let mut var = vec![0.0; c];
                        for i in 0..n {
                            for k in 0..c {
                                let d = a.row(i)[k] - mean[k];
                                var[k] += d * d;
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= n as f64);
                        (mean, var)
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = a.clone();
                for i in 0..n {
                    for (k, v) in xhat.row_mut(i).iter_mut().enumerate() {
                        *v = (*v - mean[k]) * inv_std[k];
                    }
                }
                let mut out = xhat.clone();
                for i in 0..n {
                    for (k, v) in out.row_mut(i).iter_mut().enumerate() {
                        *v = gamma.data()[k] * *v + beta.data()[k];
                    }
                }
                Ok((out, Saved::Norm { xhat, inv_std, mean, var }))
            }
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        self.check(loss)?;
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(shape, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(scale) = &node.row_scale {
                for (r, &s) in scale.iter().enumerate() {
                    g.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
            }
            if let NodeKind::Op(kind) = &node.kind {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let input_grads = vjp(kind, &inputs, &node.value, &node.saved, &g);
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&ig),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.kind {
                NodeKind::Param(p) => Some((NodeId(i), p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    // ── convenience wrappers ────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::ScalarMul(c), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Log, &[a])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Negate, &[a])
    }
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::RowSum, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Sum, &[a])
    }
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::RowNormalize, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Softmax, &[a])
    }
    pub fn pairwise_scaled_sqdist(&mut self, a: NodeId, b: NodeId, sigma: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::PairwiseScaledSqDist, &[a, b, sigma])
    }
    pub fn linear_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::LinearSolve, &[a, b])
    }
    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::L1Norm, &[a])
    }
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::CrossEntropy { labels: labels.to_vec() }, &[logits])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Relu, &[a])
    }
    pub fn entropy_per_row(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::EntropyPerRow, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::ConcatRows, parts)
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::SliceRows { start, len }, &[a])
    }
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::ConcatCols, parts)
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::SliceCols { start, len }, &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId, AutodiffError> {
        self.record(OpKind::Reshape { rows, cols }, &[a])
    }
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`'s output, if the node
    /// lies on a path to the loss.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Adds every parameter-leaf gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = self.wrt(node) {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }

    /// Like [`Gradients::accumulate_into`], restricted to `ids`.
    pub fn accumulate_subset(&self, store: &mut ParamStore, ids: &[ParamId]) {
        for &(node, pid) in &self.params {
            if !ids.contains(&pid) {
                continue;
            }
            if let Some(g) = self.wrt(node) {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Flat source indices for [`OpKind::Im2Col`], in output order.
fn im2col_index(batch: usize, h: usize, w: usize, k: usize, c: usize) -> Vec<usize> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut idx = Vec::with_capacity(batch * oh * ow * k * k * c);
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                for di in 0..k {
                    for dj in 0..k {
                        let base = ((b * h + i + di) * w + j + dj) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

/// Reduces a gradient of `a`'s shape onto a `1 × cols` broadcast operand.
fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::matrix(1, c, out)
}

/// Vector-Jacobian products: gradient of each input given upstream `g`.
fn vjp(kind: &OpKind, x: &[&Tensor], y: &Tensor, saved: &Saved, g: &Tensor) -> Vec<Option<Tensor>> {
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("same shape");
    match kind {
        OpKind::Add | OpKind::Sub => {
            let sign = if *kind == OpKind::Add { 1.0 } else { -1.0 };
            let gb = if x[1].shape() == x[0].shape() { g.clone() } else { column_sums(g) };
            vec![Some(g.clone()), Some(gb.map(|v| sign * v))]
        }
        OpKind::Mul => {
            let ga = g.data().iter().zip(x[1].data()).map(|(p, q)| p * q).collect();
            let gb = g.data().iter().zip(x[0].data()).map(|(p, q)| p * q).collect();
            vec![Some(like(x[0], ga)), Some(like(x[1], gb))]
        }
        OpKind::ScalarMul(c) => vec![Some(g.map(|v| c * v))],
        OpKind::AddScalar(_) => vec![Some(g.clone())],
        OpKind::MatMul => vec![Some(g.matmul_t(x[1])), Some(x[0].t_matmul(g))],
        OpKind::Exp => {
            vec![Some(like(x[0], g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect()))]
        }
        OpKind::Log => {
            vec![Some(like(x[0], g.data().iter().zip(x[0].data()).map(|(p, q)| p / q).collect()))]
        }
        OpKind::Negate => vec![Some(g.map(|v| -v))],
        OpKind::RowSum => {
            let a = x[0];
            let mut out = Tensor::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                let gi = g.data()[i];
                out.row_mut(i).iter_mut().for_each(|v| *v = gi);
            }
            vec![Some(like(a, out.into_data()))]
        }
        OpKind::Sum => vec![Some(like(x[0], vec![g.item(); x[0].len()]))],
        OpKind::RowNormalize => {
            let a = x[0];
            let mut out = vec![0.0; a.len()];
            let c = a.cols();
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().sum();
                let (gi, yi) = (g.row(i), y.row(i));
                let dot: f64 = gi.iter().zip(yi).map(|(p, q)| p * q).sum();
                for k in 0..c {
                    out[i * c + k] = (gi[k] - dot) / s;
                }
            }
            vec![Some(like(a, out))]
        }
        OpKind::Softmax => {
            let c = y.cols();
            let mut out = vec![0.0; y.len()];
            for i in 0..y.rows() {
                let (gi, yi) = (g.row(i), y.row(i));
                let dot: f64 = gi.iter().zip(yi).map(|(p, q)| p * q).sum();
                for k in 0..c {
                    out[i * c + k] = yi[k] * (gi[k] - dot);
                }
            }
            vec![Some(like(x[0], out))]
        }
        OpKind::PairwiseScaledSqDist => {
            let (a, b, s) = (x[0], x[1], x[2]);
            let (n, m, d) = (a.rows(), b.rows(), a.cols());
            let inv2: Vec<f64> = s.data().iter().map(|v| 1.0 / (v * v)).collect();
            let inv3: Vec<f64> = s.data().iter().map(|v| 1.0 / (v * v * v)).collect();
            let mut ga = vec![0.0; n * d];
            let mut gb = vec![0.0; m * d];
            let mut gs = vec![0.0; d];
            for i in 0..n {
                let ai = a.row(i);
                let gi = g.row(i);
                for j in 0..m {
                    let gij = gi[j];
                    if gij == 0.0 {
                        continue;
                    }
                    let bj = b.row(j);
                    for k in 0..d {
                        let diff = ai[k] - bj[k];
                        let t = gij * diff * inv2[k];
                        ga[i * d + k] += t;
                        gb[j * d + k] -= t;
                        gs[k] -= gij * diff * diff * inv3[k];
                    }
                }
            }
            vec![Some(like(a, ga)), Some(like(b, gb)), Some(like(s, gs))]
        }
        OpKind::LinearSolve => {
            let Saved::Lu(lu) = saved else { unreachable!("linear-solve saves its factorization") };
            let gbar = lu.solve_transpose(g);
            let ga = gbar.matmul_t(y).map(|v| -v);
            vec![Some(ga), Some(gbar)]
        }
        OpKind::L1Norm => {
            let gv = g.item();
            vec![Some(x[0].map(|v| {
                if v > 0.0 {
                    gv
                } else if v < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }))]
        }
        OpKind::CrossEntropy { labels } => {
            let Saved::Probs(p) = saved else { unreachable!("cross-entropy saves probabilities") };
            let scale = g.item() / p.rows() as f64;
            let mut out = p.map(|v| v * scale);
            for (i, &l) in labels.iter().enumerate() {
                let cur = out.get(i, l);
                out.set(i, l, cur - scale);
            }
            vec![Some(out)]
        }
        OpKind::Sigmoid => {
            vec![Some(like(x[0], g.data().iter().zip(y.data()).map(|(p, s)| p * s * (1.0 - s)).collect()))]
        }
        OpKind::Relu => {
            vec![Some(like(
                x[0],
                g.data().iter().zip(x[0].data()).map(|(p, v)| if *v > 0.0 { *p } else { 0.0 }).collect(),
            ))]
        }
        OpKind::EntropyPerRow => {
            let a = x[0];
            let c = a.cols();
            let mut out = vec![0.0; a.len()];
            for i in 0..a.rows() {
                let gi = g.data()[i];
                for (k, &p) in a.row(i).iter().enumerate() {
                    // Only defined on the open simplex interior; zero elsewhere.
                    out[i * c + k] = if p > 0.0 { -gi * (p.ln() + 1.0) } else { 0.0 };
                }
            }
            vec![Some(like(a, out))]
        }
        OpKind::ConcatRows => {
            let c = g.cols();
            let mut off = 0;
            x.iter()
                .map(|t| {
                    let part = g.data()[off * c..(off + t.rows()) * c].to_vec();
                    off += t.rows();
                    Some(like(t, part))
                })
                .collect()
        }
        OpKind::SliceRows { start, .. } => {
            let a = x[0];
            let c = a.cols();
            let mut out = vec![0.0; a.len()];
            out[start * c..start * c + g.len()].copy_from_slice(g.data());
            vec![Some(like(a, out))]
        }
        OpKind::ConcatCols => {
            let mut off = 0;
            x.iter()
                .map(|t| {
                    let w = t.cols();
                    let mut part = Vec::with_capacity(t.len());
                    for i in 0..g.rows() {
                        part.extend_from_slice(&g.row(i)[off..off + w]);
                    }
                    off += w;
                    Some(like(t, part))
                })
                .collect()
        }
        OpKind::SliceCols { start, len } => {
            let a = x[0];
            let mut out = Tensor::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                out.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
            }
            vec![Some(like(a, out.into_data()))]
        }
        OpKind::Clamp { lo, hi } => {
            let data =
                g.data().iter().zip(x[0].data()).map(|(p, v)| if v >= lo && v <= hi { *p } else { 0.0 }).collect();
            vec![Some(like(x[0], data))]
        }
        OpKind::Reshape { .. } => vec![Some(like(x[0], g.data().to_vec()))],
        OpKind::Im2Col { batch, height, width, kernel } => {
            let a = x[0];
            let mut out = vec![0.0; a.len()];
            for (gv, src) in g.data().iter().zip(im2col_index(*batch, *height, *width, *kernel, a.cols())) {
                out[src] += gv;
            }
            vec![Some(like(a, out))]
        }
        OpKind::MaxPool2 { .. } => {
            let Saved::Indices(arg) = saved else { unreachable!("maxpool saves argmax") };
            let mut out = vec![0.0; x[0].len()];
            for (gv, &src) in g.data().iter().zip(arg) {
                out[src] += gv;
            }
            vec![Some(like(x[0], out))]
        }
        OpKind::BatchNorm { running, .. } => {
            let Saved::Norm { xhat, inv_std, .. } = saved else { unreachable!("batch-norm saves statistics") };
            let gamma = x[1];
            let (n, c) = (xhat.rows(), xhat.cols());
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            for i in 0..n {
                let (gi, hi) = (g.row(i), xhat.row(i));
                for k in 0..c {
                    ggamma[k] += gi[k] * hi[k];
                    gbeta[k] += gi[k];
                    let dx = gi[k] * gamma.data()[k];
                    sum_dxhat[k] += dx;
                    sum_dxhat_xhat[k] += dx * hi[k];
                }
            }
            let mut ga = vec![0.0; n * c];
            let nf = n as f64;
            for i in 0..n {
                let (gi, hi) = (g.row(i), xhat.row(i));
                for k in 0..c {
                    let dx = gi[k] * gamma.data()[k];
                    ga[i * c + k] = if running.is_some() {
                        dx * inv_std[k]
                    } else {
                        inv_std[k] * (dx - sum_dxhat[k] / nf - hi[k] * sum_dxhat_xhat[k] / nf)
                    };
                }
            }
            vec![Some(like(x[0], ga)), Some(like(x[1], ggamma)), Some(like(x[2], gbeta))]
        }
    }
}
