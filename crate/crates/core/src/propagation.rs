//! Similarity graph over embedded features and label propagation through
//! the absorbing random walk it induces.
//!
//! Two chains share one Gaussian similarity matrix. In the forward chain the
//! source nodes are absorbing and labels flow source → target; in the
//! reverse chain the target nodes are absorbing and the propagated target
//! labels flow back to the sources. Everything is recorded on the tape so
//! the cycle loss differentiates into the features and the bandwidth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, ParamId, ParamStore, Tape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{which} features contain a non-finite value")]
    NonFiniteFeature { which: &'static str },
    #[error("feature width {features} does not match bandwidth length {bandwidth}")]
    BandwidthWidth { features: usize, bandwidth: usize },
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("truncated propagation needs at least one step")]
    ZeroSteps,
}

impl PropagationError {
    pub fn is_singular(&self) -> bool {
        matches!(self, PropagationError::Autodiff(AutodiffError::SingularSystem { .. }))
    }
}

type Result<T> = std::result::Result<T, PropagationError>;

/// Per-dimension Gaussian bandwidth `σ = exp(s)`, with `s` the trainable
/// parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bandwidth {
    pub log_sigma: ParamId,
}

impl Bandwidth {
    pub const PARAM_NAME: &'static str = "bandwidth.log_sigma";

    /// Registers `s = 0` (σ = 1 in every dimension).
    pub fn new(store: &mut ParamStore, dim: usize) -> Self {
        Self { log_sigma: store.add(Self::PARAM_NAME, Tensor::zeros(1, dim)) }
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.value(self.log_sigma).len()
    }

    pub fn sigma(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.log_sigma).data().iter().map(|s| s.exp()).collect()
    }

    /// Records `σ = exp(s)` and returns its node.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore) -> Result<NodeId> {
        let s = tape.param(store, self.log_sigma);
        Ok(tape.exp(s)?)
    }
}

/// Gaussian similarity blocks, `W_ab[i, j] = exp(-Σ_k (a_ik - b_jk)² / (2σ_k²))`.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityGraph {
    pub w_ss: NodeId,
    pub w_st: NodeId,
    pub w_ts: NodeId,
    pub w_tt: NodeId,
    pub n_source: usize,
    pub n_target: usize,
}

/// Row-stochastic blocks of both absorbing chains.
#[derive(Clone, Copy, Debug)]
pub struct TransitionBlocks {
    pub t_tt: NodeId,
    pub t_ts: NodeId,
    pub t_ss: NodeId,
    pub t_st: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelFlavor {
    OneHotSource,
    PropagatedTarget,
    PropagatedSource,
}

/// A `rows × classes` label node together with what it represents.
#[derive(Clone, Copy, Debug)]
pub struct LabelMatrix {
    pub node: NodeId,
    pub flavor: LabelFlavor,
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        t.set(i, l, 1.0);
    }
    t
}

fn check_features(tape: &Tape, node: NodeId, which: &'static str) -> Result<()> {
    let v = tape.value(node);
    if v.rows() == 0 {
        return Err(PropagationError::EmptyBatch(which));
    }
    if !v.is_finite() {
        return Err(PropagationError::NonFiniteFeature { which });
    }
    Ok(())
}

/// `exp(-D)` for the bandwidth-scaled squared distances between the rows
/// of `a` and of `[a; b]`, split into the `a`-block and the `b`-block.
fn similarity_rows(tape: &mut Tape, a: NodeId, b: NodeId, sigma: NodeId) -> Result<(NodeId, NodeId)> {
    let na = tape.value(a).rows();
    let nb = tape.value(b).rows();
    let all = tape.concat_rows(&[a, b])?;
    let d = tape.pairwise_scaled_sqdist(a, all, sigma)?;
    let neg = tape.neg(d)?;
    let w = tape.exp(neg)?;
    let own = tape.slice_cols(w, 0, na)?;
    let cross = tape.slice_cols(w, na, nb)?;
    Ok((own, cross))
}

/// Builds the fully connected similarity graph, self-loops included.
pub fn build_similarity(tape: &mut Tape, f_s: NodeId, f_t: NodeId, sigma: NodeId) -> Result<SimilarityGraph> {
    check_features(tape, f_s, "source")?;
    check_features(tape, f_t, "target")?;
    let d = tape.value(f_s).cols();
    let bw = tape.value(sigma).len();
    if d != bw || tape.value(f_t).cols() != d {
        return Err(PropagationError::BandwidthWidth { features: d, bandwidth: bw });
    }
    let (w_tt, w_ts) = similarity_rows(tape, f_t, f_s, sigma)?;
    let (w_ss, w_st) = similarity_rows(tape, f_s, f_t, sigma)?;
    Ok(SimilarityGraph { w_ss, w_st, w_ts, w_tt, n_source: tape.value(f_s).rows(), n_target: tape.value(f_t).rows() })
}

fn normalize_pair(tape: &mut Tape, own: NodeId, cross: NodeId) -> Result<(NodeId, NodeId)> {
    let n_own = tape.value(own).cols();
    let n_cross = tape.value(cross).cols();
    let joined = tape.concat_cols(&[own, cross])?;
    let t = tape.row_normalize(joined)?;
    Ok((tape.slice_cols(t, 0, n_own)?, tape.slice_cols(t, n_own, n_cross)?))
}

/// Forward chain with sources absorbing: rows of `[W_tt | W_ts]` normalized.
pub fn forward_transition(tape: &mut Tape, g: &SimilarityGraph) -> Result<(NodeId, NodeId)> {
    normalize_pair(tape, g.w_tt, g.w_ts)
}

/// Reverse chain with targets absorbing: rows of `[W_ss | W_st]` normalized.
pub fn reverse_transition(tape: &mut Tape, g: &SimilarityGraph) -> Result<(NodeId, NodeId)> {
    normalize_pair(tape, g.w_ss, g.w_st)
}

pub fn transition_blocks(tape: &mut Tape, g: &SimilarityGraph) -> Result<TransitionBlocks> {
    let (t_tt, t_ts) = forward_transition(tape, g)?;
    let (t_ss, t_st) = reverse_transition(tape, g)?;
    Ok(TransitionBlocks { t_tt, t_ts, t_ss, t_st })
}

/// Absorption probabilities `(I - T_abs)⁻¹ · T_cross · y`, computed as a
/// linear solve.
pub fn propagate_closed(tape: &mut Tape, t_abs: NodeId, t_cross: NodeId, y: NodeId) -> Result<NodeId> {
    let m = tape.value(t_abs).rows();
    let rhs = tape.matmul(t_cross, y)?;
    let eye = tape.constant(Tensor::identity(m));
    let a = tape.sub(eye, t_abs)?;
    Ok(tape.linear_solve(a, rhs)?)
}

#[derive(Clone, Debug)]
pub struct Truncated {
    pub labels: NodeId,
    /// `1 - row sum` of the truncated labels, one entry per row.
    pub deficit: Vec<f64>,
    /// Mean absolute deficit as a differentiable scalar, present when
    /// requested.
    pub penalty: Option<NodeId>,
}

/// First `steps` terms of `Σ_k T_absᵏ · T_cross · y`, one multiply and one
/// accumulate per step.
pub fn propagate_truncated(
    tape: &mut Tape,
    t_abs: NodeId,
    t_cross: NodeId,
    y: NodeId,
    steps: usize,
    enforce_sum: bool,
) -> Result<Truncated> {
    if steps == 0 {
        return Err(PropagationError::ZeroSteps);
    }
    let mut term = tape.matmul(t_cross, y)?;
    let mut acc = term;
    for _ in 1..steps {
        term = tape.matmul(t_abs, term)?;
        acc = tape.add(acc, term)?;
    }
    let out = tape.value(acc);
    let deficit = (0..out.rows()).map(|i| 1.0 - out.row(i).iter().sum::<f64>()).collect();
    let penalty = if enforce_sum {
        let rows = tape.value(acc).rows();
        let sums = tape.row_sum(acc)?;
        let neg = tape.neg(sums)?;
        let gap = tape.add_scalar(neg, 1.0)?;
        let l1 = tape.l1_norm(gap)?;
        Some(tape.scale(l1, 1.0 / rows as f64)?)
    } else {
        None
    };
    Ok(Truncated { labels: acc, deficit, penalty })
}

/// `Σ_{i,c} |ŷ_s - y_s| / N_s`.
pub fn cycle_loss(tape: &mut Tape, y_hat_s: NodeId, y_s: NodeId) -> Result<NodeId> {
    let n = tape.value(y_s).rows();
    let diff = tape.sub(y_hat_s, y_s)?;
    let l1 = tape.l1_norm(diff)?;
    Ok(tape.scale(l1, 1.0 / n as f64)?)
}

/// How labels are carried across the graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PropagationMode {
    #[default]
    Closed,
    Truncated {
        steps: usize,
    },
}

#[derive(Clone, Debug)]
pub struct CycleOutput {
    pub graph: SimilarityGraph,
    pub blocks: TransitionBlocks,
    pub y_hat_t: LabelMatrix,
    pub y_hat_s: LabelMatrix,
    pub loss: NodeId,
    /// Deficit penalty on `ŷ_s` in truncated mode.
    pub deficit_penalty: Option<NodeId>,
}

/// Source → target → source propagation and its L1 cycle loss.
pub fn cycle(
    tape: &mut Tape,
    f_s: NodeId,
    f_t: NodeId,
    sigma: NodeId,
    y_s: NodeId,
    mode: PropagationMode,
) -> Result<CycleOutput> {
    let graph = build_similarity(tape, f_s, f_t, sigma)?;
    let blocks = transition_blocks(tape, &graph)?;
    let (y_hat_t, y_hat_s, deficit_penalty) = match mode {
        PropagationMode::Closed => {
            let yt = propagate_closed(tape, blocks.t_tt, blocks.t_ts, y_s)?;
            let ys = propagate_closed(tape, blocks.t_ss, blocks.t_st, yt)?;
            (yt, ys, None)
        }
        PropagationMode::Truncated { steps } => {
            let yt = propagate_truncated(tape, blocks.t_tt, blocks.t_ts, y_s, steps, false)?;
            let ys = propagate_truncated(tape, blocks.t_ss, blocks.t_st, yt.labels, steps, true)?;
            (yt.labels, ys.labels, ys.penalty)
        }
    };
    let loss = cycle_loss(tape, y_hat_s, y_s)?;
    Ok(CycleOutput {
        graph,
        blocks,
        y_hat_t: LabelMatrix { node: y_hat_t, flavor: LabelFlavor::PropagatedTarget },
        y_hat_s: LabelMatrix { node: y_hat_s, flavor: LabelFlavor::PropagatedSource },
        loss,
        deficit_penalty,
    })
}
