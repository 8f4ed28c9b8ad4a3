//! Central finite differences, used only as a test oracle.

use super::{AutodiffError, NodeId, Tape, Tensor};

pub(crate) const STEP: f64 = 1e-5;

/// Relative error `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-10)`.
pub(crate) fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-10)
}

/// Numerical gradient of the scalar produced by `build` with respect to
/// each input, by re-evaluating on fresh tapes.
pub(crate) fn numeric<F>(inputs: &[Tensor], build: &F, h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let ids: Vec<_> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &ids).expect("forward");
        tape.value(out).item()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].len()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let up = eval(&work);
            work[t].data_mut()[k] = orig - h;
            let down = eval(&work);
            work[t].data_mut()[k] = orig;
            *gk = (up - down) / (2.0 * h);
        }
        result.push(g);
    }
    result
}

/// Analytic gradients of `build` with respect to each input.
pub(crate) fn analytic<F>(inputs: &[Tensor], build: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|v| tape.constant(v.clone())).collect();
    let out = build(&mut tape, &ids).expect("forward");
    let grads = tape.backward(out).expect("backward");
    ids.iter()
        .zip(inputs)
        .map(|(&id, t)| grads.wrt(id).map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec()))
        .collect()
}

/// Largest relative error over all inputs.
pub(crate) fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let a = analytic(inputs, &build);
    let n = numeric(inputs, &build, STEP);
    a.iter().zip(&n).map(|(x, y)| rel_err(x, y)).fold(0.0, f64::max)
}
