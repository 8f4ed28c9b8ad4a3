//! Optimization loop: combined objective, alternating discriminator update,
//! warm-up schedule on the cycle term, momentum SGD and validation-based
//! checkpoint selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor};
use crate::data::{rows_of, BatchSampler, DataError, DomainDataset, UnlabeledSet};
use crate::model::{self, Architecture, Mode, Model, ModelError};
use crate::propagation::{self, one_hot, PropagationError, PropagationMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Propagation(PropagationError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFinite { step: usize, diagnostic: String },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Mlp,
    Conv2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub propagation: PropagationMode,
    /// Weight of the row-sum penalty in truncated mode.
    pub deficit_weight: f64,
    pub eval_every: usize,
    pub validation_size: usize,
    /// Train the discriminator and include the adversarial term.
    pub adversarial: bool,
    pub class_balanced: bool,
    pub generator: GeneratorKind,
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            gamma: 10.0,
            lr: 1e-2,
            momentum: 0.9,
            batch_source: 128,
            batch_target: 128,
            total_steps: 2000,
            seed: 0,
            propagation: PropagationMode::Closed,
            deficit_weight: 1.0,
            eval_every: 100,
            validation_size: 200,
            adversarial: true,
            class_balanced: true,
            generator: GeneratorKind::Mlp,
            feature_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("momentum", self.momentum),
            ("deficit_weight", self.deficit_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.momentum >= 1.0 {
            return bad(format!("momentum must be below 1, got {}", self.momentum));
        }
        if self.batch_source < classes || self.batch_target == 0 {
            return bad(format!(
                "batch sizes must be positive and the source batch at least the class count {classes}"
            ));
        }
        if self.eval_every == 0 || self.validation_size == 0 || self.feature_dim == 0 {
            return bad("eval_every, validation_size and feature_dim must be positive".into());
        }
        if let PropagationMode::Truncated { steps: 0 } = self.propagation {
            return bad("truncated propagation needs at least one step".into());
        }
        Ok(())
    }

    pub fn architecture(&self, input_width: usize, image_side: Option<usize>) -> Result<Architecture, TrainError> {
        match self.generator {
            GeneratorKind::Mlp => Ok(Architecture::mlp(input_width, self.feature_dim)),
            GeneratorKind::Conv2 => match image_side {
                Some(side) => Ok(Architecture::conv2(side, self.feature_dim)),
                None => Err(TrainError::Config("conv2 generator needs square image inputs".into())),
            },
        }
    }
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SourceOnly,
    Adversarial,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SourceOnly, Variant::Adversarial, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source-only",
            Variant::Adversarial => "adversarial",
            Variant::Full => "full",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::SourceOnly => {
                c.alpha = 0.0;
                c.adversarial = false;
            }
            Variant::Adversarial => {
                c.alpha = 0.0;
                c.adversarial = true;
            }
            Variant::Full => c.adversarial = true,
        }
        c
    }
}

/// `2 / (1 + exp(-γp)) - 1`.
pub fn lambda_schedule(p: f64, gamma: f64) -> f64 {
    (0.5 * gamma * p).tanh()
}

/// Per-parameter momentum buffers, indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    buffers: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            buffers: store
                .iter()
                .map(|p| Tensor::new(p.value.shape().to_vec(), vec![0.0; p.value.len()]).expect("shape of a parameter"))
                .collect(),
        }
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor {
        &self.buffers[id.0]
    }

    /// `buf ← m·buf + g; p ← p - lr·buf` for each id, using the gradient
    /// currently stored (negated when `ascend`).
    pub fn apply(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64, momentum: f64, ascend: bool) {
        let sign = if ascend { -1.0 } else { 1.0 };
        for &id in ids {
            let p = store.get_mut(id);
            let buf = self.buffers[id.0].data_mut();
            for ((b, v), g) in buf.iter_mut().zip(p.value.data_mut()).zip(p.grad.data()) {
                *b = momentum * *b + sign * g;
                *v -= lr * *b;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub progress: f64,
    pub lambda: f64,
    pub l_cls: f64,
    pub l_dann: f64,
    pub l_cycle: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// One step's inputs: labeled source rows and unlabeled target rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub xt: Tensor,
}

/// Runs one optimization step and returns its report (without validation
/// accuracy).
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepReport, TrainError> {
    let (ns, nt) = (batch.xs.rows(), batch.xt.rows());
    let progress = if cfg.total_steps == 0 { 0.0 } else { step as f64 / cfg.total_steps as f64 };
    let lambda = lambda_schedule(progress, cfg.gamma);
    let weight = cfg.alpha * lambda;

    let mut tape = Tape::new();
    tape.set_batch_index(step);
    let x = tape.constant(concat(&batch.xs, &batch.xt));
    let embedded = model.embed(&mut tape, x, Mode::Train)?;
    let f = embedded.features;
    let logits = model.classify(&mut tape, f)?;
    let logits_s = tape.slice_rows(logits, 0, ns)?;
    let l_cls = model::cls_loss(&mut tape, logits_s, &batch.ys)?;
    let mut total = l_cls;

    let mut l_dann = None;
    if cfg.adversarial {
        let d = model.discriminate(&mut tape, f)?;
        let ds = tape.slice_rows(d, 0, ns)?;
        let dt = tape.slice_rows(d, ns, nt)?;
        let l = model::dann_loss(&mut tape, ds, dt)?;
        total = tape.add(total, l)?;
        l_dann = Some(l);
    }

    let mut l_cycle = None;
    let mut warning = None;
    if cfg.alpha > 0.0 {
        let rho = model::entropy_weights(&model::probabilities(tape.value(logits)));
        // The weights act on the cycle path only, so it branches off its
        // own copy of the features.
        let fc = tape.slice_rows(f, 0, ns + nt)?;
        tape.set_row_gradient_scale(fc, &rho)?;
        let fs = tape.slice_rows(fc, 0, ns)?;
        let ft = tape.slice_rows(fc, ns, nt)?;
        let sigma = model.bandwidth.record(&mut tape, &model.store).map_err(TrainError::Propagation)?;
        let ys = tape.constant(one_hot(&batch.ys, model.classes));
        match propagation::cycle(&mut tape, fs, ft, sigma, ys, cfg.propagation) {
            Ok(out) => {
                let mut term = out.loss;
                if let Some(pen) = out.deficit_penalty {
                    let p = tape.scale(pen, cfg.deficit_weight)?;
                    term = tape.add(term, p)?;
                }
                let scaled = tape.scale(term, weight)?;
                total = tape.add(total, scaled)?;
                l_cycle = Some(out.loss);
            }
            Err(e) if e.is_singular() => warning = Some(format!("{e}; cycle term skipped")),
            Err(PropagationError::NonFiniteFeature { which }) => {
                return Err(TrainError::NonFinite {
                    step,
                    diagnostic: format!(
                        "{which} features diverged; l_cls={} sigma={:?}",
                        tape.value(l_cls).item(),
                        model.bandwidth.sigma(&model.store)
                    ),
                })
            }
            Err(e) => return Err(TrainError::Propagation(e)),
        }
    }

    let value = |n: Option<_>| n.map_or(0.0, |n| tape.value(n).item());
    let report = StepReport {
        step,
        progress,
        lambda,
        l_cls: tape.value(l_cls).item(),
        l_dann: value(l_dann),
        l_cycle: value(l_cycle),
        total: tape.value(total).item(),
        val_acc: None,
        warning,
    };
    if !report.total.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            diagnostic: format!(
                "l_cls={} l_dann={} l_cycle={} lambda={} sigma={:?}",
                report.l_cls,
                report.l_dann,
                report.l_cycle,
                lambda,
                model.bandwidth.sigma(&model.store)
            ),
        });
    }

    let descend = model.adaptation_params();
    model.store.zero_grad();
    tape.backward(total)?.accumulate_subset(&mut model.store, &descend);

    // Discriminator on detached features, evaluated before any update.
    let disc = model.discriminator_params();
    if cfg.adversarial {
        let mut dtape = Tape::new();
        let fd = dtape.constant(tape.value(f).clone());
        let d = model.discriminate(&mut dtape, fd)?;
        let ds = dtape.slice_rows(d, 0, ns)?;
        let dt = dtape.slice_rows(d, ns, nt)?;
        let l = model::dann_loss(&mut dtape, ds, dt)?;
        dtape.backward(l)?.accumulate_subset(&mut model.store, &disc);
    }

    model.update_running_stats(&tape, &embedded);
    opt.apply(&mut model.store, &descend, cfg.lr, cfg.momentum, false);
    if cfg.adversarial {
        opt.apply(&mut model.store, &disc, cfg.lr, cfg.momentum, true);
    }
    Ok(report)
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
}

/// Fraction of rows whose first maximal logit is the label.
pub fn evaluate(model: &Model, ds: &DomainDataset) -> Result<f64, TrainError> {
    let logits = model.logits(&ds.x)?;
    Ok(accuracy(&logits, ds.labels()))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    assert!(!labels.is_empty(), "accuracy of an empty set");
    let hits = labels.iter().enumerate().filter(|&(i, &l)| argmax(logits.row(i)) == l).count();
    hits as f64 / labels.len() as f64
}

/// Seeds for initialization and the two batch streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub model: u64,
    pub source: u64,
    pub target: u64,
}

impl Seeds {
    pub fn from_seed(seed: u64) -> Self {
        let mix = |k: u64| seed.wrapping_mul(0xBF58_476D_1CE4_E5B9).wrapping_add(k.wrapping_mul(0x94D0_49BB_1331_11EB));
        Seeds { model: mix(1), source: mix(2), target: mix(3) }
    }
}

/// Inputs to [`fit`]. Target training rows carry no labels.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub source: &'a DomainDataset,
    pub target: &'a UnlabeledSet,
    pub validation: &'a DomainDataset,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters at the evaluation with the highest validation accuracy
    /// (the earliest on ties).
    pub model: Model,
    pub best_val_acc: Option<f64>,
    pub best_step: Option<usize>,
    pub history: Vec<StepReport>,
}

pub fn fit(data: TrainingData<'_>, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_with(data, cfg, |_| {})
}

/// [`fit`] with a callback on every finished report.
pub fn fit_with(
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<FitResult, TrainError> {
    let classes = data.source.classes;
    cfg.validate(classes)?;
    if data.source.is_empty() || data.target.is_empty() || data.validation.is_empty() {
        return Err(TrainError::Config("datasets must be nonempty".into()));
    }
    let side = data.source.image_shape.filter(|(r, c)| r == c).map(|(r, _)| r);
    let arch = cfg.architecture(data.source.x.cols(), side)?;
    let seeds = Seeds::from_seed(cfg.seed);
    let mut model = Model::new(arch, classes, seeds.model)?;
    let mut opt = OptimizerState::new(&model.store);
    let labels = data.source.labels().to_vec();
    let mut src = if cfg.class_balanced {
        BatchSampler::class_balanced(&labels, classes, seeds.source)?
    } else {
        BatchSampler::uniform(labels.len(), seeds.source)
    };
    let mut tgt = BatchSampler::uniform(data.target.len(), seeds.target);

    let mut best = FitResult { model: model.clone(), best_val_acc: None, best_step: None, history: Vec::new() };
    for step in 0..cfg.total_steps {
        let si = src.next_batch(cfg.batch_source)?;
        let ti = tgt.next_batch(cfg.batch_target)?;
        let batch = Batch {
            xs: rows_of(&data.source.x, &si),
            ys: si.iter().map(|&i| labels[i]).collect(),
            xt: rows_of(&data.target.x, &ti),
        };
        let mut report = train_step(&mut model, &mut opt, &batch, cfg, step)?;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps {
            let acc = evaluate(&model, data.validation)?;
            report.val_acc = Some(acc);
            if best.best_val_acc.is_none_or(|b| acc > b) {
                best.model = model.clone();
                best.best_val_acc = Some(acc);
                best.best_step = Some(step);
            }
        }
        on_step(&report);
        best.history.push(report);
    }
    Ok(best)
}

#[cfg(test)]
mod tests;
