//! Feature generator, classifier and domain discriminator, plus the three
//! losses and the entropy-based gradient weights.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_rows, AutodiffError, NodeId, OpKind, ParamId, ParamStore, Tape, Tensor};
use crate::propagation::Bandwidth;

/// Log arguments in the adversarial loss are clamped to `[EPS, 1 - EPS]`.
pub const LOG_CLAMP: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DISCRIMINATOR_HIDDEN: usize = 64;

pub const CHECKPOINT_FORMAT: &str = "lapda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input has {found} columns, the generator expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// Fully connected, ReLU on hidden layers, linear output.
    Mlp { input: usize, hidden: Vec<usize>, features: usize },
    /// Two `kernel × kernel` valid convolutions, each followed by batch
    /// norm, ReLU and 2×2 max pooling, then two dense layers. Single channel
    /// `side × side` input, channels-last internally.
    Conv2 { side: usize, channels: [usize; 2], kernel: usize, hidden: usize, features: usize },
}

impl Architecture {
    pub fn mlp(input: usize, features: usize) -> Self {
        Architecture::Mlp { input, hidden: vec![64, 64], features }
    }

    pub fn conv2(side: usize, features: usize) -> Self {
        Architecture::Conv2 { side, channels: [16, 32], kernel: 5, hidden: 128, features }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Architecture::Mlp { input, .. } => *input,
            Architecture::Conv2 { side, .. } => side * side,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Architecture::Mlp { features, .. } | Architecture::Conv2 { features, .. } => *features,
        }
    }

    /// Spatial sizes after the first and second conv + pool stages.
    fn conv_sides(&self) -> Option<(usize, usize, usize, usize)> {
        let Architecture::Conv2 { side, kernel, .. } = self else { return None };
        let c1 = side.checked_sub(kernel - 1)?;
        let p1 = c1 / 2;
        let c2 = p1.checked_sub(kernel - 1)?;
        let p2 = c2 / 2;
        (c1 > 0 && p1 > 0 && c2 > 0 && p2 > 0).then_some((c1, p1, c2, p2))
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Architecture(m.into()));
        match self {
            Architecture::Mlp { input, hidden, features } => {
                if *input == 0 || *features == 0 || hidden.contains(&0) {
                    return bad("layer widths must be positive");
                }
            }
            Architecture::Conv2 { channels, kernel, hidden, features, .. } => {
                if channels.contains(&0) || *kernel == 0 || *hidden == 0 || *features == 0 {
                    return bad("layer widths must be positive");
                }
                if self.conv_sides().is_none() {
                    return bad("input too small for two conv + pool stages");
                }
            }
        }
        Ok(())
    }
}

/// Affine layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Dense {
            w: store.add(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w)),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        Ok(tape.add(xw, b)?)
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Generator {
    Mlp(Vec<Dense>),
    Conv { conv: [Dense; 2], norm: [Norm; 2], fc: [Dense; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running averages.
    Eval,
}

/// Generator output together with the batch-norm nodes whose statistics
/// feed the running averages.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub features: NodeId,
    pub norm_nodes: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub classes: usize,
    pub store: ParamStore,
    pub bandwidth: Bandwidth,
    generator: Generator,
    classifier: Dense,
    discriminator: [Dense; 2],
    running: Vec<RunningStats>,
}

impl Model {
    pub fn new(arch: Architecture, classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if classes < 2 {
            return Err(ModelError::Architecture(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = arch.feature_dim();
        let mut running = Vec::new();
        let generator = match &arch {
            Architecture::Mlp { input, hidden, features } => {
                let widths: Vec<usize> =
                    std::iter::once(*input).chain(hidden.iter().copied()).chain([*features]).collect();
                Generator::Mlp(
                    widths
                        .windows(2)
                        .enumerate()
                        .map(|(i, w)| Dense::new(&mut store, &mut rng, &format!("generator.fc{i}"), w[0], w[1]))
                        .collect(),
                )
            }
            Architecture::Conv2 { channels, kernel, hidden, features, .. } => {
                let (_, _, _, p2) = arch.conv_sides().expect("validated");
                let k2 = kernel * kernel;
                let conv = [
                    Dense::new(&mut store, &mut rng, "generator.conv0", k2, channels[0]),
                    Dense::new(&mut store, &mut rng, "generator.conv1", k2 * channels[0], channels[1]),
                ];
                let norm = [0, 1].map(|i| {
                    running.push(RunningStats { mean: vec![0.0; channels[i]], var: vec![1.0; channels[i]] });
                    Norm {
                        gamma: store.add(format!("generator.bn{i}.gamma"), Tensor::full(1, channels[i], 1.0)),
                        beta: store.add(format!("generator.bn{i}.beta"), Tensor::zeros(1, channels[i])),
                    }
                });
                let fc = [
                    Dense::new(&mut store, &mut rng, "generator.fc0", p2 * p2 * channels[1], *hidden),
                    Dense::new(&mut store, &mut rng, "generator.fc1", *hidden, *features),
                ];
                Generator::Conv { conv, norm, fc }
            }
        };
        let classifier = Dense::new(&mut store, &mut rng, "classifier", d, classes);
        let discriminator = [
            Dense::new(&mut store, &mut rng, "discriminator.fc0", d, DISCRIMINATOR_HIDDEN),
            Dense::new(&mut store, &mut rng, "discriminator.fc1", DISCRIMINATOR_HIDDEN, 1),
        ];
        let bandwidth = Bandwidth::new(&mut store, d);
        Ok(Model { arch, classes, store, bandwidth, generator, classifier, discriminator, running })
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        match &self.generator {
            Generator::Mlp(layers) => layers.iter().flat_map(Dense::ids).collect(),
            Generator::Conv { conv, norm, fc } => conv
                .iter()
                .flat_map(Dense::ids)
                .chain(norm.iter().flat_map(|n| [n.gamma, n.beta]))
                .chain(fc.iter().flat_map(Dense::ids))
                .collect(),
        }
    }

    pub fn classifier_params(&self) -> Vec<ParamId> {
        self.classifier.ids().to_vec()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.discriminator.iter().flat_map(Dense::ids).collect()
    }

    /// Everything that descends on the combined objective.
    pub fn adaptation_params(&self) -> Vec<ParamId> {
        let mut ids = self.generator_params();
        ids.extend(self.classifier_params());
        ids.push(self.bandwidth.log_sigma);
        ids
    }

    pub fn first_layer(&self) -> Dense {
        match &self.generator {
            Generator::Mlp(layers) => layers[0],
            Generator::Conv { conv, .. } => conv[0],
        }
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Records the generator forward pass on `x` (`batch × input`).
    pub fn embed(&self, tape: &mut Tape, x: NodeId, mode: Mode) -> Result<Embedded> {
        let (rows, cols) = (tape.value(x).rows(), tape.value(x).cols());
        if cols != self.arch.input_width() {
            return Err(ModelError::InputWidth { expected: self.arch.input_width(), found: cols });
        }
        let store = &self.store;
        match &self.generator {
            Generator::Mlp(layers) => {
                let mut h = x;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(tape, store, h)?;
                    if i + 1 < layers.len() {
                        h = tape.relu(h)?;
                    }
                }
                Ok(Embedded { features: h, norm_nodes: Vec::new() })
            }
            Generator::Conv { conv, norm, fc } => {
                let Architecture::Conv2 { side, kernel, .. } = self.arch else { unreachable!() };
                let (c1, p1, c2, p2) = self.arch.conv_sides().expect("validated");
                let mut norm_nodes = Vec::with_capacity(2);
                let mut h = tape.reshape(x, rows * side * side, 1)?;
                for (stage, (in_side, conv_side)) in [(side, c1), (p1, c2)].into_iter().enumerate() {
                    h = tape.record(OpKind::Im2Col { batch: rows, height: in_side, width: in_side, kernel }, &[h])?;
                    h = conv[stage].forward(tape, store, h)?;
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((self.running[stage].mean.clone(), self.running[stage].var.clone())),
                    };
                    let gamma = tape.param(store, norm[stage].gamma);
                    let beta = tape.param(store, norm[stage].beta);
                    h = tape.record(OpKind::BatchNorm { eps: BN_EPS, running }, &[h, gamma, beta])?;
                    norm_nodes.push(h);
                    h = tape.relu(h)?;
                    h = tape.record(OpKind::MaxPool2 { batch: rows, height: conv_side, width: conv_side }, &[h])?;
                }
                let channels = tape.value(h).cols();
                h = tape.reshape(h, rows, p2 * p2 * channels)?;
                h = fc[0].forward(tape, store, h)?;
                h = tape.relu(h)?;
                h = fc[1].forward(tape, store, h)?;
                Ok(Embedded { features: h, norm_nodes })
            }
        }
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running averages.
    pub fn update_running_stats(&mut self, tape: &Tape, embedded: &Embedded) {
        for (stats, &node) in self.running.iter_mut().zip(&embedded.norm_nodes) {
            if let Some((mean, var)) = tape.batch_stats(node) {
                for (r, m) in stats.mean.iter_mut().zip(mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, v) in stats.var.iter_mut().zip(var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Class logits for embedded features.
    pub fn classify(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        self.classifier.forward(tape, &self.store, features)
    }

    /// Probability that each row comes from the source domain.
    pub fn discriminate(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let h = self.discriminator[0].forward(tape, &self.store, features)?;
        let h = tape.relu(h)?;
        let z = self.discriminator[1].forward(tape, &self.store, h)?;
        Ok(tape.sigmoid(z)?)
    }

    /// Eval-mode features for a whole matrix.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let e = self.embed(&mut tape, xn, Mode::Eval)?;
        Ok(tape.value(e.features).clone())
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let e = self.embed(&mut tape, xn, Mode::Eval)?;
        let l = self.classify(&mut tape, e.features)?;
        Ok(tape.value(l).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            classes: self.classes,
            params: self
                .store
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
            running: self.running.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |m: String| Err(ModelError::Checkpoint(m));
        if ck.format != CHECKPOINT_FORMAT {
            return bad(format!("unknown format {:?}", ck.format));
        }
        if ck.version != CHECKPOINT_VERSION {
            return bad(format!("unsupported version {}", ck.version));
        }
        let mut model = Model::new(ck.architecture.clone(), ck.classes, 0)?;
        if ck.params.len() != model.store.len() {
            return bad(format!("{} parameters, architecture has {}", ck.params.len(), model.store.len()));
        }
        for rec in &ck.params {
            let Some(id) = model.store.find(&rec.name) else {
                return bad(format!("unknown parameter {:?}", rec.name));
            };
            let value = model.store.value_mut(id);
            if value.shape() != rec.shape.as_slice() || rec.values.len() != value.len() {
                return bad(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    rec.name,
                    rec.shape,
                    value.shape()
                ));
            }
            value.data_mut().copy_from_slice(&rec.values);
        }
        if ck.running.len() != model.running.len()
            || ck
                .running
                .iter()
                .zip(&model.running)
                .any(|(a, b)| a.mean.len() != b.mean.len() || a.var.len() != b.var.len())
        {
            return bad("running statistics do not match the architecture".into());
        }
        model.running = ck.running.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

/// On-disk parameter container. Values are written as shortest round-trip
/// decimal strings, so save/load is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub classes: usize,
    pub params: Vec<ParamRecord>,
    pub running: Vec<RunningStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cls_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    Ok(tape.cross_entropy(logits, labels)?)
}

fn mean_log(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let n = tape.value(p).rows();
    let c = tape.clamp(p, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let l = tape.log(c)?;
    let s = tape.sum(l)?;
    Ok(tape.scale(s, 1.0 / n as f64)?)
}

/// `mean log d_s + mean log(1 - d_t)`.
pub fn dann_loss(tape: &mut Tape, d_s: NodeId, d_t: NodeId) -> Result<NodeId> {
    let src = mean_log(tape, d_s)?;
    let neg = tape.neg(d_t)?;
    let comp = tape.add_scalar(neg, 1.0)?;
    let tgt = mean_log(tape, comp)?;
    Ok(tape.add(src, tgt)?)
}

/// `e·H·exp(-H)`.
pub fn rho(entropy: f64) -> f64 {
    std::f64::consts::E * entropy * (-entropy).exp()
}

/// Per-row weights from natural-log entropy of probability rows. Plain
/// values, so nothing flows back through them.
pub fn entropy_weights(p: &Tensor) -> Vec<f64> {
    (0..p.rows())
        .map(|i| {
            let h = -p.row(i).iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>();
            rho(h.max(0.0)).clamp(0.0, 1.0)
        })
        .collect()
}

/// Softmax of logits, row by row.
pub fn probabilities(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}
