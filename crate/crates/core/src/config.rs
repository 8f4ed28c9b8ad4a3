//! Plain-text `key = value` run configuration. Later assignments win, so
//! command-line overrides are simply appended after the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ScenarioKind, ScenarioSpec};
use crate::propagation::PropagationMode;
use crate::training::{GeneratorKind, TrainConfig};

pub const DEFAULT_TRUNCATION_STEPS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("`{key}` does not apply to scenario {scenario}")]
    NotApplicable { key: String, scenario: &'static str },
    #[error("scenario {scenario} needs `{key}`")]
    Missing { key: &'static str, scenario: &'static str },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioSpec {
                kind: ScenarioKind::TwoMoonsRotate { angle: 30.0, noise: 0.1 },
                n_source: 1000,
                n_target: 1000,
                n_test: 1000,
                seed: 0,
            },
            train: TrainConfig::default(),
        }
    }
}

/// Assignments in order of appearance. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_assignment(line).ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?);
    }
    Ok(out)
}

/// One `key=value` pair, as given on the command line.
pub fn parse_assignment(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty()).then(|| (k.to_string(), v.to_string()))
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: v.into(), reason: e.to_string() })
}

fn kind_name(kind: &ScenarioKind) -> &'static str {
    match kind {
        ScenarioKind::TwoMoonsRotate { .. } => "two-moons-rotate",
        ScenarioKind::BlobsShift { .. } => "blobs-shift",
        ScenarioKind::IdxPair { .. } => "idx-pair",
    }
}

const SCENARIO_KEYS: [&str; 9] = [
    "angle",
    "noise",
    "classes",
    "shift",
    "source_images",
    "source_labels",
    "target_images",
    "target_labels",
    "scenario",
];

/// Resolves defaults < `pairs` (in order).
pub fn resolve(pairs: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut last: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in pairs {
        last.insert(k, v);
    }
    let mut cfg = RunConfig::default();
    let kind = last.get("scenario").copied().unwrap_or("two-moons-rotate");
    cfg.scenario.kind = match kind {
        "two-moons-rotate" => ScenarioKind::TwoMoonsRotate { angle: 30.0, noise: 0.1 },
        "blobs-shift" => ScenarioKind::BlobsShift { classes: 3, shift: [2.0, 0.0], noise: 0.5 },
        "idx-pair" => ScenarioKind::IdxPair {
            source_images: String::new(),
            source_labels: String::new(),
            target_images: String::new(),
            target_labels: String::new(),
        },
        other => {
            return Err(ConfigError::Value {
                key: "scenario".into(),
                value: other.into(),
                reason: "expected two-moons-rotate, blobs-shift or idx-pair".into(),
            })
        }
    };
    let scenario_name = kind_name(&cfg.scenario.kind);
    let mut truncation_steps = DEFAULT_TRUNCATION_STEPS;
    let mut truncated = false;
    let mut data_seed = None;
    let t = &mut cfg.train;
    for (&k, &v) in &last {
        match k {
            "scenario" => {}
            "seed" => t.seed = value(k, v)?,
            "data_seed" => data_seed = Some(value(k, v)?),
            "n_source" => cfg.scenario.n_source = value(k, v)?,
            "n_target" => cfg.scenario.n_target = value(k, v)?,
            "n_test" => cfg.scenario.n_test = value(k, v)?,
            "alpha" => t.alpha = value(k, v)?,
            "gamma" => t.gamma = value(k, v)?,
            "lr" => t.lr = value(k, v)?,
            "momentum" => t.momentum = value(k, v)?,
            "batch_source" => t.batch_source = value(k, v)?,
            "batch_target" => t.batch_target = value(k, v)?,
            "total_steps" => t.total_steps = value(k, v)?,
            "deficit_weight" => t.deficit_weight = value(k, v)?,
            "eval_every" => t.eval_every = value(k, v)?,
            "validation_size" => t.validation_size = value(k, v)?,
            "adversarial" => t.adversarial = value(k, v)?,
            "class_balanced" => t.class_balanced = value(k, v)?,
            "feature_dim" => t.feature_dim = value(k, v)?,
            "truncation_steps" => truncation_steps = value(k, v)?,
            "propagation" => {
                truncated = match v {
                    "closed" => false,
                    "truncated" => true,
                    _ => {
                        return Err(ConfigError::Value {
                            key: k.into(),
                            value: v.into(),
                            reason: "expected closed or truncated".into(),
                        })
                    }
                }
            }
            "generator" => {
                t.generator = match v {
                    "mlp" => GeneratorKind::Mlp,
                    "conv2" => GeneratorKind::Conv2,
                    _ => {
                        return Err(ConfigError::Value {
                            key: k.into(),
                            value: v.into(),
                            reason: "expected mlp or conv2".into(),
                        })
                    }
                }
            }
            _ if SCENARIO_KEYS.contains(&k) => set_scenario_key(&mut cfg.scenario.kind, k, v, scenario_name)?,
            _ => return Err(ConfigError::UnknownKey(k.into())),
        }
    }
    if truncated {
        t.propagation = PropagationMode::Truncated { steps: truncation_steps };
    }
    cfg.scenario.seed = data_seed.unwrap_or(t.seed);
    if let ScenarioKind::IdxPair { source_images, source_labels, target_images, target_labels } = &cfg.scenario.kind {
        for (key, v) in [
            ("source_images", source_images),
            ("source_labels", source_labels),
            ("target_images", target_images),
            ("target_labels", target_labels),
        ] {
            if v.is_empty() {
                return Err(ConfigError::Missing { key, scenario: scenario_name });
            }
        }
    }
    Ok(cfg)
}

fn set_scenario_key(kind: &mut ScenarioKind, k: &str, v: &str, scenario: &'static str) -> Result<(), ConfigError> {
    let na = || ConfigError::NotApplicable { key: k.into(), scenario };
    match (kind, k) {
        (ScenarioKind::TwoMoonsRotate { angle, .. }, "angle") => *angle = value(k, v)?,
        (ScenarioKind::TwoMoonsRotate { noise, .. } | ScenarioKind::BlobsShift { noise, .. }, "noise") => {
            *noise = value(k, v)?
        }
        (ScenarioKind::BlobsShift { classes, .. }, "classes") => *classes = value(k, v)?,
        (ScenarioKind::BlobsShift { shift, .. }, "shift") => {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(ConfigError::Value { key: k.into(), value: v.into(), reason: "expected `x,y`".into() });
            }
            *shift = [value(k, parts[0])?, value(k, parts[1])?];
        }
        (ScenarioKind::IdxPair { source_images, .. }, "source_images") => *source_images = v.into(),
        (ScenarioKind::IdxPair { source_labels, .. }, "source_labels") => *source_labels = v.into(),
        (ScenarioKind::IdxPair { target_images, .. }, "target_images") => *target_images = v.into(),
        (ScenarioKind::IdxPair { target_labels, .. }, "target_labels") => *target_labels = v.into(),
        _ => return Err(na()),
    }
    Ok(())
}

/// Parses a file's text followed by overrides.
pub fn load(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut pairs = parse_pairs(text)?;
    pairs.extend(overrides.iter().cloned());
    resolve(&pairs)
}

/// Every setting, defaults included, in a form [`load`] reads back to the
/// same config.
pub fn to_text(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let sc = &cfg.scenario;
    let t = &cfg.train;
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("scenario", kind_name(&sc.kind).into());
    match &sc.kind {
        ScenarioKind::TwoMoonsRotate { angle, noise } => {
            kv("angle", format!("{angle:?}"));
            kv("noise", format!("{noise:?}"));
        }
        ScenarioKind::BlobsShift { classes, shift, noise } => {
            kv("classes", classes.to_string());
            kv("shift", format!("{:?},{:?}", shift[0], shift[1]));
            kv("noise", format!("{noise:?}"));
        }
        ScenarioKind::IdxPair { source_images, source_labels, target_images, target_labels } => {
            kv("source_images", source_images.clone());
            kv("source_labels", source_labels.clone());
            kv("target_images", target_images.clone());
            kv("target_labels", target_labels.clone());
        }
    }
    kv("n_source", sc.n_source.to_string());
    kv("n_target", sc.n_target.to_string());
    kv("n_test", sc.n_test.to_string());
    kv("seed", t.seed.to_string());
    kv("data_seed", sc.seed.to_string());
    kv("alpha", format!("{:?}", t.alpha));
    kv("gamma", format!("{:?}", t.gamma));
    kv("lr", format!("{:?}", t.lr));
    kv("momentum", format!("{:?}", t.momentum));
    kv("batch_source", t.batch_source.to_string());
    kv("batch_target", t.batch_target.to_string());
    kv("total_steps", t.total_steps.to_string());
    match t.propagation {
        PropagationMode::Closed => kv("propagation", "closed".into()),
        PropagationMode::Truncated { steps } => {
            kv("propagation", "truncated".into());
            kv("truncation_steps", steps.to_string());
        }
    }
    kv("deficit_weight", format!("{:?}", t.deficit_weight));
    kv("eval_every", t.eval_every.to_string());
    kv("validation_size", t.validation_size.to_string());
    kv("adversarial", t.adversarial.to_string());
    kv("class_balanced", t.class_balanced.to_string());
    kv(
        "generator",
        match t.generator {
            GeneratorKind::Mlp => "mlp".into(),
            GeneratorKind::Conv2 => "conv2".into(),
        },
    );
    kv("feature_dim", t.feature_dim.to_string());
    s
}
