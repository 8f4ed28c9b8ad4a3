use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gen_blobs, gen_two_moons, load_idx, upscale, DataError, Domain, DomainDataset, Split, UnlabeledSet};

pub const DATA_DIR_ENV: &str = "LAPDA_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScenarioKind {
    TwoMoonsRotate {
        angle: f64,
        noise: f64,
    },
    BlobsShift {
        classes: usize,
        shift: [f64; 2],
        noise: f64,
    },
    /// Source and target IDX pairs. Source images are resized to the target
    /// side when the two differ.
    IdxPair {
        source_images: String,
        source_labels: String,
        target_images: String,
        target_labels: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(flatten)]
    pub kind: ScenarioKind,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Scenario(m));
        if self.n_source == 0 || self.n_target == 0 || self.n_test == 0 {
            return bad("sample counts must be positive".into());
        }
        match &self.kind {
            ScenarioKind::TwoMoonsRotate { angle, noise } => {
                if !(0.0..180.0).contains(angle) {
                    return bad(format!("angle {angle} outside [0, 180)"));
                }
                if *noise < 0.0 || !noise.is_finite() {
                    return bad(format!("noise {noise} must be nonnegative"));
                }
                if self.n_source < 2 || self.n_target < 2 {
                    return bad("two-moons needs at least two points per split".into());
                }
            }
            ScenarioKind::BlobsShift { classes, noise, shift } => {
                if *classes < 2 {
                    return bad(format!("blobs need at least 2 classes, got {classes}"));
                }
                if *noise < 0.0 || !shift.iter().all(|s| s.is_finite()) {
                    return bad("noise must be nonnegative and shift finite".into());
                }
            }
            ScenarioKind::IdxPair { .. } => {}
        }
        Ok(())
    }
}

/// Training and evaluation splits of one scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub source: DomainDataset,
    pub target_train: UnlabeledSet,
    pub validation: DomainDataset,
    pub test: DomainDataset,
    pub classes: usize,
}

impl Scenario {
    pub fn input_width(&self) -> usize {
        self.source.x.cols()
    }

    /// Side length for square image inputs.
    pub fn image_side(&self) -> Option<usize> {
        self.source.image_shape.filter(|(r, c)| r == c).map(|(r, _)| r)
    }
}

/// Relative paths are taken from `$LAPDA_DATA_DIR` when set.
pub fn resolve_data_path(p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Path::new(&dir).join(path),
        None => path.to_path_buf(),
    }
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Every split comes from an independent draw; target training data loses
/// its labels here.
pub fn build_scenario(spec: &ScenarioSpec, n_validation: usize) -> Result<Scenario, DataError> {
    spec.validate()?;
    if n_validation == 0 {
        return Err(DataError::Scenario("validation split must be nonempty".into()));
    }
    let s = |k| sub_seed(spec.seed, k);
    let (source, target_train, validation, test) = match &spec.kind {
        ScenarioKind::TwoMoonsRotate { angle, noise } => {
            let gen = |n: usize, k| gen_two_moons(n.max(2), *angle, *noise, s(k));
            (gen(spec.n_source, 0).0, gen(spec.n_target, 1).1, gen(n_validation, 2).1, gen(spec.n_test, 3).1)
        }
        ScenarioKind::BlobsShift { classes, shift, noise } => {
            let gen = |n: usize, k| gen_blobs(n, *classes, *shift, *noise, s(k));
            (gen(spec.n_source, 0).0, gen(spec.n_target, 1).1, gen(n_validation, 2).1, gen(spec.n_test, 3).1)
        }
        ScenarioKind::IdxPair { source_images, source_labels, target_images, target_labels } => {
            let src = load_idx(
                &resolve_data_path(source_images),
                &resolve_data_path(source_labels),
                Domain::Source,
                Split::Train,
            )?;
            let tgt = load_idx(
                &resolve_data_path(target_images),
                &resolve_data_path(target_labels),
                Domain::Target,
                Split::Train,
            )?;
            idx_splits(spec, n_validation, src, tgt)?
        }
    };
    let classes = source.classes.max(validation.classes).max(test.classes);
    Ok(Scenario {
        spec: spec.clone(),
        source: DomainDataset { classes, ..source },
        target_train: target_train.into_unlabeled(),
        validation: DomainDataset { classes, ..validation.relabel(Domain::Target, Split::Validation) },
        test: DomainDataset { classes, ..test.relabel(Domain::Target, Split::Test) },
        classes,
    })
}

fn idx_splits(
    spec: &ScenarioSpec,
    n_validation: usize,
    src: DomainDataset,
    tgt: DomainDataset,
) -> Result<(DomainDataset, DomainDataset, DomainDataset, DomainDataset), DataError> {
    let (Some((sr, sc)), Some((tr, tc))) = (src.image_shape, tgt.image_shape) else {
        return Err(DataError::Scenario("idx data without image shape".into()));
    };
    if sr != sc || tr != tc {
        return Err(DataError::Scenario("only square images are supported".into()));
    }
    let need = spec.n_target + n_validation + spec.n_test;
    if spec.n_source > src.len() || need > tgt.len() {
        return Err(DataError::Scenario(format!(
            "requested {} source / {need} target samples, files hold {} / {}",
            spec.n_source,
            src.len(),
            tgt.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, 4));
    let mut si: Vec<usize> = (0..src.len()).collect();
    si.shuffle(&mut rng);
    let mut source = src.subset(&si[..spec.n_source]);
    if sr != tr {
        source.x = upscale(&source.x, sr, tr);
        source.image_shape = Some((tr, tr));
    }
    let mut ti: Vec<usize> = (0..tgt.len()).collect();
    ti.shuffle(&mut rng);
    let (a, rest) = ti.split_at(spec.n_target);
    let (b, rest) = rest.split_at(n_validation);
    let c = &rest[..spec.n_test];
    Ok((source, tgt.subset(a), tgt.subset(b), tgt.subset(c)))
}
