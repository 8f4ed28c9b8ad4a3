//! Command implementations behind the `lapda` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use lapda::config::{self, RunConfig};
use lapda::data::{build_scenario, Scenario};
use lapda::model::Model;
use lapda::training::{evaluate, fit_with, FitResult, StepReport, TrainError, TrainingData, Variant};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::config(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "lapda", version, about = "Domain adaptation by label propagation with cycle consistency")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the full model and write the run directory.
    Train(RunArgs),
    /// Train source-only, adversarial-only and full variants with one seed.
    Compare(RunArgs),
    /// Write embedded features of a dataset split to CSV.
    DumpFeatures(DumpArgs),
    /// Report classifier accuracy of a checkpoint on a labeled split.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value`, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory (created if missing).
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    /// Source training set followed by unlabeled target training set.
    All,
    Source,
    Target,
    Validation,
    Test,
}

#[derive(Args, Debug, Clone)]
pub struct DumpArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// CSV path.
    #[arg(long, default_value = "features.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => {
            cmd_train(a).map(|s| println!("best_val_acc {:?} test_acc {}", s.best_val_acc, s.test_acc))
        }
        Command::Compare(a) => cmd_compare(a).map(|rows| {
            for r in rows {
                println!("{:<12} val {:?} test {}", r.variant, r.val_acc, r.test_acc);
            }
        }),
        Command::DumpFeatures(a) => cmd_dump_features(a).map(|n| println!("wrote {n} rows to {}", a.out.display())),
        Command::Eval(a) => cmd_eval(a).map(|r| println!("{}", serde_json::to_string(&r).expect("plain struct"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Reads, overrides and resolves the run config.
pub fn resolve_config(a: &ConfigArgs) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", a.config.display())))?;
    let mut overrides = Vec::new();
    for o in &a.overrides {
        overrides.push(
            config::parse_assignment(o).ok_or_else(|| CliError::config(format!("override {o:?} is not key=value")))?,
        );
    }
    if let Some(seed) = a.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = config::load(&text, &overrides).map_err(|e| CliError::config(format!("{}: {e}", a.config.display())))?;
    cfg.scenario.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

fn load_scenario(cfg: &RunConfig) -> Result<Scenario, CliError> {
    let sc = build_scenario(&cfg.scenario, cfg.train.validation_size).map_err(|e| match e {
        lapda::data::DataError::Scenario(_) => CliError::config(e.to_string()),
        _ => CliError::runtime(e.to_string()),
    })?;
    cfg.train.validate(sc.classes)?;
    Ok(sc)
}

/// Lowercase hex SHA-256 of the canonical config text.
pub fn config_hash(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(config::to_text(cfg).as_bytes()))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    config_text: String,
    config_hash: String,
    started_at: String,
    finished_at: String,
    outputs: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_manifest(
    out: &Path,
    command: &'static str,
    cfg: &RunConfig,
    started: String,
    outputs: &[&str],
) -> Result<(), CliError> {
    let m = Manifest {
        tool: "lapda",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: cfg,
        config_text: config::to_text(cfg),
        config_hash: config_hash(cfg),
        started_at: started,
        finished_at: now(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join("manifest.json"), &m)
}

#[derive(Serialize, Debug, Clone, PartialEq)]
pub struct Summary {
    pub scenario: lapda::data::ScenarioSpec,
    pub config: lapda::training::TrainConfig,
    pub best_val_acc: Option<f64>,
    pub test_acc: f64,
    pub steps: Vec<StepReport>,
}

/// Fits one config, streaming reports to `dir/steps.jsonl` and writing
/// `summary.json` and `checkpoint.json`.
fn train_into(dir: &Path, cfg: &RunConfig, sc: &Scenario) -> Result<(Summary, FitResult), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let steps_path = dir.join("steps.jsonl");
    let mut steps = BufWriter::new(File::create(&steps_path).map_err(io_err(&steps_path))?);
    let mut write_err = None;
    let data = TrainingData { source: &sc.source, target: &sc.target_train, validation: &sc.validation };
    let fitted = fit_with(data, &cfg.train, |r| {
        if let Some(w) = &r.warning {
            eprintln!("warning: step {}: {w}", r.step);
        }
        let line = serde_json::to_string(r).expect("plain struct");
        if let Err(e) = writeln!(steps, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(io_err(&steps_path)(e));
    }
    steps.flush().map_err(io_err(&steps_path))?;
    let fitted = fitted?;
    let test_acc = evaluate(&fitted.model, &sc.test)?;
    let summary = Summary {
        scenario: cfg.scenario.clone(),
        config: cfg.train.clone(),
        best_val_acc: fitted.best_val_acc,
        test_acc,
        steps: fitted.history.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    let ck = dir.join("checkpoint.json");
    fitted.model.save(&ck).map_err(|e| CliError::runtime(format!("{}: {e}", ck.display())))?;
    Ok((summary, fitted))
}

pub fn cmd_train(a: &RunArgs) -> Result<Summary, CliError> {
    let started = now();
    let cfg = resolve_config(&a.cfg)?;
    let sc = load_scenario(&cfg)?;
    let (summary, _) = train_into(&a.out, &cfg, &sc)?;
    write_manifest(&a.out, "train", &cfg, started, &["steps.jsonl", "summary.json", "checkpoint.json"])?;
    Ok(summary)
}

#[derive(Serialize, Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub variant: &'static str,
    pub val_acc: Option<f64>,
    pub test_acc: f64,
    pub steps: usize,
}

/// Runs the three variants one after another, each in its own
/// subdirectory, and writes `compare.csv`.
pub fn cmd_compare(a: &RunArgs) -> Result<Vec<CompareRow>, CliError> {
    let started = now();
    let cfg = resolve_config(&a.cfg)?;
    let sc = load_scenario(&cfg)?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let vcfg = RunConfig { train: v.apply(&cfg.train), ..cfg.clone() };
        let (summary, _) = train_into(&a.out.join(v.name()), &vcfg, &sc)?;
        rows.push(CompareRow {
            variant: v.name(),
            val_acc: summary.best_val_acc,
            test_acc: summary.test_acc,
            steps: summary.steps.len(),
        });
    }
    let mut csv = String::from("variant,val_acc,test_acc,steps\n");
    for r in &rows {
        let val = r.val_acc.map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{val},{:?},{}", r.variant, r.test_acc, r.steps);
    }
    let path = a.out.join("compare.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    let outputs: Vec<String> = std::iter::once("compare.csv".to_string())
        .chain(Variant::ALL.iter().map(|v| format!("{}/", v.name())))
        .collect();
    write_manifest(&a.out, "compare", &cfg, started, &outputs.iter().map(String::as_str).collect::<Vec<_>>())?;
    Ok(rows)
}

fn load_checkpoint(path: &Path, sc: &Scenario) -> Result<Model, CliError> {
    let model = Model::load(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    if model.arch.input_width() != sc.input_width() {
        return Err(CliError::runtime(format!(
            "checkpoint expects {} input columns, dataset has {}",
            model.arch.input_width(),
            sc.input_width()
        )));
    }
    Ok(model)
}

/// Writes `domain,label,f_1..f_d` rows and returns the number of data rows.
pub fn cmd_dump_features(a: &DumpArgs) -> Result<usize, CliError> {
    let cfg = resolve_config(&a.cfg)?;
    let sc = load_scenario(&cfg)?;
    let model = load_checkpoint(&a.checkpoint, &sc)?;
    let mut parts: Vec<(&str, &lapda::autodiff::Tensor, Option<&[usize]>)> = Vec::new();
    if matches!(a.split, SplitArg::All | SplitArg::Source) {
        parts.push(("source", &sc.source.x, Some(sc.source.labels())));
    }
    if matches!(a.split, SplitArg::All | SplitArg::Target) {
        parts.push(("target", &sc.target_train.x, None));
    }
    if a.split == SplitArg::Validation {
        parts.push(("target", &sc.validation.x, Some(sc.validation.labels())));
    }
    if a.split == SplitArg::Test {
        parts.push(("target", &sc.test.x, Some(sc.test.labels())));
    }
    let d = model.arch.feature_dim();
    let mut csv = String::from("domain,label");
    for k in 1..=d {
        let _ = write!(csv, ",f_{k}");
    }
    csv.push('\n');
    let mut rows = 0;
    for (domain, x, labels) in parts {
        let f = model.features(x).map_err(|e| CliError::runtime(e.to_string()))?;
        for i in 0..f.rows() {
            let label = labels.map_or(-1, |l| l[i] as i64);
            let _ = write!(csv, "{domain},{label}");
            for v in f.row(i) {
                let _ = write!(csv, ",{v:?}");
            }
            csv.push('\n');
            rows += 1;
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&a.out, csv).map_err(io_err(&a.out))?;
    Ok(rows)
}

#[derive(Serialize, Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: &'static str,
    pub accuracy: f64,
    pub samples: usize,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport, CliError> {
    let cfg = resolve_config(&a.cfg)?;
    let sc = load_scenario(&cfg)?;
    let model = load_checkpoint(&a.checkpoint, &sc)?;
    let (split, ds) = match a.split {
        SplitArg::Test => ("test", &sc.test),
        SplitArg::Validation => ("validation", &sc.validation),
        SplitArg::Source => ("source", &sc.source),
        SplitArg::All | SplitArg::Target => {
            return Err(CliError::config("target training data is unlabeled; use test, validation or source"))
        }
    };
    Ok(EvalReport { split, accuracy: evaluate(&model, ds)?, samples: ds.len() })
}
