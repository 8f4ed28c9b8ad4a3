use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lapda::autodiff::Tape;
use lapda::data::{build_scenario, label_reads, Domain, Split};
use lapda::model::{Mode, Model};
use lapda_cli::{
    cmd_compare, cmd_dump_features, cmd_eval, cmd_train, ConfigArgs, DumpArgs, EvalArgs, RunArgs, SplitArg,
};

const SMALL: &str = "\
# tiny run
scenario = two-moons-rotate
angle = 30
noise = 0.1
n_source = 120
n_target = 120
n_test = 80
validation_size = 40
total_steps = 40
eval_every = 20
batch_source = 32
batch_target = 32
feature_dim = 4
seed = 3
";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn cfg_args(path: &Path, overrides: &[&str]) -> ConfigArgs {
    ConfigArgs { config: path.to_path_buf(), seed: None, overrides: overrides.iter().map(|s| s.to_string()).collect() }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lapda"))
}

#[test]
fn missing_config_exits_with_code_two_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = bin().args(["train", "--config"]).arg(&missing).arg("--out").arg(dir.path().join("r")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.cfg"), "{err}");
}

#[test]
fn bad_config_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scenario = two-moons-rotate\nwobble = 3\n");
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("r")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.cfg"));
}

#[test]
fn malformed_override_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--override", "alpha"])
        .arg("--out")
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("run");
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "steps.jsonl", "summary.json", "checkpoint.json"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(manifest["config_text"].as_str().unwrap().contains("alpha"));
    let steps = fs::read_to_string(out_dir.join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 40);
}

#[test]
fn alpha_zero_override_disables_cycle_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = RunArgs { cfg: cfg_args(&cfg, &["alpha=0"]), out: dir.path().join("r") };
    let summary = cmd_train(&run).unwrap();
    assert_eq!(summary.config.alpha, 0.0);
    assert!(summary.steps.iter().all(|s| s.l_cycle == 0.0));
    assert!(summary.steps.iter().any(|s| s.l_dann != 0.0));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = ConfigArgs { seed: Some(11), ..cfg_args(&cfg, &["seed=5"]) };
    let resolved = lapda_cli::resolve_config(&a).unwrap();
    assert_eq!(resolved.train.seed, 11);
}

#[test]
fn identical_runs_give_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = RunArgs { cfg: cfg_args(&cfg, &[]), out: dir.path().join("a") };
    let b = RunArgs { cfg: cfg_args(&cfg, &[]), out: dir.path().join("b") };
    cmd_train(&a).unwrap();
    cmd_train(&b).unwrap();
    for f in ["steps.jsonl", "summary.json", "checkpoint.json"] {
        assert_eq!(fs::read(a.out.join(f)).unwrap(), fs::read(b.out.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn compare_writes_csv_and_variant_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = RunArgs { cfg: cfg_args(&cfg, &[]), out: dir.path().join("cmp") };
    let rows = cmd_compare(&run).unwrap();
    assert_eq!(rows.len(), 3);
    let csv = fs::read_to_string(run.out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,val_acc,test_acc,steps");
    assert_eq!(lines.len(), 4);
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["source-only", "adversarial", "full"]);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 4);
        let acc: f64 = cols[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(cols[3], "40");
    }
    for n in names {
        assert!(run.out.join(n).join("summary.json").is_file());
    }
    let so: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.out.join("source-only/summary.json")).unwrap()).unwrap();
    assert!(so["steps"].as_array().unwrap().iter().all(|s| s["l_dann"] == 0.0 && s["l_cycle"] == 0.0));
}

#[test]
fn feature_dump_matches_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = RunArgs { cfg: cfg_args(&cfg, &[]), out: dir.path().join("r") };
    cmd_train(&run).unwrap();
    let ck = run.out.join("checkpoint.json");
    let dump = |name: &str| {
        let a = DumpArgs {
            cfg: cfg_args(&cfg, &[]),
            checkpoint: ck.clone(),
            split: SplitArg::All,
            out: dir.path().join(name),
        };
        let n = cmd_dump_features(&a).unwrap();
        (n, fs::read_to_string(&a.out).unwrap())
    };
    let (n, text) = dump("f1.csv");
    let (_, again) = dump("f2.csv");
    assert_eq!(text, again);
    assert_eq!(n, 240);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), n + 1);
    assert_eq!(lines[0], "domain,label,f_1,f_2,f_3,f_4");

    let resolved = lapda_cli::resolve_config(&cfg_args(&cfg, &[])).unwrap();
    let sc = build_scenario(&resolved.scenario, resolved.train.validation_size).unwrap();
    let model = Model::load(&ck).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(sc.source.x.clone());
    let emb = model.embed(&mut tape, x, Mode::Eval).unwrap();
    let f = tape.value(emb.features).clone();
    for i in 0..sc.source.len() {
        let cols: Vec<&str> = lines[1 + i].split(',').collect();
        assert_eq!(cols[0], "source");
        assert_eq!(cols[1].parse::<usize>().unwrap(), sc.source.labels()[i]);
        for (k, c) in cols[2..].iter().enumerate() {
            assert!((c.parse::<f64>().unwrap() - f.get(i, k)).abs() < 1e-12);
        }
    }
    for l in &lines[1 + sc.source.len()..] {
        assert!(l.starts_with("target,-1,"));
    }
}

#[test]
fn eval_reports_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = RunArgs { cfg: cfg_args(&cfg, &[]), out: dir.path().join("r") };
    let summary = cmd_train(&run).unwrap();
    let e = EvalArgs { cfg: cfg_args(&cfg, &[]), checkpoint: run.out.join("checkpoint.json"), split: SplitArg::Test };
    let report = cmd_eval(&e).unwrap();
    assert_eq!(report.samples, 80);
    assert_eq!(report.accuracy, summary.test_acc);
    let bad = EvalArgs { split: SplitArg::Target, ..e };
    assert_eq!(cmd_eval(&bad).unwrap_err().code, 2);
}

#[test]
fn target_training_labels_are_never_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = RunArgs { cfg: cfg_args(&cfg, &[]), out: dir.path().join("r") };
    cmd_compare(&run).unwrap();
    assert_eq!(label_reads(Domain::Target, Split::Train), 0);
    assert!(label_reads(Domain::Source, Split::Train) > 0);
}

#[test]
fn run_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let first =
        RunArgs { cfg: ConfigArgs { seed: Some(21), ..cfg_args(&cfg, &["lr=0.02"]) }, out: dir.path().join("a") };
    cmd_train(&first).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.out.join("manifest.json")).unwrap()).unwrap();
    let replay = dir.path().join("replay.cfg");
    fs::write(&replay, manifest["config_text"].as_str().unwrap()).unwrap();
    let second = RunArgs { cfg: cfg_args(&replay, &[]), out: dir.path().join("b") };
    cmd_train(&second).unwrap();
    let m2: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(second.out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], m2["config_hash"]);
    assert_eq!(fs::read(first.out.join("steps.jsonl")).unwrap(), fs::read(second.out.join("steps.jsonl")).unwrap());
}
