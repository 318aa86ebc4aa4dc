use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use steppingnet::cli::{self, CliError, Config, Op};

fn desk_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk")
}

/// A few seconds of work end to end on the desk data.
fn tiny_config() -> Config {
    let text = format!(
        r#"
[run]
seed = 5
[model]
expansion_ratio = 1.5
subnets = 3
[data]
dir = "{}"
train_limit = 160
test_limit = 40
[teacher]
epochs = 1
[construct]
budgets = [0.4, 0.7, 1.0]
iterations = 3
batches_per_subnet = 2
[distill]
epochs = 1
"#,
        desk_dir().display()
    );
    Config::parse(&text).unwrap()
}

#[test]
fn config_defaults_and_overrides() {
    let cfg = Config::parse("").unwrap();
    assert_eq!(cfg, Config::default());
    assert_eq!(cfg.construct.budgets.len(), cfg.model.subnets);
    let cfg = Config::parse("[distill]\ngamma = 1.0\n").unwrap();
    assert_eq!(cfg.distill.gamma, 1.0);
    assert_eq!(cfg.distill.epochs, Config::default().distill.epochs);
    assert!(Config::parse("[distill]\ngama = 1.0\n").is_err());
    assert!(Config::parse("[model]\nsubnets = \"four\"\n").is_err());
    let round = Config::parse(&tiny_config().to_toml()).unwrap();
    assert_eq!(round, tiny_config());
}

#[test]
fn schedule_and_level_parsing() {
    assert_eq!(
        cli::parse_schedule("0:1, 1:3, 2:2, 5:expand:4").unwrap(),
        vec![(0, Op::Start, 1), (1, Op::Expand, 3), (2, Op::Reduce, 2), (5, Op::Expand, 4)]
    );
    for bad in ["", "1", "0:1,0:2", "0:1,1:go:2", "0:expand:1", "0:1,1:start:2", "a:1"] {
        assert!(cli::parse_schedule(bad).is_err(), "{bad}");
    }
    assert_eq!(cli::parse_levels(None, 3).unwrap(), vec![1, 2, 3]);
    assert_eq!(cli::parse_levels(Some("3,1"), 3).unwrap(), vec![3, 1]);
    assert!(cli::parse_levels(Some("0"), 3).is_err());
    assert!(cli::parse_levels(Some("4"), 3).is_err());
}

#[test]
fn pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let teacher = tmp.path().join("teacher");
    let student = tmp.path().join("student");
    let distilled = tmp.path().join("distilled");

    let t = cli::cmd_pretrain_teacher(&cfg, &teacher).unwrap();
    assert_eq!(t.accuracy.len(), 1);
    let (c, report) = cli::cmd_construct(&cfg, &student).unwrap();
    assert_eq!(c.accuracy.len(), 3);
    assert!(report.violations.is_empty());
    for f in ["manifest.json", "weights.bin", "metrics.csv", "construction_log.csv", "report.json"] {
        assert!(student.join(f).is_file(), "{f}");
    }
    let header = fs::read_to_string(student.join("metrics.csv")).unwrap();
    assert!(header.starts_with("phase,step,level,mac_count,mac_ratio_vs_original,loss,accuracy\n"));

    let d = cli::cmd_distill(&student, &teacher, &cfg, &distilled).unwrap();
    assert_eq!(d.accuracy.len(), 3);
    let ck = cli::Checkpoint::load(&distilled).unwrap();
    assert_eq!(ck.manifest.stage, "distilled");
    assert_eq!(ck.manifest.teacher_sha256, Some(cli::Checkpoint::load(&teacher).unwrap().weights_sha256()));
    // the assignment table survives retraining
    assert_eq!(ck.manifest.assignment, cli::Checkpoint::load(&student).unwrap().manifest.assignment);

    let rows = cli::cmd_eval(&distilled, Some("1,3"), None, Some(&tmp.path().join("eval.csv"))).unwrap();
    assert_eq!(rows.iter().map(|r| r.level).collect::<Vec<_>>(), vec![1, 3]);
    assert_eq!(rows[0].accuracy, Some(d.accuracy[0]));

    let trace = cli::cmd_anytime_demo(&distilled, "0:1,1:2,2:1,3:3", 5, None, Some(&tmp.path().join("trace.csv"))).unwrap();
    assert_eq!(trace.len(), 20);
    assert!(trace.iter().all(|r| r.path_independent));
    let model = ck.model().unwrap();
    for r in &trace {
        let peak = match r.step {
            0 => 1,
            1 | 2 => 2,
            _ => 3,
        };
        assert_eq!(r.mac_meter, model.mac_count(peak));
    }
}

#[test]
fn zero_epoch_distill_passes_through() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.teacher.epochs = 0;
    cfg.construct.iterations = 1;
    cfg.construct.batches_per_subnet = 1;
    cfg.distill.epochs = 0;
    let teacher = tmp.path().join("t");
    let student = tmp.path().join("s");
    let out = tmp.path().join("d");
    cli::cmd_pretrain_teacher(&cfg, &teacher).unwrap();
    cli::cmd_construct(&cfg, &student).unwrap();
    cli::cmd_distill(&student, &teacher, &cfg, &out).unwrap();
    for f in ["manifest.json", "weights.bin"] {
        assert_eq!(fs::read(student.join(f)).unwrap(), fs::read(out.join(f)).unwrap());
    }
}

#[test]
fn checkpoint_load_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.teacher.epochs = 0;
    let dir = tmp.path().join("t");
    cli::cmd_pretrain_teacher(&cfg, &dir).unwrap();
    let manifest = fs::read_to_string(dir.join("manifest.json")).unwrap();
    let weights = fs::read(dir.join("weights.bin")).unwrap();
    let ck = cli::Checkpoint::from_parts(&manifest, &weights, &dir).unwrap();
    assert_eq!(ck.weight_bytes(), weights);

    let short = &weights[..weights.len() - 4];
    assert!(matches!(cli::Checkpoint::from_parts(&manifest, short, &dir), Err(CliError::Checkpoint { .. })));
    let future = manifest.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert_ne!(future, manifest);
    assert!(matches!(cli::Checkpoint::from_parts(&future, &weights, &dir), Err(CliError::Checkpoint { .. })));
    assert!(cli::Checkpoint::from_parts("{", &weights, &dir).is_err());
    assert!(matches!(cli::Checkpoint::load(&tmp.path().join("missing")), Err(CliError::Io { .. })));
}

#[test]
fn binary_reports_errors_as_json() {
    let bin = env!("CARGO_BIN_EXE_steppingnet");
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(bin).args(["eval"]).arg(tmp.path().join("nothing")).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"]["kind"], "io");
    assert!(v["error"]["message"].is_string());

    let bad_config = tmp.path().join("bad.toml");
    fs::write(&bad_config, "[model]\nwidth = 3\n").unwrap();
    let out = Command::new(bin).args(["construct", "--out"]).arg(tmp.path().join("o")).arg("--config").arg(&bad_config).output().unwrap();
    assert!(!out.status.success());
    let line = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(v["error"]["kind"], "config");
}

#[test]
fn binary_succeeds_on_tiny_run() {
    let bin = env!("CARGO_BIN_EXE_steppingnet");
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.construct.iterations = 1;
    let config = tmp.path().join("tiny.toml");
    fs::write(&config, cfg.to_toml()).unwrap();
    let student = tmp.path().join("s");
    let status = Command::new(bin).args(["construct", "--seed", "8", "--config"]).arg(&config).arg("--out").arg(&student).status().unwrap();
    assert!(status.success());
    assert_eq!(cli::Checkpoint::load(&student).unwrap().manifest.seed, 8);
    let out = Command::new(bin).arg("eval").arg(&student).args(["--levels", "2"]).output().unwrap();
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("eval,0,2,"));
}
