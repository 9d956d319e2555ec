use std::path::Path;
use std::process::Command as Process;

use tpad::cli::{files, Command, Runner};
use tpad::config::RunConfig;
use tpad::experiment::Variant;
use tpad::Error;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out = out.to_string_lossy().into_owned();
    cfg.experiment.synth.sessions = 800;
    cfg.experiment.synth.items_per_cluster = 12;
    cfg.experiment.train.k0_epochs = 3;
    cfg.experiment.train.t_epochs = 2;
    cfg.experiment.train.k1_epochs = 3;
    cfg.experiment.train.probe_steps = 40;
    cfg.experiment.rec.epochs = 1;
    cfg
}

#[test]
fn evaluate_before_train_rec_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny(dir.path())).unwrap();
    runner.run(Command::GenData).unwrap();
    runner.run(Command::Prepare).unwrap();
    match runner.run(Command::Evaluate) {
        Err(Error::State { stage, .. }) => assert_eq!(stage, "train-rec"),
        other => panic!("expected a state error, got {other:?}"),
    }
}

#[test]
fn prepare_before_gen_data_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(tiny(dir.path())).unwrap();
    match runner.run(Command::Prepare) {
        Err(Error::State { stage, .. }) => assert_eq!(stage, "gen-data"),
        other => panic!("expected a state error, got {other:?}"),
    }
}

#[test]
fn stepwise_commands_match_run_all() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stepwise = Runner::new(tiny(a.path())).unwrap();
    for c in [
        Command::GenData,
        Command::Prepare,
        Command::TrainK0,
        Command::TrainT,
        Command::TrainK1,
        Command::Export,
        Command::TrainRec,
        Command::Evaluate,
    ] {
        stepwise.run(c).unwrap();
    }
    let all = Runner::new(tiny(b.path())).unwrap();
    all.run(Command::RunAll).unwrap();
    for name in [files::METRICS, files::EMBEDDINGS, files::PROBES, files::LOG_K1] {
        let x = std::fs::read(stepwise.path(name)).unwrap();
        let y = std::fs::read(all.path(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn id_only_run_skips_transfer_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.variant = Variant::IdOnly;
    let runner = Runner::new(cfg).unwrap();
    runner.run(Command::RunAll).unwrap();
    assert!(runner.path(files::METRICS).exists());
    assert!(!runner.path(files::T).exists());
    assert!(!runner.path(files::K1).exists());
    assert!(!runner.path(files::EMBEDDINGS).exists());
}

#[test]
fn outputs_carry_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let hash = cfg.hash();
    let runner = Runner::new(cfg).unwrap();
    runner.run(Command::RunAll).unwrap();
    assert!(runner.dir().ends_with(format!("{hash}-seed1")));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(runner.path(files::METRICS)).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"], hash.as_str());
    let csv = std::fs::read_to_string(runner.path(files::METRICS_CSV)).unwrap();
    assert!(csv.starts_with(&format!("# config {hash} seed 1\n")));
    let saved = RunConfig::load(&runner.path(files::CONFIG)).unwrap();
    assert_eq!(saved.hash(), hash);
}

#[test]
fn binary_reports_bad_config_and_prints_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_tpad");

    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "seed = 3\n").unwrap();
    let out = Process::new(bin).args(["--config", conf.to_str().unwrap(), "show-config"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    let good = dir.path().join("good.conf");
    std::fs::write(&good, tiny(dir.path()).render()).unwrap();
    let out = Process::new(bin)
        .args(["--config", good.to_str().unwrap(), "--seed", "4", "gen-data"])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed = String::from_utf8_lossy(&out.stdout);
    let run_dir = Path::new(printed.trim());
    assert!(run_dir.join(files::ITEMS).exists());
    assert!(run_dir.to_string_lossy().ends_with("-seed4"));
}

#[test]
fn shipped_configs_parse_and_default_matches_builtin() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = RunConfig::load(&root.join("default.conf")).unwrap();
    assert_eq!(default.hash(), RunConfig::default().hash());
    let quick = RunConfig::load(&root.join("quick.conf")).unwrap();
    assert_eq!(quick.experiment.synth.sessions, 1200);
}
