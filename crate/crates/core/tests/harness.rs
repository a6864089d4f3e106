use std::path::Path;
use std::process::Command;

use cocodc_sim::harness::{
    emit, parse_override, run_experiment, ExperimentConfig, OutputFormat, CURVE_HEADER,
};
use cocodc_sim::protocol::Method;
use cocodc_sim::tasks::TaskKind;
use cocodc_sim::Error;

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        methods: Method::ALL.to_vec(),
        seeds: vec![0, 1],
        task: TaskKind::LogisticRegression,
        dimension: 8,
        classes: 3,
        num_layers: 8,
        samples_per_worker: 128,
        validation_samples: 64,
        batch_size: 8,
        total_steps: 300,
        eval_every: 50,
        lr: 0.01,
        threshold: 2.5,
        ..ExperimentConfig::default()
    }
}

#[test]
fn repeated_experiments_are_identical() {
    let cfg = small_config();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|r| !r.failed));
}

#[test]
fn emitted_files_have_the_documented_shape() {
    let cfg = small_config();
    let records = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = emit(dir.path(), "", &cfg, &records, &[OutputFormat::Csv, OutputFormat::Json]).unwrap();
    assert_eq!(written.len(), records.len() + 2);

    let csv = std::fs::read_to_string(dir.path().join("cocodc_seed1.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CURVE_HEADER));
    assert_eq!(CURVE_HEADER, "step,virtual_seconds,val_loss,val_ppl");
    assert_eq!(lines.count(), 7);

    let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let again = serde_json::to_string_pretty(&value).unwrap();
    let reparsed: serde_json::Value = serde_json::from_str(&again).unwrap();
    assert_eq!(value, reparsed);
    assert_eq!(value["runs"].as_array().unwrap().len(), 6);
    assert_eq!(value["methods"].as_array().unwrap().len(), 3);
    let first = &value["runs"][0];
    assert_eq!(first["final_loss"].as_f64(), Some(records[0].summary.final_loss));

    let resolved = std::fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&resolved, &[]).unwrap(), cfg);
}

#[test]
fn cocodc_sync_counts_per_window_sum_to_eight() {
    let mut cfg = small_config();
    cfg.methods = vec![Method::Cocodc];
    cfg.seeds = vec![4];
    cfg.total_steps = 100;
    let records = run_experiment(&cfg).unwrap();
    let counts = &records[0].summary.sync_counts;
    assert_eq!(counts.len(), 4);
    // the eighth sync starts at step 96 and lands at 101, after this run
    assert_eq!(counts.iter().sum::<u64>(), 7);

    cfg.total_steps = 101;
    let records = run_experiment(&cfg).unwrap();
    assert_eq!(records[0].summary.sync_counts.iter().sum::<u64>(), 8);
}

#[test]
fn unreached_threshold_is_not_an_error() {
    let mut cfg = small_config();
    cfg.threshold = 1.0;
    let records = run_experiment(&cfg).unwrap();
    assert!(records.iter().all(|r| r.summary.steps_to_threshold.is_none() && !r.failed));
}

#[test]
fn config_errors_name_the_key() {
    let cases = [
        ("lamda = 0.5\n", "lamda"),
        ("workers = 0\n", "workers"),
        ("alpha = 2.0\n", "alpha"),
        ("methods = [\"diloco\", \"fedavg\"]\n", "methods"),
        ("blocking = true\n", "blocking"),
    ];
    for (text, key) in cases {
        match ExperimentConfig::from_toml_str(text, &[]) {
            Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
            other => panic!("{text}: expected config error, got {other:?}"),
        }
    }
    let bad = parse_override("gamma=abc").unwrap();
    assert!(matches!(
        ExperimentConfig::from_toml_str("", &[bad]),
        Err(Error::Config { ref key, .. }) if key == "gamma"
    ));
}

#[test]
fn sweep_expands_every_combination() {
    let text = r#"
        total_steps = 10
        [sweep]
        lambda = [0.0, 0.5]
        tau = [1, 5, 20]
    "#;
    let cfg = ExperimentConfig::from_toml_str(text, &[]).unwrap();
    let expanded = cfg.expand_sweep().unwrap();
    assert_eq!(expanded.len(), 6);
    assert_eq!(expanded[0].0, "lambda=0.0,tau=1");
    assert_eq!(expanded[5].1.tau, Some(20));
    assert_eq!(expanded[5].1.lambda, 0.5);
    assert!(expanded.iter().all(|(_, c)| c.sweep.is_empty()));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cocodc-sim"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const CLI_CONFIG: &str = r#"
methods = ["streaming_diloco", "cocodc"]
seeds = [0]
dimension = 8
classes = 3
num_layers = 8
samples_per_worker = 64
validation_samples = 32
batch_size = 8
total_steps = 120
threshold = 2.5
"#;

#[test]
fn cli_run_writes_outputs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CLI_CONFIG);
    let out = dir.path().join("out");
    let status = cli()
        .args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "lambda=0.25"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(out.join("cocodc_seed0.csv").exists());
    assert!(out.join("streaming_diloco_seed0.csv").exists());
    let resolved = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("lambda = 0.25"));
}

#[test]
fn cli_compare_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CLI_CONFIG.replace("methods = [\"streaming_diloco\", \"cocodc\"]", "methods = [\"cocodc\"]"));
    let out = dir.path().join("cmp");
    let res = cli()
        .args(["compare", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "0,1", "--no-curves"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 6);
    assert!(!out.join("cocodc_seed0.csv").exists());

    let res = cli().args(["validate", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(res.status.code(), Some(0));
}

#[test]
fn cli_sweep_writes_one_directory_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{CLI_CONFIG}\n[sweep]\nlambda = [0.0, 0.5]\n"));
    let out = dir.path().join("sweep");
    let res = cli()
        .args(["sweep", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("lambda=0.0").join("summary.json").exists());
    assert!(out.join("lambda=0.5").join("summary.json").exists());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{CLI_CONFIG}gama = 0.4\n"));
    let res = cli().args(["validate", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("gama"));

    let missing = dir.path().join("absent.toml");
    let res = cli().args(["run", missing.to_str().unwrap()]).output().unwrap();
    assert_eq!(res.status.code(), Some(2));

    // a learning rate this large overflows and the runs are reported failed
    let cfg = write_config(dir.path(), &format!("{CLI_CONFIG}lr = 1e200\nweight_decay = 0.0\n"));
    let out = dir.path().join("diverged");
    let res = cli()
        .args(["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert!(runs.iter().any(|r| r["failed"] == true && r["failure"].is_string()));
}
