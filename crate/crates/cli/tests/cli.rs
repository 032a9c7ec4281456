use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mpnas_cli::RunConfig;
use mpnas_core::search_space::{ArchitectureVector, ChoiceTable};
use mpnas_core::trainer::{read_log, write_log, Evaluation, EvaluationRecord, Status};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mpnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpnas")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
out = "run"
space = "miniature"

[data.synthetic]
task = "edge-count"
n_graphs = 40
max_nodes = 6
seed = 1
node_features = 4
edge_features = 2

[search]
population_size = 4
sample_size = 2
max_evals = 6

[train]
epochs = 2
batch_size = 8

[retrain]
epochs = 2
seeds = [0, 1, 2]
batch_size = 8
"#;

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn ok(reward: f64) -> Evaluation {
    Evaluation {
        reward,
        metrics: vec![-reward],
        train_losses: vec![],
        valid_losses: vec![],
        steps: 1,
        status: Status::Ok,
        error: None,
    }
}

fn synthetic_log(table: &ChoiceTable, n: usize, reward: impl Fn(&ArchitectureVector) -> f64) -> Vec<EvaluationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n)
        .map(|i| {
            let p = table.sample_uniform(&mut rng);
            let r = reward(&p);
            EvaluationRecord::new(p, ok(r), [i as f64; 3], i as u64)
        })
        .collect()
}

fn timeless(path: &Path) -> Vec<EvaluationRecord> {
    read_log(path)
        .unwrap()
        .into_iter()
        .map(|mut r| {
            (r.t_submit, r.t_start, r.t_finish) = (0.0, 0.0, 0.0);
            r
        })
        .collect()
}

#[test]
fn search_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let o = mpnas(&["search", "--config", cfg.to_str().unwrap(), "--strategy", "rs", "--budget-s", "60"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("run");
    assert_eq!(read_log(&out.join("log.jsonl")).unwrap().len(), 6);
    for (f, header) in [("trajectory.csv", "time_s,smoothed_reward"), ("high_performers.csv", "time_s,cumulative_count")] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(header));
        for l in lines {
            let cols: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cols.len(), 2);
        }
    }
    let best: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("best.json")).unwrap()).unwrap();
    assert!(best["p"].as_str().unwrap().parse::<ArchitectureVector>().is_ok());

    // the written config describes the same run
    let effective = RunConfig::load(&out.join("config.toml")).unwrap();
    let mut original = RunConfig::load(&cfg).unwrap();
    original.search.strategy = mpnas_core::search::Strategy::Rs;
    original.search.budget_s = 60.0;
    assert_eq!(effective, original);
}

#[test]
fn sequential_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = mpnas(&["search", "--config", cfg, "--workers", "1", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(timeless(&a.join("log.jsonl")), timeless(&b.join("log.jsonl")));
    assert!(a.join("best.json").exists());
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[data]\npath = \"nowhere/graphs.jsonl\"\n");
    let o = mpnas(&["search", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/graphs.jsonl"), "{}", stderr(&o));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{SMALL}\n[report]\nwindow = 0\n"));
    let o = mpnas(&["search", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = mpnas(&["search", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn retrain_reports_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let log = dir.path().join("one.jsonl");
    let p = ArchitectureVector(vec![1, 2, 3, 0, 1, 0, 1, 0, 1, 4]);
    write_log(&log, &[EvaluationRecord::new(p.clone(), ok(-0.4), [0.0; 3], 0)]).unwrap();
    let o = mpnas(&["retrain", "--config", cfg.to_str().unwrap(), "--log", log.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/final_metrics.json")).unwrap()).unwrap();
    assert_eq!(m["champion"].as_str().unwrap(), p.to_string());
    assert_eq!(m["runs"].as_array().unwrap().len(), 3);
    assert!(m["mean"].as_f64().unwrap().is_finite());
    assert!(m["std"].as_f64().unwrap() >= 0.0);
}

#[test]
fn retrain_on_failed_log_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let log = dir.path().join("failed.jsonl");
    let p = ArchitectureVector::zeros(10);
    write_log(&log, &[EvaluationRecord::new(p, Evaluation::failed("diverged"), [0.0; 3], 0)]).unwrap();
    let o = mpnas(&["retrain", "--config", cfg.to_str().unwrap(), "--log", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = mpnas(&["retrain", "--config", cfg.to_str().unwrap(), "--log", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn analyze_writes_every_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let table = ChoiceTable::default();
    let log = dir.path().join("log.jsonl");
    write_log(&log, &synthetic_log(&table, 200, |p| -((p.0.iter().sum::<usize>() % 7) as f64) / 10.0)).unwrap();
    let out = dir.path().join("imp");
    let o = mpnas(&["analyze", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("importance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 126);
    let values: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn analyze_finds_the_rewarded_skip() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    write_log(&log, &synthetic_log(&ChoiceTable::default(), 200, |p| if p.0[3] == 1 { 0.5 } else { 0.0 })).unwrap();
    let out = dir.path().join("imp");
    let o = mpnas(&["analyze", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("importance.txt")).unwrap();
    let first = summary.lines().skip_while(|l| !l.starts_with("top positive")).nth(1).unwrap();
    assert!(first.trim_start().starts_with("skip(input->cell2)"), "{summary}");
}

#[test]
fn analyze_rejects_bad_logs() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let table = ChoiceTable::default();
    write_log(&log, &synthetic_log(&table, 12, |_| -0.3)).unwrap();
    let mut text = fs::read_to_string(&log).unwrap();
    text.push_str("{\"p\": oops}\n");
    fs::write(&log, text).unwrap();
    let o = mpnas(&["analyze", "--log", log.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":13:"), "{}", stderr(&o));

    write_log(&log, &synthetic_log(&table, 9, |_| -0.3)).unwrap();
    let o = mpnas(&["analyze", "--log", log.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn trajectory_command_smooths_rewards() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let table = ChoiceTable::default();
    let recs: Vec<_> = [-0.4, -0.3, -0.2]
        .iter()
        .enumerate()
        .map(|(i, &r)| EvaluationRecord::new(table.sample_uniform(&mut ChaCha8Rng::seed_from_u64(i as u64)), ok(r), [i as f64; 3], 0))
        .collect();
    write_log(&log, &recs).unwrap();
    let o = mpnas(&[
        "trajectory", "--log", log.to_str().unwrap(), "--window", "2", "--threshold", "-0.35", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let smoothed: Vec<f64> = traj.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(smoothed.len(), 3);
    assert!((smoothed[0] + 0.4).abs() < 1e-12 && (smoothed[1] + 0.35).abs() < 1e-12 && (smoothed[2] + 0.25).abs() < 1e-12);
    let hp = fs::read_to_string(dir.path().join("high_performers.csv")).unwrap();
    let counts: Vec<&str> = hp.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(counts, ["0", "1", "2"]);
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/edge_count.toml");
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.search.workers, 4);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}
