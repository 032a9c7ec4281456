//! Run configuration and the four subcommands behind the `mpnas` binary.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mpnas_core::graph_data::{load_dataset, make_synthetic, Dataset, SplitSpec, SyntheticSpec};
use mpnas_core::importance::analyze_log;
use mpnas_core::search::{count_high_performers, run_search, trajectory, SearchConfig, Strategy};
use mpnas_core::search_space::ChoiceTable;
use mpnas_core::trainer::{
    read_log, retrain_best, select_champion, EvaluationRecord, LogWriter, RetrainConfig, TrainConfig,
    TrainingEvaluator,
};
use mpnas_core::NasError;
use serde::{Deserialize, Serialize};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_EMPTY: u8 = 3;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl Failure {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_CONFIG, error: e.into() }
    }

    fn empty(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_EMPTY, error: e.into() }
    }

    fn other(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: e.into() }
    }
}

/// Exit code for errors from the core library: bad input is a config
/// error, missing usable results is code 3.
fn classify(e: NasError) -> Failure {
    match e {
        NasError::NoSuccessfulRecords | NasError::NotEnoughRecords { .. } => Failure::empty(e),
        NasError::Io { .. } => Failure::other(e),
        _ => Failure::config(e),
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Default,
    /// Six operations per cell; for quick runs.
    Miniature,
}

impl Space {
    pub fn table(self) -> ChoiceTable {
        match self {
            Space::Default => ChoiceTable::default(),
            Space::Miniature => ChoiceTable::miniature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// Search settings; `budget_s = inf` removes the wall-clock limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub strategy: Strategy,
    pub population_size: usize,
    pub sample_size: usize,
    pub workers: usize,
    pub budget_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_evals: Option<usize>,
    pub seed: u64,
    pub memoize: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            strategy: d.strategy,
            population_size: d.population_size,
            sample_size: d.sample_size,
            workers: d.workers,
            budget_s: d.wall_clock_s.unwrap_or(f64::INFINITY),
            max_evals: d.max_evals,
            seed: d.seed,
            memoize: d.memoize,
        }
    }
}

impl SearchSection {
    pub fn to_config(&self) -> SearchConfig {
        SearchConfig {
            population_size: self.population_size,
            sample_size: self.sample_size,
            workers: self.workers,
            wall_clock_s: self.budget_s.is_finite().then_some(self.budget_s),
            max_evals: self.max_evals,
            seed: self.seed,
            strategy: self.strategy,
            memoize: self.memoize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Running-average window for trajectory.csv.
    pub window: usize,
    /// Reward above which an architecture counts as high-performing.
    pub threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { window: 100, threshold: -0.35 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub trees: usize,
    pub seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self { trees: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub space: Space,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub search: SearchSection,
    pub train: TrainConfig,
    pub retrain: RetrainConfig,
    pub report: ReportConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("mpnas-out"),
            space: Space::Default,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            search: SearchSection::default(),
            train: TrainConfig::default(),
            retrain: RetrainConfig::default(),
            report: ReportConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Reads `path`; relative paths inside are taken from the file's
    /// directory and made absolute.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(Failure::config)?;
        let mut cfg = Self::from_toml(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .map_err(Failure::config)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = base.canonicalize().unwrap_or(base);
        cfg.out = base.join(&cfg.out);
        if let Some(p) = &mut cfg.data.path {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(anyhow!("set only one of data.path and data.synthetic")),
            (None, None) => return Err(anyhow!("set data.path or data.synthetic")),
            _ => {}
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(anyhow!("dataset {} does not exist", p.display()));
            }
        }
        self.search.to_config().validate()?;
        self.train.validate()?;
        if self.report.window == 0 {
            return Err(anyhow!("report.window must be positive"));
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset, Failure> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), _) => load_dataset(p).map_err(|e| match e {
                NasError::Io { .. } | NasError::NoRecords(_) => Failure::config(e),
                e => classify(e),
            }),
            (None, Some(spec)) => make_synthetic(spec).map_err(classify),
            (None, None) => Err(Failure::config(anyhow!("set data.path or data.synthetic"))),
        }
    }
}

/// Command-line overrides of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub budget_s: Option<f64>,
    pub strategy: Option<Strategy>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.search.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.search.workers = w;
        }
        if let Some(b) = self.budget_s {
            cfg.search.budget_s = b;
        }
        if let Some(s) = self.strategy {
            cfg.search.strategy = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(Failure::config)
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::other)
}

fn read_records(path: &Path) -> Result<Vec<EvaluationRecord>, Failure> {
    read_log(path).map_err(Failure::config)
}

pub fn trajectory_csv(log: &[EvaluationRecord], window: usize) -> String {
    let mut s = String::from("time_s,smoothed_reward\n");
    for (t, r) in trajectory(log, window) {
        s.push_str(&format!("{t},{r}\n"));
    }
    s
}

pub fn high_performers_csv(log: &[EvaluationRecord], threshold: f64) -> String {
    let mut s = String::from("time_s,cumulative_count\n");
    for (t, c) in count_high_performers(log, threshold) {
        s.push_str(&format!("{t},{c}\n"));
    }
    s
}

fn write_reports(dir: &Path, log: &[EvaluationRecord], report: &ReportConfig) -> CmdResult {
    write_file(&dir.join("trajectory.csv"), &trajectory_csv(log, report.window))?;
    write_file(&dir.join("high_performers.csv"), &high_performers_csv(log, report.threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub p: mpnas_core::search_space::ArchitectureVector,
    pub reward: f64,
    pub metrics: Vec<f64>,
    pub t_finish: f64,
}

/// Runs the search described by `config` and writes `log.jsonl`,
/// `trajectory.csv`, `high_performers.csv`, `best.json` and the effective
/// `config.toml` into the output directory.
pub fn cmd_search(config: &Path, overrides: &Overrides) -> CmdResult {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate().map_err(Failure::config)?;
    let data = cfg.load_data()?;
    let table = cfg.space.table();
    let evaluator =
        TrainingEvaluator::from_dataset(table.clone(), &data, &cfg.split, cfg.train.clone()).map_err(classify)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.toml"), &cfg.to_toml())?;

    let log_path = cfg.out.join("log.jsonl");
    let mut writer = LogWriter::create(&log_path).map_err(Failure::other)?;
    let mut best = f64::NEG_INFINITY;
    let log = run_search(&cfg.search.to_config(), &table, &evaluator, |r| {
        best = best.max(r.reward);
        eprintln!("{:>8.1}s  {:>12.5}  best {:>10.5}  {}", r.t_finish, r.reward, best, r.p);
        writer.append(r)
    })
    .map_err(classify)?;
    drop(writer);
    write_reports(&cfg.out, &log, &cfg.report)?;

    let champ = select_champion(&log).ok_or_else(|| Failure::empty(anyhow!("search produced no successful evaluation")))?;
    let best = Best {
        p: champ.p.clone(),
        reward: champ.reward,
        metrics: champ.metrics.clone(),
        t_finish: champ.t_finish,
    };
    write_file(&cfg.out.join("best.json"), &serde_json::to_string_pretty(&best).expect("serializes"))?;
    println!("{} evaluations; best reward {} for {}", log.len(), best.reward, best.p);
    Ok(())
}

/// Retrains the champion of `log` and writes `final_metrics.json`.
pub fn cmd_retrain(config: &Path, log: &Path, overrides: &Overrides) -> CmdResult {
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    let records = read_records(log)?;
    if records.is_empty() {
        return Err(Failure::empty(anyhow!("{} has no records", log.display())));
    }
    if select_champion(&records).is_none() {
        return Err(Failure::empty(anyhow!("{} has no successful evaluation", log.display())));
    }
    let data = cfg.load_data()?;
    let report = retrain_best(&records, &cfg.space.table(), &data, &cfg.retrain).map_err(classify)?;
    create_dir(&cfg.out)?;
    write_file(
        &cfg.out.join("final_metrics.json"),
        &serde_json::to_string_pretty(&report).expect("serializes"),
    )?;
    for r in &report.runs {
        println!("seed {}: test {:?} {:.6}", r.seed, report.metric, r.test_metric);
    }
    println!("mean {:.6} +- {:.6}", report.mean, report.std);
    Ok(())
}

/// Fits the importance forest on `log` and writes `importance.csv` and
/// `importance.txt`.
pub fn cmd_analyze(log: &Path, config: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let cfg = match config {
        Some(c) => RunConfig::load(c)?,
        None => RunConfig::default(),
    };
    let out = out.map(Path::to_path_buf).unwrap_or(cfg.out.clone());
    let records = read_records(log)?;
    let rep = analyze_log(&records, &cfg.space.table(), cfg.analyze.trees, cfg.analyze.seed).map_err(classify)?;
    create_dir(&out)?;
    let mut csv = String::from("coordinate_name,importance\n");
    for (name, v) in rep.sorted() {
        csv.push_str(&format!("{name},{v}\n"));
    }
    write_file(&out.join("importance.csv"), &csv)?;
    let summary = rep.summary();
    write_file(&out.join("importance.txt"), &summary)?;
    std::io::stdout().write_all(summary.as_bytes()).map_err(Failure::other)?;
    Ok(())
}

/// Recomputes `trajectory.csv` and `high_performers.csv` from a log.
pub fn cmd_trajectory(log: &Path, window: usize, threshold: f64, out: &Path) -> CmdResult {
    if window == 0 {
        return Err(Failure::config(anyhow!("window must be positive")));
    }
    let records = read_records(log)?;
    create_dir(out)?;
    write_reports(out, &records, &ReportConfig { window, threshold })?;
    if !records.iter().any(EvaluationRecord::is_ok) {
        return Err(Failure::empty(anyhow!("{} has no successful evaluation", log.display())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn documented_defaults_are_prefilled() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.search.population_size, 100);
        assert_eq!(cfg.search.sample_size, 10);
        assert_eq!(cfg.search.budget_s, 600.0);
        assert_eq!(cfg.report.window, 100);
        assert_eq!(cfg.split.ratios, [0.8, 0.1, 0.1]);
        assert_eq!(cfg.retrain.epochs, 200);
        assert_eq!(cfg.analyze.trees, 100);
    }

    #[test]
    fn unlimited_budget_survives_a_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.search.budget_s = f64::INFINITY;
        cfg.search.max_evals = Some(12);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.search.to_config().wall_clock_s, None);
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[search]\npopulation = 3\n").is_err());
    }

    #[test]
    fn data_source_must_be_unique() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        cfg.data.path = Some("/nonexistent/graphs.jsonl".into());
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("/nonexistent/graphs.jsonl"));
    }

    #[test]
    fn csv_headers() {
        assert_eq!(trajectory_csv(&[], 100), "time_s,smoothed_reward\n");
        assert_eq!(high_performers_csv(&[], 0.0), "time_s,cumulative_count\n");
    }
}
