//! Training with Adam, MAE/RMSE rewards, the evaluation log, and champion
//! retraining.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use mpnas_tensor::{Adam, AdamConfig, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{io_err, NasError, Result};
use crate::graph_data::{pad_and_batch, split, BatchDims, Dataset, GraphBatch, GraphRecord, SplitSpec};
use crate::mpnn::{CompiledModel, ModelDims};
use crate::search::{EvalContext, Evaluator};
use crate::search_space::{ArchitectureVector, ChoiceTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mae,
    Rmse,
}

impl std::str::FromStr for MetricKind {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(MetricKind::Mae),
            "rmse" => Ok(MetricKind::Rmse),
            _ => Err(NasError::Unknown {
                kind: "metric",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of training batches used, in (0, 1].
    pub train_fraction: f64,
    pub time_budget_s: f64,
    pub metric: MetricKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            train_fraction: 1.0,
            time_budget_s: 600.0,
            metric: MetricKind::Mae,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(NasError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NasError::Config("batch_size must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(NasError::Config(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.time_budget_s > 0.0) {
            return Err(NasError::Config("learning_rate and time_budget_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// Result of training one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Negative validation metric; `-inf` when training failed.
    pub reward: f64,
    /// Validation metric per task.
    pub metrics: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub steps: u64,
    pub status: Status,
    pub error: Option<String>,
}

impl Evaluation {
    pub fn failed(msg: impl Into<String>) -> Self {
        Self {
            reward: f64::NEG_INFINITY,
            metrics: Vec::new(),
            train_losses: Vec::new(),
            valid_losses: Vec::new(),
            steps: 0,
            status: Status::Failed,
            error: Some(msg.into()),
        }
    }
}

/// One line of the evaluation log. Times are seconds since search start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub p: ArchitectureVector,
    #[serde(serialize_with = "ser_reward", deserialize_with = "de_reward")]
    pub reward: f64,
    #[serde(default)]
    pub metrics: Vec<f64>,
    #[serde(default)]
    pub train_losses: Vec<f64>,
    #[serde(default)]
    pub valid_losses: Vec<f64>,
    pub t_submit: f64,
    pub t_start: f64,
    pub t_finish: f64,
    pub seed: u64,
    pub status: Status,
    #[serde(default)]
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn ser_reward<S: Serializer>(r: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if r.is_finite() {
        s.serialize_f64(*r)
    } else {
        s.serialize_none()
    }
}

fn de_reward<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

impl EvaluationRecord {
    pub fn new(p: ArchitectureVector, eval: Evaluation, times: [f64; 3], seed: u64) -> Self {
        Self {
            p,
            reward: eval.reward,
            metrics: eval.metrics,
            train_losses: eval.train_losses,
            valid_losses: eval.valid_losses,
            t_submit: times[0],
            t_start: times[1],
            t_finish: times[2],
            seed,
            status: eval.status,
            steps: eval.steps,
            error: eval.error,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok && self.reward.is_finite()
    }
}

/// Append-only JSON-lines log, flushed after every record.
pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, rec: &EvaluationRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("records always serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(io_err(&self.path))
    }
}

pub fn write_log(path: &Path, records: &[EvaluationRecord]) -> Result<()> {
    let mut w = LogWriter::create(path)?;
    records.iter().try_for_each(|r| w.append(r))
}

/// Reads a log; blank lines are skipped, malformed lines report their
/// 1-based line number.
pub fn read_log(path: &Path) -> Result<Vec<EvaluationRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| NasError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-task metric between `B x K` predictions and targets.
pub fn task_metrics(pred: &Tensor, target: &Tensor, metric: MetricKind) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 || pred.shape()[0] == 0 {
        return Err(NasError::InconsistentWidths(format!(
            "predictions {:?} vs targets {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (b, k) = (pred.shape()[0], pred.shape()[1]);
    let mut acc = vec![0.0; k];
    for (row_p, row_t) in pred.data().chunks(k).zip(target.data().chunks(k)) {
        for j in 0..k {
            let e = row_p[j] - row_t[j];
            acc[j] += match metric {
                MetricKind::Mae => e.abs(),
                MetricKind::Rmse => e * e,
            };
        }
    }
    Ok(acc
        .into_iter()
        .map(|s| match metric {
            MetricKind::Mae => s / b as f64,
            MetricKind::Rmse => (s / b as f64).sqrt(),
        })
        .collect())
}

/// Negative metric: MAE over all entries, or RMSE per task averaged over tasks.
pub fn reward(pred: &Tensor, target: &Tensor, metric: MetricKind) -> Result<f64> {
    let m = task_metrics(pred, target, metric)?;
    Ok(-m.iter().sum::<f64>() / m.len() as f64)
}

/// Per-task affine target scaling fitted on training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(batches: &[GraphBatch]) -> Self {
        let k = batches.first().map_or(0, GraphBatch::num_targets);
        let mut n = 0.0;
        let mut sum = vec![0.0; k];
        for b in batches {
            for row in b.targets.data().chunks(k.max(1)) {
                n += 1.0;
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / f64::max(n, 1.0)).collect();
        let mut var = vec![0.0; k];
        for b in batches {
            for row in b.targets.data().chunks(k.max(1)) {
                for j in 0..k {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / f64::max(n, 1.0)).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn scale(&self, t: &Tensor) -> Tensor {
        self.map(t, |v, m, s| (v - m) / s)
    }

    pub fn unscale(&self, t: &Tensor) -> Tensor {
        self.map(t, |v, m, s| v * s + m)
    }

    fn map(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let k = self.mean.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| f(*v, self.mean[i % k], self.std[i % k]))
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

/// Predictions of `model` in target units over all batches, with targets.
pub fn predict_all(model: &CompiledModel, batches: &[GraphBatch], scaler: &Standardizer) -> Result<(Tensor, Tensor)> {
    let k = model.dims.num_targets;
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for b in batches {
        pred.extend_from_slice(scaler.unscale(&model.predict(b)?).data());
        target.extend_from_slice(b.targets.data());
    }
    let rows = target.len() / k.max(1);
    Ok((Tensor::new(vec![rows, k], pred)?, Tensor::new(vec![rows, k], target)?))
}

fn mean_loss(model: &CompiledModel, batches: &[GraphBatch], scaler: &Standardizer, metric: MetricKind) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for b in batches {
        let pred = model.predict(b)?;
        let y = scaler.scale(&b.targets);
        let per: f64 = pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, t)| match metric {
                MetricKind::Mae => (p - t).abs(),
                MetricKind::Rmse => (p - t).powi(2),
            })
            .sum();
        total += per;
        rows += y.len();
    }
    Ok(total / rows.max(1) as f64)
}

/// Trains `model` in place and scores it on `valid`.
///
/// Returns `Err(Cancelled)` only when `cancel` is raised; divergence and
/// other training failures come back as a failed [`Evaluation`].
pub fn train(
    model: &mut CompiledModel,
    train_batches: &[GraphBatch],
    valid_batches: &[GraphBatch],
    cfg: &TrainConfig,
    cancel: Option<&AtomicBool>,
) -> Result<Evaluation> {
    cfg.validate()?;
    if train_batches.is_empty() || valid_batches.is_empty() {
        return Err(NasError::Config("training and validation batches must be non-empty".into()));
    }
    let start = Instant::now();
    let scaler = Standardizer::fit(train_batches);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_batches.len()).collect();
    order.shuffle(&mut rng);
    let used = ((cfg.train_fraction * order.len() as f64).ceil() as usize).clamp(1, order.len());
    order.truncate(used);
    let scaled: Vec<Tensor> = train_batches.iter().map(|b| scaler.scale(&b.targets)).collect();

    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut tape = Tape::new();
    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut valid_losses = Vec::with_capacity(cfg.epochs);
    let mut out_of_time = false;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for &i in &order {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(NasError::Cancelled);
            }
            let out = model.forward(&mut tape, &train_batches[i])?;
            let y = tape.constant(scaled[i].clone());
            let diff = tape.sub(out, y)?;
            let per = match cfg.metric {
                MetricKind::Mae => tape.abs(diff),
                MetricKind::Rmse => tape.square(diff),
            };
            let loss = tape.mean_all(per);
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            if !lv.is_finite() || !grads.is_finite() {
                return Ok(diverged(train_losses, valid_losses, adam.steps()));
            }
            adam.step(&mut model.params, &grads);
            epoch_loss += lv;
            seen += 1;
            if start.elapsed().as_secs_f64() >= cfg.time_budget_s {
                out_of_time = true;
                train_losses.push(epoch_loss / seen as f64);
                break 'epochs;
            }
        }
        train_losses.push(epoch_loss / seen as f64);
        valid_losses.push(mean_loss(model, valid_batches, &scaler, cfg.metric)?);
    }
    if out_of_time && valid_losses.len() < train_losses.len() {
        valid_losses.push(mean_loss(model, valid_batches, &scaler, cfg.metric)?);
    }
    let (pred, target) = predict_all(model, valid_batches, &scaler)?;
    let metrics = task_metrics(&pred, &target, cfg.metric)?;
    let r = -metrics.iter().sum::<f64>() / metrics.len() as f64;
    if !r.is_finite() {
        return Ok(diverged(train_losses, valid_losses, adam.steps()));
    }
    Ok(Evaluation {
        reward: r,
        metrics,
        train_losses,
        valid_losses,
        steps: adam.steps(),
        status: Status::Ok,
        error: None,
    })
}

fn diverged(train_losses: Vec<f64>, valid_losses: Vec<f64>, steps: u64) -> Evaluation {
    Evaluation {
        train_losses,
        valid_losses,
        steps,
        ..Evaluation::failed("non-finite loss")
    }
}

/// Search-time evaluator: builds `p` and trains it on fixed batches.
pub struct TrainingEvaluator {
    pub table: ChoiceTable,
    pub dims: ModelDims,
    pub train: Vec<GraphBatch>,
    pub valid: Vec<GraphBatch>,
    pub config: TrainConfig,
}

impl TrainingEvaluator {
    /// Splits `data` with `split_spec` and batches train/valid once.
    pub fn from_dataset(table: ChoiceTable, data: &Dataset, split_spec: &SplitSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bd = data.batch_dims();
        let s = split(&data.records, split_spec)?;
        Ok(Self {
            table,
            dims: model_dims(data, bd),
            train: pad_and_batch(&s.train, Some(bd), config.batch_size)?,
            valid: pad_and_batch(&s.valid, Some(bd), config.batch_size)?,
            config,
        })
    }
}

pub fn model_dims(data: &Dataset, bd: BatchDims) -> ModelDims {
    ModelDims {
        node_width: data.node_width,
        edge_width: data.edge_width,
        n_max: bd.n_max,
        num_targets: data.num_targets,
    }
}

impl Evaluator for TrainingEvaluator {
    fn evaluate(&self, p: &ArchitectureVector, ctx: &EvalContext) -> Result<Evaluation> {
        let mut model = crate::mpnn::build(&self.table, p, self.dims, ctx.seed)?;
        let cfg = TrainConfig {
            seed: ctx.seed,
            ..self.config.clone()
        };
        train(&mut model, &self.train, &self.valid, &cfg, Some(ctx.cancel))
    }
}

/// Best successful record: highest reward, earliest finish on ties.
pub fn select_champion(log: &[EvaluationRecord]) -> Option<&EvaluationRecord> {
    log.iter().filter(|r| r.is_ok()).fold(None, |best: Option<&EvaluationRecord>, r| match best {
        Some(b) if b.reward > r.reward || (b.reward == r.reward && b.t_finish <= r.t_finish) => Some(b),
        _ => Some(r),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub time_budget_s: f64,
    pub metric: MetricKind,
    pub ratios: [f64; 3],
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            seeds: vec![0, 1, 2],
            batch_size: 32,
            learning_rate: 1e-3,
            time_budget_s: f64::INFINITY,
            metric: MetricKind::Mae,
            ratios: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainRun {
    pub seed: u64,
    /// Test metric averaged over tasks.
    pub test_metric: f64,
    pub test_metrics: Vec<f64>,
    pub valid_reward: f64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub champion: ArchitectureVector,
    pub search_reward: f64,
    pub metric: MetricKind,
    pub runs: Vec<RetrainRun>,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
}

/// Trains `p` from scratch once per seed, each with its own split, and
/// reports the test metric.
pub fn retrain(table: &ChoiceTable, p: &ArchitectureVector, data: &Dataset, cfg: &RetrainConfig) -> Result<Vec<RetrainRun>> {
    if cfg.seeds.is_empty() {
        return Err(NasError::Config("retraining needs at least one seed".into()));
    }
    let bd = data.batch_dims();
    let dims = model_dims(data, bd);
    cfg.seeds
        .iter()
        .map(|&seed| {
            let s = split(&data.records, &SplitSpec { seed, ratios: cfg.ratios })?;
            let batches = |r: &[GraphRecord]| pad_and_batch(r, Some(bd), cfg.batch_size);
            let (tr, va, te) = (batches(&s.train)?, batches(&s.valid)?, batches(&s.test)?);
            let mut model = crate::mpnn::build(table, p, dims, seed)?;
            let tc = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                train_fraction: 1.0,
                time_budget_s: cfg.time_budget_s,
                metric: cfg.metric,
                seed,
            };
            let eval = train(&mut model, &tr, &va, &tc, None)?;
            if eval.status != Status::Ok {
                return Err(NasError::Config(format!("retraining with seed {seed} diverged")));
            }
            let scaler = Standardizer::fit(&tr);
            let (pred, target) = predict_all(&model, &te, &scaler)?;
            let test_metrics = task_metrics(&pred, &target, cfg.metric)?;
            Ok(RetrainRun {
                seed,
                test_metric: test_metrics.iter().sum::<f64>() / test_metrics.len() as f64,
                test_metrics,
                valid_reward: eval.reward,
                steps: eval.steps,
            })
        })
        .collect()
}

/// Retrains the log's champion and aggregates the test metric.
pub fn retrain_best(log: &[EvaluationRecord], table: &ChoiceTable, data: &Dataset, cfg: &RetrainConfig) -> Result<RetrainReport> {
    let champ = select_champion(log).ok_or(NasError::NoSuccessfulRecords)?;
    let runs = retrain(table, &champ.p, data, cfg)?;
    let (mean, std) = mean_std(runs.iter().map(|r| r.test_metric));
    Ok(RetrainReport {
        champion: champ.p.clone(),
        search_reward: champ.reward,
        metric: cfg.metric,
        runs,
        mean,
        std,
    })
}

pub fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
