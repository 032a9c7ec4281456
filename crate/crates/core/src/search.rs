//! Asynchronous regularized evolution and random search, plus trajectory
//! and high-performer analytics over evaluation logs.
//!
//! A single controller owns the population and the RNG; workers only run
//! evaluations. Completions are handled in arrival order, so with one worker
//! the whole search is a pure function of the seed.

use std::collections::{HashMap, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, RecvTimeoutError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};
use crate::search_space::{ArchitectureVector, ChoiceTable};
use crate::trainer::{Evaluation, EvaluationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Re,
    Rs,
}

impl FromStr for Strategy {
    type Err = NasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "re" => Ok(Strategy::Re),
            "rs" => Ok(Strategy::Rs),
            _ => Err(NasError::Unknown {
                kind: "strategy",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population_size: usize,
    pub sample_size: usize,
    pub workers: usize,
    /// Wall-clock limit in seconds; evaluations still running at the limit
    /// are cancelled and dropped.
    pub wall_clock_s: Option<f64>,
    /// Stop after this many completed evaluations.
    pub max_evals: Option<usize>,
    pub seed: u64,
    pub strategy: Strategy,
    /// Reuse the result of an already evaluated vector instead of training
    /// it again.
    pub memoize: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 100,
            sample_size: 10,
            workers: 1,
            wall_clock_s: Some(600.0),
            max_evals: None,
            seed: 0,
            strategy: Strategy::Re,
            memoize: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 || self.sample_size == 0 || self.sample_size > self.population_size {
            return Err(NasError::Config(format!(
                "need 1 <= S <= P, got S = {}, P = {}",
                self.sample_size, self.population_size
            )));
        }
        if self.workers == 0 {
            return Err(NasError::Config("workers must be >= 1".into()));
        }
        if self.wall_clock_s.is_none() && self.max_evals.is_none() {
            return Err(NasError::Config("set wall_clock_s or max_evals".into()));
        }
        if self.wall_clock_s.is_some_and(|w| !(w > 0.0)) {
            return Err(NasError::Config("wall_clock_s must be positive".into()));
        }
        Ok(())
    }
}

/// Per-evaluation inputs supplied by the controller.
pub struct EvalContext<'a> {
    pub seed: u64,
    /// Raised when the search stops; long evaluations should poll it and
    /// return [`NasError::Cancelled`].
    pub cancel: &'a AtomicBool,
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, p: &ArchitectureVector, ctx: &EvalContext) -> Result<Evaluation>;
}

impl<F> Evaluator for F
where
    F: Fn(&ArchitectureVector, &EvalContext) -> Result<Evaluation> + Send + Sync,
{
    fn evaluate(&self, p: &ArchitectureVector, ctx: &EvalContext) -> Result<Evaluation> {
        self(p, ctx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub p: ArchitectureVector,
    pub reward: f64,
    /// Insertion counter; lower is older.
    pub age: u64,
}

/// FIFO population: inserting at capacity evicts the oldest member.
#[derive(Debug, Clone)]
pub struct Population {
    capacity: usize,
    members: VecDeque<Member>,
    next_age: u64,
}

impl Population {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "population capacity must be positive");
        Self {
            capacity,
            members: VecDeque::with_capacity(capacity),
            next_age: 0,
        }
    }

    pub fn insert(&mut self, p: ArchitectureVector, reward: f64) {
        if self.members.len() == self.capacity {
            self.members.pop_front();
        }
        self.members.push_back(Member {
            p,
            reward,
            age: self.next_age,
        });
        self.next_age += 1;
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.members.iter()
    }

    /// Tournament: `s` uniform draws with replacement; the highest reward
    /// wins, the oldest among equals.
    pub fn select_parent<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Option<&Member> {
        if self.members.is_empty() {
            return None;
        }
        let mut best: Option<&Member> = None;
        for _ in 0..s.max(1) {
            let m = &self.members[rng.gen_range(0..self.members.len())];
            best = match best {
                Some(b) if b.reward > m.reward || (b.reward == m.reward && b.age <= m.age) => Some(b),
                _ => Some(m),
            };
        }
        best
    }
}

/// Seed for the evaluation submitted `index`-th (SplitMix64 finalizer).
pub fn evaluation_seed(search_seed: u64, index: u64) -> u64 {
    let mut z = search_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Job {
    p: ArchitectureVector,
    seed: u64,
    t_submit: f64,
}

struct Done {
    job: Job,
    t_start: f64,
    t_finish: f64,
    outcome: std::result::Result<Evaluation, Option<String>>,
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "evaluator panicked".into())
}

/// Runs the search and returns every finished evaluation in completion
/// order. `on_record` sees each record as soon as it is logged.
pub fn run_search<E: Evaluator + ?Sized>(
    cfg: &SearchConfig,
    table: &ChoiceTable,
    evaluator: &E,
    mut on_record: impl FnMut(&EvaluationRecord) -> Result<()>,
) -> Result<Vec<EvaluationRecord>> {
    cfg.validate()?;
    let start = Instant::now();
    let deadline = cfg.wall_clock_s.map(|s| start + Duration::from_secs_f64(s));
    let cancel = AtomicBool::new(false);
    let (job_tx, job_rx) = unbounded::<Job>();
    let (done_tx, done_rx) = unbounded::<Done>();
    let elapsed = || start.elapsed().as_secs_f64();

    thread::scope(|scope| {
        for _ in 0..cfg.workers {
            let job_rx = job_rx.clone();
            let done_tx = done_tx.clone();
            let cancel = &cancel;
            scope.spawn(move || {
                for job in job_rx.iter() {
                    if cancel.load(Ordering::Relaxed) {
                        break;
                    }
                    let t_start = elapsed();
                    let ctx = EvalContext {
                        seed: job.seed,
                        cancel,
                    };
                    let outcome = match catch_unwind(AssertUnwindSafe(|| evaluator.evaluate(&job.p, &ctx))) {
                        Ok(Ok(e)) => Ok(e),
                        Ok(Err(NasError::Cancelled)) => Err(None),
                        Ok(Err(e)) => Ok(Evaluation::failed(e.to_string())),
                        Err(panic) => Ok(Evaluation::failed(panic_message(panic.as_ref()))),
                    };
                    let done = Done {
                        job,
                        t_start,
                        t_finish: elapsed(),
                        outcome,
                    };
                    if done_tx.send(done).is_err() {
                        break;
                    }
                }
            });
        }
        drop(done_tx);

        let mut ctl = Controller {
            cfg,
            table,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            population: Population::new(cfg.population_size),
            submitted: 0,
            cache: HashMap::new(),
            ready: VecDeque::new(),
        };
        let mut log = Vec::new();
        let mut in_flight = 0usize;
        let limit = cfg.max_evals.unwrap_or(usize::MAX);

        let submit = |ctl: &mut Controller, in_flight: &mut usize| {
            let job = ctl.next_job(elapsed());
            match ctl.cached(&job) {
                Some(done) => ctl.ready.push_back(done),
                None => {
                    job_tx.send(job).expect("workers outlive the controller");
                    *in_flight += 1;
                }
            }
        };
        for _ in 0..cfg.workers.min(limit) {
            submit(&mut ctl, &mut in_flight);
        }

        let result: Result<()> = loop {
            if log.len() >= limit || in_flight + ctl.ready.len() == 0 {
                break Ok(());
            }
            let done = if let Some(d) = ctl.ready.pop_front() {
                d
            } else {
                let got = match deadline {
                    Some(dl) => done_rx.recv_timeout(dl.saturating_duration_since(Instant::now())),
                    None => done_rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                };
                match got {
                    Ok(d) => {
                        in_flight -= 1;
                        d
                    }
                    Err(RecvTimeoutError::Timeout) => break Ok(()),
                    Err(RecvTimeoutError::Disconnected) => {
                        break Err(NasError::Config("all search workers exited".into()))
                    }
                }
            };
            if deadline.is_some_and(|dl| Instant::now() >= dl) {
                break Ok(());
            }
            let Ok(eval) = done.outcome else {
                continue;
            };
            if cfg.memoize {
                ctl.cache.entry(done.job.p.clone()).or_insert_with(|| eval.clone());
            }
            let rec = EvaluationRecord::new(
                done.job.p.clone(),
                eval,
                [done.job.t_submit, done.t_start, done.t_finish],
                done.job.seed,
            );
            if let Err(e) = on_record(&rec) {
                break Err(e);
            }
            // parent selection sees the population before this completion
            // is inserted
            if ctl.submitted < limit {
                submit(&mut ctl, &mut in_flight);
            }
            ctl.population.insert(rec.p.clone(), rec.reward);
            log.push(rec);
        };
        cancel.store(true, Ordering::Relaxed);
        drop(job_tx);
        result.map(|_| log)
    })
}

struct Controller<'a> {
    cfg: &'a SearchConfig,
    table: &'a ChoiceTable,
    rng: ChaCha8Rng,
    population: Population,
    submitted: usize,
    cache: HashMap<ArchitectureVector, Evaluation>,
    ready: VecDeque<Done>,
}

impl Controller<'_> {
    fn next_job(&mut self, now: f64) -> Job {
        let p = match self.cfg.strategy {
            Strategy::Rs => self.table.sample_uniform(&mut self.rng),
            Strategy::Re if self.submitted < self.cfg.population_size => self.table.sample_uniform(&mut self.rng),
            Strategy::Re => match self.population.select_parent(self.cfg.sample_size, &mut self.rng) {
                Some(parent) => {
                    let parent = parent.p.clone();
                    self.table.mutate(&parent, &mut self.rng)
                }
                None => self.table.sample_uniform(&mut self.rng),
            },
        };
        let seed = evaluation_seed(self.cfg.seed, self.submitted as u64);
        self.submitted += 1;
        Job { p, seed, t_submit: now }
    }

    fn cached(&self, job: &Job) -> Option<Done> {
        let eval = self.cache.get(&job.p)?.clone();
        Some(Done {
            job: Job {
                p: job.p.clone(),
                seed: job.seed,
                t_submit: job.t_submit,
            },
            t_start: job.t_submit,
            t_finish: job.t_submit,
            outcome: Ok(eval),
        })
    }
}

/// Successful records in finish order.
fn finished(log: &[EvaluationRecord]) -> Vec<&EvaluationRecord> {
    let mut v: Vec<&EvaluationRecord> = log.iter().filter(|r| r.is_ok()).collect();
    v.sort_by(|a, b| a.t_finish.total_cmp(&b.t_finish));
    v
}

/// Running mean of the last `window` rewards, one point per finished
/// evaluation, stamped with its finish time. Failed records are skipped.
pub fn trajectory(log: &[EvaluationRecord], window: usize) -> Vec<(f64, f64)> {
    let recs = finished(log);
    let rewards: Vec<f64> = recs.iter().map(|r| r.reward).collect();
    let window = window.max(1);
    // summed afresh per point so results do not drift over long logs
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            let lo = (i + 1).saturating_sub(window);
            (r.t_finish, rewards[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64)
        })
        .collect()
}

/// Cumulative count of distinct vectors whose reward exceeds `threshold`.
pub fn count_high_performers(log: &[EvaluationRecord], threshold: f64) -> Vec<(f64, usize)> {
    let mut seen = HashSet::new();
    finished(log)
        .into_iter()
        .map(|r| {
            if r.reward > threshold {
                seen.insert(&r.p);
            }
            (r.t_finish, seen.len())
        })
        .collect()
}

/// Best reward seen after each record, in log order.
pub fn running_best(log: &[EvaluationRecord]) -> Vec<f64> {
    log.iter()
        .scan(f64::NEG_INFINITY, |best, r| {
            *best = best.max(r.reward);
            Some(*best)
        })
        .collect()
}
