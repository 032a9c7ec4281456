#![allow(dead_code)]

use mpnas_core::graph_data::{Edge, GraphRecord};
use mpnas_core::mpnn::CompiledModel;
use mpnas_core::search_space::{CellMenu, ChoiceTable, GatherKind};
use mpnas_core::graph_data::GraphBatch;
use mpnas_tensor::{Tape, Tensor};
use rand::Rng;

/// Connected random graph: a random spanning tree plus extra edges.
pub fn random_record<R: Rng>(rng: &mut R, n: usize, fw: usize, ew: usize, k: usize) -> GraphRecord {
    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |rng: &mut R, a: usize, b: usize, edges: &mut Vec<Edge>| {
        if a != b && seen.insert((a.min(b), a.max(b))) {
            edges.push(Edge {
                src: a,
                dst: b,
                features: (0..ew).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            });
        }
    };
    for v in 1..n {
        let u = rng.gen_range(0..v);
        push(rng, u, v, &mut edges);
    }
    for _ in 0..n / 2 {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        push(rng, a, b, &mut edges);
    }
    GraphRecord {
        node_features: (0..n).map(|_| (0..fw).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        edges,
        targets: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

pub fn random_perm<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

/// Default table restricted to state dimensions {4, 8}.
pub fn small_table() -> ChoiceTable {
    ChoiceTable::stacked(
        CellMenu {
            dims: vec![4, 8],
            ..CellMenu::default()
        },
        GatherKind::DEFAULT_SET.to_vec(),
    )
}

/// Scalar loss: fixed random projection of the model output.
fn projected(model: &CompiledModel, tape: &mut Tape, batch: &GraphBatch, proj: &Tensor) -> f64 {
    let out = model.forward(tape, batch).unwrap();
    let w = tape.constant(proj.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod);
    tape.value(loss).data()[0]
}

pub struct FdReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

/// Central-difference step. ReLU-family activations and max reductions
/// make the loss piecewise smooth, and a step straddling a kink measures
/// neither one-sided slope; 1e-6 keeps that rare while rounding error
/// (about 1e-10 here) stays far below the absolute floor.
pub const FD_STEP: f64 = 1e-6;

/// Compares every parameter gradient with central differences.
pub fn finite_difference_check(model: &CompiledModel, batch: &GraphBatch, proj: &Tensor, step: f64, rel_tol: f64, abs_floor: f64) -> FdReport {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch).unwrap();
    let w = tape.constant(proj.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss).unwrap();

    let mut work = model.clone();
    let mut report = FdReport {
        checked: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let zeros = Tensor::zeros(model.params.get(id).shape());
        let analytic = grads.get(id).unwrap_or(&zeros).clone();
        for k in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[k];
            work.params.get_mut(id).data_mut()[k] = orig + step;
            let plus = projected(&work, &mut Tape::inference(), batch, proj);
            work.params.get_mut(id).data_mut()[k] = orig - step;
            let minus = projected(&work, &mut Tape::inference(), batch, proj);
            work.params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[k];
            let diff = (a - numeric).abs();
            report.checked += 1;
            if diff > abs_floor {
                let rel = diff / a.abs().max(numeric.abs());
                report.worst_rel = report.worst_rel.max(rel);
                if rel > rel_tol {
                    report.failures.push(format!(
                        "{}[{k}]: analytic {a:e} numeric {numeric:e}",
                        model.params.name(id)
                    ));
                }
            }
        }
    }
    report
}


pub fn ok_eval(reward: f64) -> mpnas_core::trainer::Evaluation {
    mpnas_core::trainer::Evaluation {
        reward,
        metrics: vec![-reward],
        train_losses: Vec::new(),
        valid_losses: Vec::new(),
        steps: 0,
        status: mpnas_core::trainer::Status::Ok,
        error: None,
    }
}

/// Timing-free view of a record, for reproducibility checks.
pub fn strip_times(r: &mpnas_core::trainer::EvaluationRecord) -> mpnas_core::trainer::EvaluationRecord {
    let mut r = r.clone();
    r.t_submit = 0.0;
    r.t_start = 0.0;
    r.t_finish = 0.0;
    r
}

/// Reference running mean, recomputed window by window.
pub fn direct_trajectory(rewards: &[f64], window: usize) -> Vec<f64> {
    (0..rewards.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            rewards[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
