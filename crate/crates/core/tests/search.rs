mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use common::{direct_trajectory, ok_eval, small_table, strip_times};
use mpnas_core::search::{
    count_high_performers, run_search, running_best, trajectory, EvalContext, Population, SearchConfig, Strategy,
};
use mpnas_core::search_space::{ArchitectureVector, ChoiceTable};
use mpnas_core::trainer::{Evaluation, EvaluationRecord, Status};
use mpnas_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(p: &ArchitectureVector, ctx: &EvalContext) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let base = -(p.as_slice().iter().map(|&v| (v % 97) as f64).sum::<f64>());
    Ok(ok_eval(base + rng.gen_range(0.0..1.0)))
}

fn rec(p: Vec<usize>, reward: f64, t: f64) -> EvaluationRecord {
    EvaluationRecord::new(ArchitectureVector(p), ok_eval(reward), [t, t, t], 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mutation_changes_exactly_one_coordinate(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for table in [ChoiceTable::default(), ChoiceTable::miniature(), small_table()] {
            let p = table.sample_uniform(&mut rng);
            let c = table.mutate(&p, &mut rng);
            prop_assert_eq!(p.hamming(&c), 1);
            prop_assert!(table.validate(&c).is_ok());
        }
    }

    #[test]
    fn population_never_exceeds_capacity(cap in 1usize..20, inserts in 0usize..60) {
        let mut pop = Population::new(cap);
        for i in 0..inserts {
            pop.insert(ArchitectureVector(vec![i]), -(i as f64));
            prop_assert_eq!(pop.len(), (i + 1).min(cap));
        }
        let ages: Vec<u64> = pop.members().map(|m| m.age).collect();
        let want: Vec<u64> = (inserts.saturating_sub(cap)..inserts).map(|a| a as u64).collect();
        prop_assert_eq!(ages, want);
    }

    #[test]
    fn trajectory_matches_direct_mean(rewards in prop::collection::vec(-5.0f64..0.0, 0..300), window in 1usize..150) {
        let log: Vec<_> = rewards.iter().enumerate().map(|(i, &r)| rec(vec![i], r, i as f64)).collect();
        let got: Vec<f64> = trajectory(&log, window).into_iter().map(|(_, v)| v).collect();
        let want = direct_trajectory(&rewards, window);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn running_best_never_decreases(seed in any::<u64>()) {
        let cfg = SearchConfig {
            population_size: 8,
            sample_size: 3,
            wall_clock_s: None,
            max_evals: Some(40),
            seed,
            ..SearchConfig::default()
        };
        let log = run_search(&cfg, &ChoiceTable::default(), &noisy, |_| Ok(())).unwrap();
        let best = running_best(&log);
        prop_assert!(best.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn sequential_search_is_reproducible() {
    for strategy in [Strategy::Re, Strategy::Rs] {
        let cfg = SearchConfig {
            population_size: 10,
            sample_size: 4,
            wall_clock_s: None,
            max_evals: Some(60),
            seed: 7,
            strategy,
            ..SearchConfig::default()
        };
        let a = run_search(&cfg, &ChoiceTable::default(), &noisy, |_| Ok(())).unwrap();
        let b = run_search(&cfg, &ChoiceTable::default(), &noisy, |_| Ok(())).unwrap();
        let strip = |v: &[EvaluationRecord]| v.iter().map(strip_times).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        let c = run_search(&SearchConfig { seed: 8, ..cfg }, &ChoiceTable::default(), &noisy, |_| Ok(())).unwrap();
        assert_ne!(strip(&a), strip(&c));
    }
}

#[test]
fn parallel_search_completes_budget() {
    let calls = AtomicUsize::new(0);
    let eval = |p: &ArchitectureVector, ctx: &EvalContext| {
        calls.fetch_add(1, Ordering::Relaxed);
        noisy(p, ctx)
    };
    let cfg = SearchConfig {
        population_size: 10,
        sample_size: 3,
        workers: 4,
        wall_clock_s: None,
        max_evals: Some(100),
        ..SearchConfig::default()
    };
    let mut seen = 0;
    let log = run_search(&cfg, &ChoiceTable::default(), &eval, |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(log.len(), 100);
    assert_eq!(seen, 100);
    assert!(calls.load(Ordering::Relaxed) >= 100);
    let mut seeds: Vec<u64> = log.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 100);
}

#[test]
fn regularized_evolution_improves_on_its_seed_phase() {
    let table = ChoiceTable::miniature();
    let target = ArchitectureVector(vec![5, 0, 3, 1, 0, 1, 0, 1, 0, 7]);
    let eval = |p: &ArchitectureVector, _: &EvalContext| Ok(ok_eval(-(p.hamming(&target) as f64)));
    let cfg = SearchConfig {
        population_size: 20,
        sample_size: 10,
        wall_clock_s: None,
        max_evals: Some(300),
        seed: 1,
        ..SearchConfig::default()
    };
    let log = run_search(&cfg, &table, &eval, |_| Ok(())).unwrap();
    let seed_best = log[..20].iter().map(|r| r.reward).fold(f64::MIN, f64::max);
    assert!(*running_best(&log).last().unwrap() > seed_best);
}

#[test]
fn failed_records_do_not_count() {
    let mut log = vec![rec(vec![0], -0.4, 1.0), rec(vec![1], -0.3, 2.0), rec(vec![2], -0.2, 3.0)];
    let mut bad = rec(vec![3], 0.0, 1.5);
    bad.reward = f64::NEG_INFINITY;
    bad.status = Status::Failed;
    log.push(bad);
    let hp: Vec<usize> = count_high_performers(&log, -0.35).into_iter().map(|(_, c)| c).collect();
    assert_eq!(hp, vec![0, 1, 2]);
    assert_eq!(trajectory(&log, 2).len(), 3);
}

#[test]
fn wide_window_ends_at_global_mean() {
    let rewards = [-1.0, -2.0, -4.0, -1.0];
    let log: Vec<_> = rewards.iter().enumerate().map(|(i, &r)| rec(vec![i], r, i as f64)).collect();
    assert_eq!(trajectory(&log, 100).last().unwrap().1, -2.0);
}
