mod common;

use common::random_record;
use mpnas_core::graph_data::{
    augment, edge_count, load_dataset, make_synthetic, pad_and_batch, split, write_dataset, BatchDims, SplitSpec,
    SyntheticSpec, SyntheticTask,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augment_is_idempotent(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_record(&mut rng, n, 3, 2, 1);
        let a = augment(&r);
        prop_assert_eq!(a.edges.len(), 2 * r.edges.len() + n);
        prop_assert_eq!(augment(&a), a);
    }

    #[test]
    fn split_partitions_records(n in 10usize..200, seed in any::<u64>()) {
        let ids: Vec<usize> = (0..n).collect();
        let s = split(&ids, &SplitSpec { seed, ratios: [0.8, 0.1, 0.1] }).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, ids);
        prop_assert_eq!(s.train.len(), (0.8 * n as f64).round() as usize);
    }

    #[test]
    fn batches_keep_every_real_node_and_edge(seed in any::<u64>(), bs in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs: Vec<_> = (0..7).map(|i| random_record(&mut rng, 1 + i % 5, 3, 2, 1)).collect();
        let batches = pad_and_batch(&recs, None, bs).unwrap();
        let nodes: f64 = batches.iter().map(|b| b.node_mask.data().iter().sum::<f64>()).sum();
        let edges: f64 = batches.iter().map(|b| b.edge_mask.data().iter().sum::<f64>()).sum();
        prop_assert_eq!(nodes as usize, recs.iter().map(|r| r.num_nodes()).sum::<usize>());
        prop_assert_eq!(edges as usize, recs.iter().map(|r| augment(r).edges.len()).sum::<usize>());
        prop_assert_eq!(batches.len(), recs.len().div_ceil(bs));
    }
}

#[test]
fn dataset_file_round_trip() {
    let data = make_synthetic(&SyntheticSpec::new(SyntheticTask::TriangleCount, 25, 7, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("graphs.jsonl");
    write_dataset(&path, &data).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.records, data.records);
    assert_eq!(back.meta, data.meta);
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let data = make_synthetic(&SyntheticSpec::new(SyntheticTask::EdgeCount, 2, 4, 0)).unwrap();
    write_dataset(&path, &data).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&path, text).unwrap();
    let err = load_dataset(&path).unwrap_err().to_string();
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    assert!(err.contains(&format!(":{lines}:")), "{err}");
}

#[test]
fn edge_count_targets_are_exact() {
    let data = make_synthetic(&SyntheticSpec::new(SyntheticTask::EdgeCount, 50, 10, 9)).unwrap();
    for r in &data.records {
        assert_eq!(r.targets, vec![edge_count(r) as f64]);
        assert!((3..=10).contains(&r.num_nodes()));
    }
    let bd = data.batch_dims();
    assert!(bd.n_max <= 10);
    assert_eq!(pad_and_batch(&data.records, Some(BatchDims { n_max: 2, ..bd }), 8).is_err(), true);
}
