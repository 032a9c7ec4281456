//! Analytic gradients of every primitive against central finite differences.

use std::sync::Arc;

use mpnas_tensor::nn::GruCell;
use mpnas_tensor::{Activation, Index, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-8;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_FLOOR || diff / analytic.abs().max(numeric.abs()) <= REL_TOL
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Projects the primitive output onto fixed random weights so every output
/// coordinate contributes to the scalar.
fn projected_loss(
    store: &ParamStore,
    proj_seed: u64,
    grad: bool,
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> (Tape, Var) {
    let mut tape = if grad { Tape::new() } else { Tape::inference() };
    let inputs: Vec<Var> = store.ids().map(|id| tape.param(store, id)).collect();
    let out = f(&mut tape, &inputs);
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let w = tape.constant(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod);
    (tape, loss)
}

fn check(store: &ParamStore, f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Result<(), TestCaseError> {
    let (mut tape, loss) = projected_loss(store, 99, true, f);
    let grads = tape.backward(loss).unwrap();
    let mut work = store.clone();
    for id in store.ids() {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + STEP;
            let (t, l) = projected_loss(&work, 99, false, f);
            let plus = t.value(l).data()[0];
            work.get_mut(id).data_mut()[k] = orig - STEP;
            let (t, l) = projected_loss(&work, 99, false, f);
            let minus = t.value(l).data()[0];
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[k];
            prop_assert!(
                close(a, numeric),
                "param {} coord {k}: analytic {a} numeric {numeric}",
                store.name(id)
            );
        }
    }
    Ok(())
}

fn store_of(rng: &mut ChaCha8Rng, shapes: &[&[usize]]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        s.add(format!("x{i}"), random_tensor(rng, shape));
    }
    s
}

fn random_segments(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Index {
    Arc::from((0..rows).map(|_| rng.gen_range(0..n)).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grad(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[m, k], &[k, n]]);
        check(&store, &|t, v| t.matmul(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn elementwise_grads(r in 1usize..=16, c in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[r, c], &[r, c]]);
        check(&store, &|t, v| t.add(v[0], v[1]).unwrap())?;
        check(&store, &|t, v| t.sub(v[0], v[1]).unwrap())?;
        check(&store, &|t, v| t.mul(v[0], v[1]).unwrap())?;
        check(&store, &|t, v| t.abs(v[0]))?;
        check(&store, &|t, v| t.square(v[1]))?;
        check(&store, &|t, v| { let s = t.scale(v[0], -1.7); t.add_scalar(s, 0.3) })?;
        check(&store, &|t, v| t.reshape(v[0], &[r * c]).unwrap())?;
    }

    #[test]
    fn broadcast_grads(r in 1usize..=16, c in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[r, c], &[c], &[r, 1]]);
        check(&store, &|t, v| t.add_row(v[0], v[1]).unwrap())?;
        check(&store, &|t, v| t.mul_col(v[0], v[2]).unwrap())?;
    }

    #[test]
    fn activation_grads(r in 1usize..=16, c in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[r, c]]);
        for act in Activation::ALL {
            check(&store, &|t, v| t.activation(v[0], act))?;
        }
    }

    #[test]
    fn concat_and_gather_grads(r in 1usize..=16, c1 in 1usize..=16, c2 in 1usize..=16, e in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[r, c1], &[r, c2]]);
        check(&store, &|t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap())?;
        let idx = random_segments(&mut rng, e, r);
        check(&store, &|t, v| t.gather_rows(v[0], &idx).unwrap())?;
    }

    #[test]
    fn segment_grads(r in 1usize..=16, c in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[r, c]]);
        let seg = random_segments(&mut rng, r, n);
        check(&store, &|t, v| t.segment_sum(v[0], &seg, n).unwrap())?;
        check(&store, &|t, v| t.segment_mean(v[0], &seg, n).unwrap())?;
        check(&store, &|t, v| t.segment_max(v[0], &seg, n).unwrap())?;
        check(&store, &|t, v| t.segment_softmax(v[0], &seg, n).unwrap())?;
    }

    #[test]
    fn row_reduction_grads(r in 1usize..=16, c in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[r, c]]);
        check(&store, &|t, v| t.row_sum(v[0]).unwrap())?;
        check(&store, &|t, v| t.row_mean(v[0]).unwrap())?;
        check(&store, &|t, v| t.row_max(v[0]).unwrap())?;
        check(&store, &|t, v| t.mean_all(v[0]))?;
    }

    #[test]
    fn masked_softmax_grad(r in 1usize..=16, c in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[r, c]]);
        let mask = Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| f64::from(u8::from(rng.gen_bool(0.7)))).collect(),
        ).unwrap();
        check(&store, &|t, v| t.masked_softmax(v[0], &mask).unwrap())?;
    }

    #[test]
    fn batched_matvec_grad(e in 1usize..=16, d in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = store_of(&mut rng, &[&[e, d * d], &[e, d]]);
        check(&store, &|t, v| t.batched_matvec(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn segment_reduction_with_distinct_ids_is_a_permutation(r in 1usize..=16, c in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[r, c]);
        let mut perm: Vec<usize> = (0..r).collect();
        for i in (1..r).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let seg: Index = Arc::from(perm.clone());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        for out in [
            tape.segment_sum(xv, &seg, r).unwrap(),
            tape.segment_mean(xv, &seg, r).unwrap(),
            tape.segment_max(xv, &seg, r).unwrap(),
        ] {
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(tape.value(out).row(p), x.row(i));
            }
        }
    }

    #[test]
    fn masked_softmax_normalizes(r in 1usize..=16, c in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[r, c]);
        let mask_v: Vec<f64> = (0..r * c).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
        let mask = Tensor::new(vec![r, c], mask_v.clone()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.masked_softmax(xv, &mask).unwrap();
        for (row, m) in tape.value(y).data().chunks(c).zip(mask_v.chunks(c)) {
            let mut total = 0.0;
            for (v, k) in row.iter().zip(m) {
                if *k == 0.0 { prop_assert_eq!(*v, 0.0); } else { total += v; }
            }
            if m.iter().any(|k| *k != 0.0) {
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gru_cell_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for width in [1, 3, 6] {
        let mut store = ParamStore::new();
        let h = store.add("h", random_tensor(&mut rng, &[4, width]));
        let x = store.add("x", random_tensor(&mut rng, &[4, width]));
        let gru = GruCell::new(&mut store, "gru", width, &mut rng);
        for id in gru.param_ids() {
            // nonzero biases exercise every term
            let t = random_tensor(&mut rng, store.get(id).shape());
            *store.get_mut(id) = t;
        }
        // every id is already loaded on the tape by `check`, so the layer
        // picks up the perturbed values through the tape's parameter cache
        let f = |t: &mut Tape, v: &[Var]| gru.forward(t, &store, v[h.0], v[x.0]).unwrap();
        check(&store, &f).unwrap();
    }
}
