use std::sync::Arc;

use proptest::prelude::*;
use voxgraph_autodiff::{cosine_restart_lr, Checkpoint, ParamStore, RestartMode, Tape, Tensor};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(6, 7)) {
        let tape = Tape::new();
        let y = tape.constant(x.clone()).softmax().unwrap().value();
        let c = x.shape()[1];
        for row in y.data().chunks(c) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_softmax_normalizes_each_segment(
        x in matrix(12, 3),
        seed in prop::collection::vec(0usize..4, 12),
    ) {
        let rows = x.shape()[0];
        let cols = x.shape()[1];
        let segments: Arc<[usize]> = seed[..rows].into();
        let tape = Tape::new();
        let y = tape.constant(x).segment_softmax(segments.clone()).unwrap().value();
        let mut totals = vec![0.0; 4 * cols];
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..cols {
                totals[s * cols + j] += y.data()[e * cols + j];
            }
        }
        for s in 0..4 {
            if segments.contains(&s) {
                for j in 0..cols {
                    prop_assert!((totals[s * cols + j] - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_matches_naive_product(
        (a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, k, m)| (
            prop::collection::vec(-3.0f64..3.0, n * k).prop_map(move |d| Tensor::new(&[n, k], d).unwrap()),
            prop::collection::vec(-3.0f64..3.0, k * m).prop_map(move |d| Tensor::new(&[k, m], d).unwrap()),
        ))
    ) {
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        prop_assert_eq!(c.shape(), &[n, m][..]);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * m + j]).sum();
                prop_assert!((c.data()[i * m + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn double_transpose_is_identity(x in matrix(5, 5)) {
        let tape = Tape::new();
        let y = tape.constant(x.clone()).transpose().unwrap().transpose().unwrap().value();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn gradient_of_sum_is_all_ones(x in matrix(4, 4)) {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let grads = tape.backward(v.sum().unwrap()).unwrap();
        let g = grads.get(v).unwrap();
        prop_assert!(g.data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn checkpoint_file_round_trip_is_exact(
        tensors in prop::collection::vec(matrix(4, 4), 0..5),
        note in "[a-z0-9 ]{0,20}",
    ) {
        let mut params = ParamStore::new();
        for (i, t) in tensors.into_iter().enumerate() {
            params.insert(format!("layer{i}.w"), t);
        }
        let mut ckpt = Checkpoint::new(params);
        ckpt.meta.push(("note".into(), note));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        prop_assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn learning_rate_stays_within_cycle_peak(
        epoch in 0usize..2000,
        t0 in 1usize..200,
        gamma in 0.1f64..1.0,
    ) {
        let base = 3e-5;
        for mode in [RestartMode::Amplitude, RestartMode::Period] {
            let lr = cosine_restart_lr(epoch, base, t0, gamma, mode);
            prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
        }
        let cycle_start = epoch / t0 * t0;
        let peak = cosine_restart_lr(cycle_start, base, t0, gamma, RestartMode::Amplitude);
        prop_assert!((peak - base * gamma.powi((epoch / t0) as i32)).abs() < 1e-18);
    }
}
