use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slg_autodiff::{
    blob, concat, grad_check, primitive_set, xavier_init, AdamConfig, AdamState, Graph,
    ParamStore, Tensor, TensorError,
};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn every_primitive_passes_grad_check_at_20_points() {
    for p in primitive_set() {
        for seed in 0..20 {
            let err = (p.check)(seed).unwrap();
            assert!(err < 1e-4, "{} seed {seed}: rel err {err:e}", p.name);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn(&[7, 11], |_| rng.random_range(-20.0..20.0)));
    let y = x.softmax().value();
    for r in 0..7 {
        let s: f32 = y.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
    }
}

#[test]
fn layer_norm_rows_are_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[5, 32], |_| rng.random_range(-3.0..3.0)));
    let y = x.layer_norm(1e-5).value();
    for r in 0..5 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4, "variance {var}");
    }
}

#[test]
fn matmul_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 4]));
    assert_eq!(a.matmul(&b).unwrap().shape(), vec![2, 4]);
    let c = g.constant(Tensor::zeros(&[4, 5]));
    match a.matmul(&c) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn gradient_of_sum_is_ones() {
    let g = Graph::<f64>::new();
    let w = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
    let grads = g.backward(w.sum()).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[1.0; 6]);
}

#[test]
fn squared_error_scalar_gradient_is_six() {
    // L = (w x - y)^2 at w=2, x=3, y=5: dL/dw = 2 (6 - 5) 3 = 6.
    let g = Graph::<f64>::new();
    let w = g.leaf(Tensor::scalar(2.0));
    let x = g.constant(Tensor::scalar(3.0));
    let y = g.constant(Tensor::scalar(5.0));
    let r = w.mul(&x).unwrap().sub(&y).unwrap();
    let loss = r.mul(&r).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().item(), 6.0);
    assert!(grads.get(x).is_none(), "constants carry no gradient");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let g = Graph::<f64>::new();
    let w = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mut store = ParamStore::<f64>::new(1);
    let used = store.xavier("used", 2, 2).unwrap();
    let unused = store.xavier("unused", 3, 2).unwrap();
    let g = Graph::with_params(&store, false, 0);
    let loss = g.param(used).sum();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(used).data(), &[1.0; 4]);
    assert_eq!(grads.param(unused).data(), &[0.0; 6]);
}

#[test]
fn quadratic_grad_check_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(&[10], |_| rng.random_range(-2.0..2.0));
    let err = grad_check(|_, x| -> slg_autodiff::Result<_> { Ok(x.mul(&x)?.sum()) }, &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn softmax_cross_entropy_composite_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let x = Tensor::from_fn(&[5, 4], |_| rng.random_range(-2.0..2.0));
        let err = grad_check(
            |g, x| {
                let w = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
                x.matmul(&w)?.relu().cross_entropy(&[0, 1, 2, 1, 0])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:e}");
    }
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let x = t(&[2], &[1.0, 2.0]);
    let r = grad_check(|_, x| Ok(x.scale(f64::INFINITY).sum()), &x, 1e-5);
    assert!(matches!(r, Err(TensorError::NonFinite(_))));
}

#[test]
fn xavier_bounds_and_determinism() {
    let bound = (6.0f64 / 8.0).sqrt();
    for seed in 0..50 {
        let w: Tensor<f64> = xavier_init(&[4, 4], seed).unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }
    let a: Tensor<f32> = xavier_init(&[4, 4], 9).unwrap();
    let b: Tensor<f32> = xavier_init(&[4, 4], 9).unwrap();
    assert_eq!(a, b);
    assert!(xavier_init::<f32>(&[4], 1).is_err());
    assert!(xavier_init::<f32>(&[2, 2, 2], 1).is_err());
}

#[test]
fn xavier_empirical_mean_is_near_zero() {
    let w: Tensor<f64> = xavier_init(&[316, 317], 5).unwrap();
    assert!(w.len() >= 100_000);
    let mean = w.sum() / w.len() as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
}

fn one_param_store(v: f64) -> (ParamStore<f64>, slg_autodiff::ParamId) {
    let mut s = ParamStore::new(0);
    let id = s.add("w", Tensor::scalar(v)).unwrap();
    (s, id)
}

#[test]
fn adam_zero_learning_rate_is_identity() {
    let (mut s, id) = one_param_store(0.75);
    let mut adam = AdamState::new(&s, AdamConfig::with_lr(0.0));
    for _ in 0..5 {
        adam.step_with(&mut s, &[Tensor::scalar(3.0)]).unwrap();
    }
    assert_eq!(s.get(id).item(), 0.75);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // m_hat = 1, v_hat = 1, so the update is -lr / (1 + eps).
    let (mut s, id) = one_param_store(0.0);
    let mut adam = AdamState::new(&s, AdamConfig::with_lr(0.1));
    adam.step_with(&mut s, &[Tensor::scalar(1.0)]).unwrap();
    assert!((s.get(id).item() + 0.1).abs() < 1e-9);
}

#[test]
fn adam_minimises_square() {
    let (mut s, id) = one_param_store(1.0);
    let mut adam = AdamState::new(&s, AdamConfig::with_lr(0.01));
    let mut prev = 1.0f64;
    let mut reached = None;
    for step in 0..500 {
        let g = Graph::with_params(&s, false, 0);
        let w = g.param(id);
        let grads = g.backward(w.mul(&w).unwrap()).unwrap();
        adam.step(&mut s, &grads).unwrap();
        let w = s.get(id).item();
        if reached.is_none() {
            assert!(w.abs() < prev, "step {step}: |w| rose from {prev} to {}", w.abs());
            if w.abs() < 0.01 {
                reached = Some(step);
            }
        }
        prev = w.abs();
    }
    assert!(reached.is_some(), "|w| never fell below 0.01");
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let (mut s, id) = one_param_store(1.0);
    let mut adam = AdamState::new(&s, AdamConfig::default());
    let r = adam.step_with(&mut s, &[Tensor::scalar(f64::NAN)]);
    assert!(matches!(r, Err(TensorError::NonFinite(_))));
    assert_eq!(s.get(id).item(), 1.0);
}

#[test]
fn dropout_is_seeded_and_inactive_in_eval() {
    let store = ParamStore::<f32>::new(0);
    let run = |train: bool, seed: u64| {
        let g = Graph::with_params(&store, train, seed);
        let x = g.constant(Tensor::full(&[200], 1.0f32));
        x.dropout(0.5).value()
    };
    assert_eq!(run(true, 3), run(true, 3));
    assert_ne!(run(true, 3), run(true, 4));
    assert_eq!(run(false, 3).data(), &[1.0; 200]);
    let kept = run(true, 3);
    assert!(kept.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn blobs_round_trip_and_detect_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ParamStore::<f32>::new(8);
    s.xavier("a.weight", 3, 5).unwrap();
    s.add("b", Tensor::new(vec![2], vec![f32::MIN_POSITIVE, -0.1]).unwrap())
        .unwrap();
    blob::write_blobs(&s, dir.path()).unwrap();
    let mut loaded = ParamStore::<f32>::new(0);
    loaded.zeros("a.weight", &[3, 5]).unwrap();
    loaded.zeros("b", &[2]).unwrap();
    loaded.load_named(blob::read_blobs(dir.path()).unwrap()).unwrap();
    for ((_, _, x), (_, _, y)) in s.iter().zip(loaded.iter()) {
        let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
    let path = dir.path().join(blob::BLOB_FILE);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        blob::read_blobs(dir.path()),
        Err(TensorError::Format(_))
    ));
}

#[test]
fn concat_and_slice_are_inverse() {
    let g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
    let c = concat(&[a, b], 1).unwrap();
    assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    assert_eq!(c.slice(1, 0, 2).unwrap().value(), a.value());
    assert_eq!(c.slice(1, 2, 1).unwrap().value(), b.value());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The gradient of a sum of losses equals the sum of their gradients.
    #[test]
    fn backward_is_linear(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0));
        let w0 = Tensor::from_fn(&[cols, 3], |_| rng.random_range(-1.0..1.0));

        let grad_of = |which: u8| {
            let g = Graph::<f64>::new();
            let x = g.leaf(x0.clone());
            let w = g.constant(w0.clone());
            let h = x.matmul(&w).unwrap();
            let l1 = h.tanh().sum();
            let l2 = h.softmax().mul(&h).unwrap().mean();
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => l1.add(&l2).unwrap(),
            };
            g.backward(loss).unwrap().get(x).unwrap()
        };
        let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
        for i in 0..g12.len() {
            prop_assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
        let g = Graph::<f64>::new();
        let n = v.len();
        let y = g.constant(Tensor::new(vec![n], v).unwrap()).softmax().value();
        prop_assert!((y.sum() - 1.0).abs() < 1e-6);
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
