use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use pulsar::gradsuite::{run_suite, TOLERANCE};
use pulsar::numeric::gradcheck::{check, project, CheckOptions};
use pulsar::numeric::{AdamConfig, AdamState, BnAxes, BnMode, OpKind, Tape, Tensor};
use pulsar::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_by_identity_is_noop() {
    let mut tape = Tape::<f64>::new(0);
    let i = tape.constant(Tensor::eye(2));
    let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]));
    let y = tape.matmul(i, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn relu_values() {
    let mut tape = Tape::<f64>::new(0);
    let x = tape.constant(t(&[2], &[-1.0, 2.5]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.5]);
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut tape = Tape::<f64>::new(0);
    let x = tape.constant(Tensor::full([1, 21], 0.3));
    let y = tape.softmax(x, 1).unwrap();
    for &v in tape.value(y).data() {
        assert_abs_diff_eq!(v, 1.0 / 21.0, epsilon = 1e-15);
    }
}

#[test]
fn product_gradient() {
    let mut tape = Tape::<f64>::new(0);
    let w = tape.param(Tensor::scalar(2.0));
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(w, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(w).unwrap().item(), 3.0);
    assert_eq!(g.wrt(x).unwrap().item(), 2.0);
}

#[test]
fn dead_relu_has_zero_gradient() {
    let mut tape = Tape::<f64>::new(0);
    let w = tape.param(Tensor::scalar(-1.0));
    let y = tape.relu(w).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(w).unwrap().item(), 0.0);
}

#[test]
fn off_path_parameters_get_zero_gradient() {
    let mut tape = Tape::<f64>::new(0);
    let a = tape.param(Tensor::full([2, 2], 1.5));
    let unused = tape.param(Tensor::full([3], 4.0));
    let s = tape.sum(a).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), &[1.0; 4]);
    assert_eq!(g.wrt(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut tape = Tape::<f64>::new(0);
    let a = tape.param(Tensor::full([2, 2], 1.0));
    let b = tape.relu(a).unwrap();
    assert!(matches!(tape.backward(b), Err(Error::NotScalar(s)) if s == vec![2, 2]));
    let s = tape.sum(b).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut tape = Tape::<f64>::new(0);
    let a = tape.param(Tensor::zeros([2, 3]));
    let b = tape.param(Tensor::zeros([3, 2]));
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    let err = tape.matmul(a, a).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
    let x = tape.param(Tensor::zeros([1, 2, 5, 3]));
    let w = tape.param(Tensor::zeros([2, 2, 2]));
    assert!(tape.temporal_conv(x, w, None).is_err(), "even kernel must be rejected");
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::<f64>::new(0);
    let a = tape.param(Tensor::full([2], 1e300));
    let err = tape.mul(a, a).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "mul" }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn dropout_probability_range() {
    let mut tape = Tape::<f64>::new(0);
    let a = tape.param(Tensor::ones([4]));
    assert!(tape.dropout(a, 1.0, true).is_err());
    assert!(tape.dropout(a, -0.1, true).is_err());
    assert_eq!(tape.dropout(a, 0.5, false).unwrap(), a);
}

#[test]
fn tape_records_only_differentiable_paths() {
    let mut tape = Tape::<f64>::new(0);
    let c = tape.constant(Tensor::ones([3]));
    let _ = tape.relu(c).unwrap();
    assert!(tape.recorded_kinds().is_empty());
    let p = tape.param(Tensor::ones([3]));
    let y = tape.add(c, p).unwrap();
    let _ = tape.sum(y).unwrap();
    assert_eq!(tape.recorded_kinds(), vec![OpKind::Add, OpKind::Sum]);
}

#[test]
fn temporal_conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, ci, co, tt, v, kt) = (2, 3, 2, 7, 4, 5);
    let x = Tensor::<f64>::uniform([n, ci, tt, v], 1.0, &mut rng);
    let w = Tensor::<f64>::uniform([co, ci, kt], 1.0, &mut rng);
    let mut tape = Tape::<f64>::new(0);
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.temporal_conv(xv, wv, None).unwrap();
    let half = (kt / 2) as isize;
    for s in 0..n {
        for o in 0..co {
            for f in 0..tt {
                for j in 0..v {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for k in 0..kt {
                            let src = f as isize + k as isize - half;
                            if (0..tt as isize).contains(&src) {
                                acc += w.data()[(o * ci + c) * kt + k] * x.at4(s, c, src as usize, j);
                            }
                        }
                    }
                    assert_abs_diff_eq!(tape.value(y).at4(s, o, f, j), acc, epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn graph_aggregate_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::uniform([2, 2, 3, 5], 1.0, &mut rng);
    let a = Tensor::<f64>::uniform([5, 5], 1.0, &mut rng);
    let mut tape = Tape::<f64>::new(0);
    let (xv, av) = (tape.constant(x.clone()), tape.constant(a.clone()));
    let y = tape.graph_aggregate(xv, av).unwrap();
    for s in 0..2 {
        for c in 0..2 {
            for f in 0..3 {
                for w in 0..5 {
                    let want: f64 = (0..5).map(|v| a.data()[w * 5 + v] * x.at4(s, c, f, v)).sum();
                    assert_abs_diff_eq!(tape.value(y).at4(s, c, f, w), want, epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn batch_norm_train_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::uniform([6, 3, 10, 4], 5.0, &mut rng).map(|v| 2.0 + v);
    for axes in [BnAxes::Channel, BnAxes::ChannelVertex] {
        let nf = axes.feature_count(3, 4);
        let shape = if axes == BnAxes::Channel { vec![3] } else { vec![3, 4] };
        let mut tape = Tape::<f64>::new(0);
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::ones(shape.clone()));
        let b = tape.constant(Tensor::zeros(shape));
        let (y, stats) = tape.batch_norm(xv, g, b, axes, BnMode::Train { eps: 0.0 }).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean.len(), nf);
        let y = tape.value(y);
        let mut sums = vec![(0.0, 0.0, 0usize); nf];
        for s in 0..6 {
            for c in 0..3 {
                for f in 0..10 {
                    for v in 0..4 {
                        let feat = if axes == BnAxes::Channel { c } else { c * 4 + v };
                        let h = y.at4(s, c, f, v);
                        sums[feat].0 += h;
                        sums[feat].1 += h * h;
                        sums[feat].2 += 1;
                    }
                }
            }
        }
        for (sum, sq, n) in sums {
            let mean = sum / n as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((sq / n as f64 - mean * mean - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn batch_norm_eval_is_affine() {
    let mean = [0.5, -1.0];
    let var = [4.0, 0.25];
    let mut tape = Tape::<f64>::new(0);
    let x = tape.constant(t(&[1, 2, 1, 2], &[1.5, 2.5, 0.0, -1.0]));
    let g = tape.constant(t(&[2], &[2.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.1, -0.2]));
    let mode = BnMode::Eval { mean: &mean, var: &var, eps: 0.0 };
    let (y, stats) = tape.batch_norm(x, g, b, BnAxes::Channel, mode).unwrap();
    assert!(stats.is_none());
    let want = [2.0 * 0.5 + 0.1, 2.0 * 1.0 + 0.1, 2.0 - 0.2, 0.0 - 0.2];
    for (a, w) in tape.value(y).data().iter().zip(want) {
        assert_abs_diff_eq!(*a, w, epsilon = 1e-12);
    }
}

#[test]
fn dropout_is_unbiased() {
    let p = 0.5;
    let n = 100_000;
    let mut tape = Tape::<f64>::new(11);
    let x = tape.param(Tensor::full([n], 1.0));
    let y = tape.dropout(x, p, true).unwrap();
    let mean = tape.value(y).sum() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    let dropped = tape.value(y).data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
    assert!((dropped - p).abs() < 0.01);
}

#[test]
fn dropout_masks_follow_the_seed() {
    let run = |seed| {
        let mut tape = Tape::<f64>::new(seed);
        let x = tape.param(Tensor::ones([64]));
        let y = tape.dropout(x, 0.3, true).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn gradient_suite_passes_over_ten_seeds() {
    for seed in 0..10 {
        let report = run_suite(seed, None).unwrap();
        for c in &report.cases {
            assert!(c.max_rel_err < TOLERANCE, "seed {seed}: {} rel err {:e}", c.name, c.max_rel_err);
        }
    }
}

#[test]
fn gradient_suite_is_reproducible() {
    assert_eq!(run_suite(42, None).unwrap(), run_suite(42, None).unwrap());
}

#[test]
fn injected_adjoint_fault_is_caught() {
    for kind in [OpKind::Relu, OpKind::TemporalConv, OpKind::Softmax, OpKind::BatchNorm] {
        let report = run_suite(1, Some(kind)).unwrap();
        assert!(!report.passed());
        assert!(report.failures().iter().any(|f| f.starts_with(kind.name())), "{kind:?}: {:?}", report.failures());
    }
}

#[test]
fn adam_first_step() {
    let cfg = AdamConfig { lr: 0.001, ..AdamConfig::default() };
    let mut p = Tensor::<f64>::zeros([3]);
    let g = Tensor::<f64>::ones([3]);
    let mut state = AdamState::new(cfg, [p.shape()]).unwrap();
    state.step(&mut [&mut p], &[&g]).unwrap();
    for &v in p.data() {
        assert_abs_diff_eq!(v, -0.001, epsilon = 1e-9);
    }
    assert_eq!(state.step_count(), 1);
}

fn small_tensor() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::new([r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in small_tensor(), axis in 0usize..2) {
        let mut tape = Tape::<f64>::new(0);
        let v = tape.constant(x.map(|a| 10.0 * a));
        let y = tape.softmax(v, axis).unwrap();
        let y = tape.value(y);
        let (r, c) = (x.shape()[0], x.shape()[1]);
        prop_assert!(y.data().iter().all(|&p| p >= 0.0));
        if axis == 1 {
            for i in 0..r {
                let s: f64 = (0..c).map(|j| y.data()[i * c + j]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        } else {
            for j in 0..c {
                let s: f64 = (0..r).map(|i| y.data()[i * c + j]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_adjoints_match_differences(a in small_tensor(), seed in 0u64..1000) {
        let b = a.map(|v| 0.5 - v);
        let w = a.map(|v| v.sin());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = CheckOptions::default();
        for op in 0..3 {
            let r = check(&[a.clone(), b.clone()], |tape, v| {
                let y = match op { 0 => tape.add(v[0], v[1])?, 1 => tape.sub(v[0], v[1])?, _ => tape.mul(v[0], v[1])? };
                project(tape, y, &w)
            }, &opts, &mut rng).unwrap();
            prop_assert!(r.max_rel_err < 1e-4);
        }
    }

    #[test]
    fn dropout_eval_is_identity(x in small_tensor(), p in 0.0f64..0.95) {
        let mut tape = Tape::<f64>::new(0);
        let v = tape.param(x.clone());
        let y = tape.dropout(v, p, false).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }
}
