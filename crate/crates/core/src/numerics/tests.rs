use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(op(inputs) ⊙ R)` for a fixed random `R` and compares the tape
/// gradient of every input against central differences.
fn check_op<F>(inputs: Vec<Tensor<f64>>, seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>], keep: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj: Vec<f64> = (0..tape.value(out).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let weighted = tape.mul_const(out, proj).unwrap();
        let loss = tape.sum(weighted);
        let value = tape.value(loss).item().unwrap();
        let grads = keep.then(|| {
            let g = tape.backward(loss).unwrap();
            vars.iter()
                .map(|&v| {
                    g.get(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
                })
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let analytic = eval(&inputs, true).1.unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut vals = inputs.clone();
                vals[i] = probe.clone();
                eval(&vals, false).0
            },
            input,
            1e-4,
        );
        worst = worst.max(max_relative_error(&analytic[i], numeric.data()));
    }
    worst
}

#[test]
fn matmul_identity_and_hand_examples() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(Tensor::eye(2));
    let m = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
    assert_eq!(tape.value(c).shape(), &[1, 1]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random(&[5, 4], &mut rng), random(&[4, 3], &mut rng)];
    let err = check_op(inputs, 10, |t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(err <= 1e-6, "matmul rel-err {err:e}");

    let inputs = vec![random(&[5, 4], &mut rng), random(&[3, 4], &mut rng)];
    let err = check_op(inputs, 11, |t, v| t.matmul_t(v[0], v[1]).unwrap());
    assert!(err <= 1e-6, "matmul_t rel-err {err:e}");
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[3], &[0.0, 1.0, -2.0]).unwrap());
    let s = tape.sigmoid(x);
    let g = tape.gelu(x);
    assert_eq!(tape.value(s).data()[0], 0.5);
    // scalar oracle: 1 / (1 + e^-1)
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((tape.value(s).data()[1] - oracle).abs() < 1e-15);
    assert!((oracle - 0.731_058_6).abs() < 1e-7);
    assert_eq!(tape.value(g).data()[0], 0.0);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>)> = vec![
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![a.clone(), row.clone()],
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        ),
        (
            "mul_row",
            vec![a.clone(), row.clone()],
            Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        ),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("gelu", vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
        ("tanh", vec![a.clone()], Box::new(|t, v| t.tanh(v[0]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("softmax_rows", vec![a.clone()], Box::new(|t, v| t.softmax_rows(v[0]))),
    ];
    for (i, (name, inputs, op)) in cases.into_iter().enumerate() {
        let err = check_op(inputs, 100 + i as u64, op);
        assert!(err <= 1e-6, "{name} rel-err {err:e}");
    }
}

#[test]
fn broadcast_is_limited_to_row_vectors() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[3, 4]));
    let col = tape.constant(Tensor::zeros(&[3]));
    let other = tape.constant(Tensor::zeros(&[4, 3]));
    assert!(matches!(tape.add(a, col), Err(Error::Dimension { .. })));
    assert!(matches!(tape.mul(a, other), Err(Error::Dimension { .. })));
    assert!(matches!(tape.sub(a, col), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -5.0]).unwrap());
    let p = tape.softmax_rows(x);
    let p = tape.value(p).data();
    for &v in &p[..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((p[3] - 1.0).abs() < 1e-12 && p[4] < 1e-12 && p[5] < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2, 2], &[3.0, 3.0, 1.0, -1.0]).unwrap());
    let gain = tape.constant(Tensor::full(&[2], 1.0));
    let bias = tape.constant(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert_eq!(&tape.value(y).data()[..2], &[0.0, 0.0]);
    let row = &tape.value(y).data()[2..];
    assert!((row[0] - 1.0).abs() < 1e-10 && (row[1] + 1.0).abs() < 1e-10);
}

#[test]
fn layer_norm_rejects_single_column() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[3, 1]));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.layer_norm(x, g, b, 1e-12), Err(Error::Degenerate { .. })));
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&[4, 8], &mut rng),
        random(&[8], &mut rng),
        random(&[8], &mut rng),
    ];
    let err = check_op(inputs, 12, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-12).unwrap());
    assert!(err <= 1e-5, "layer_norm rel-err {err:e}");
}

#[test]
fn gather_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random(&[5, 3], &mut rng)];
    let err = check_op(inputs, 13, |t, v| t.gather_rows(v[0], vec![4, 0, 4, 2]).unwrap());
    assert!(err <= 1e-6, "gather rel-err {err:e}");

    let inputs = vec![random(&[4, 6], &mut rng)];
    let err = check_op(inputs, 14, |t, v| t.cross_entropy(v[0], vec![0, 5, 2, 2]).unwrap());
    assert!(err <= 1e-6, "cross_entropy rel-err {err:e}");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]));
    let y = tape.sigmoid(x);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_visits_ops_in_reverse_order() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap());
    let a = tape.sigmoid(x);
    let b = tape.gelu(a);
    let c = tape.mul(a, b).unwrap();
    let loss = tape.sum(c);
    let grads = tape.backward(loss).unwrap();
    let order = grads.visit_order();
    assert_eq!(order, &[loss.index(), c.index(), b.index(), a.index()]);
    assert!(grads.get(x).is_some());
    // intermediates are released
    assert!(grads.get(b).is_none());
}

#[test]
fn repeated_param_binding_accumulates_both_uses() {
    let mut tape = Tape::<f64>::new();
    let w = Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap();
    let a = tape.param(7, &w);
    let b = tape.param(7, &w);
    assert_eq!(a, b);
    let p = tape.mul(a, b).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), &[3.0, -4.0]);
    assert_eq!(tape.bindings(), &[(7, a)]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[2], 2.0));
    let k = tape.constant(Tensor::full(&[2], 3.0));
    let p = tape.mul(x, k).unwrap();
    let loss = tape.sum(p);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[3.0, 3.0]);
    assert!(grads.get(k).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_are_positive(
        rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng);
        let x = x.with_shape_of(x.data().iter().map(|v| v * scale).collect());
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let p = tape.softmax_rows(v);
        for row in tape.value(p).data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&q| q > 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..5, d in 2usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, d], &mut rng);
        let x = x.with_shape_of(x.data().iter().map(|v| 3.0 * v + 1.0).collect());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[d], 1.0));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn identity_matmul_is_exact(m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, n], &mut rng);
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::eye(m));
        let av = tape.constant(a.clone());
        let p = tape.matmul(eye, av).unwrap();
        prop_assert_eq!(tape.value(p).max_abs_diff(&a).unwrap(), 0.0);
    }
}
