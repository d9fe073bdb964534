use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradient, random_matrix};
use super::*;
use crate::error::Error;

type UnaryOp = fn(&mut Graph, Var) -> Var;

fn weighted_sum(g: &mut Graph, y: Var, w: &Matrix) -> Var {
    let w = g.constant(w.clone());
    let prod = g.mul(y, w).expect("shapes agree");
    g.sum(prod)
}

#[test]
fn identity_times_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random_matrix(&mut rng, 2, 2, 5.0);
    let mut g = Graph::new();
    let i = g.constant(Matrix::identity(2));
    let mv = g.constant(m.clone());
    let out = g.matmul(i, mv).unwrap();
    assert_eq!(g.value(out), &m);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Matrix::zeros(3, 4));
    let b = g.leaf(Matrix::zeros(3, 2));
    match g.matmul(a, b).unwrap_err() {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, (3, 4));
            assert_eq!(rhs, (3, 2));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let a = random_matrix(&mut rng, 3, 4, 1.0);
        let b = random_matrix(&mut rng, 4, 2, 1.0);
        let w = random_matrix(&mut rng, 3, 2, 1.0);
        let report = check_gradient(&[a, b], 1e-5, |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(weighted_sum(g, p, &w))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}

#[test]
fn leaky_relu_and_square_by_hand() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::scalar(-1.0));
    let y = g.leaky_relu(x, 0.1);
    assert!((g.value(y).item() + 0.1).abs() < 1e-15);

    let mut g = Graph::new();
    let x = g.leaf(Matrix::scalar(3.0));
    let y = g.square(x);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).item(), 6.0);
}

#[test]
fn log_clamps_nonpositive_inputs() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::row_vector(&[0.0, -3.0, 1.0]));
    let y = g.log(x);
    assert_eq!(g.value(y).as_slice()[0], LOG_EPS.ln());
    assert_eq!(g.value(y).as_slice()[1], LOG_EPS.ln());
    assert_eq!(g.value(y).as_slice()[2], 0.0);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).as_slice(), &[0.0, 0.0, 1.0]);
}

#[test]
fn unary_ops_pass_finite_difference_checks() {
    let ops: Vec<(&str, UnaryOp, f64, f64)> = vec![
        // name, op, input offset, input scale
        ("scale", |g, x| g.scale(x, -2.5), 0.0, 2.0),
        ("shift", |g, x| g.shift(x, 0.75), 0.0, 2.0),
        ("log", |g, x| g.log(x), 2.0, 1.5),
        ("square", |g, x| g.square(x), 0.0, 2.0),
        ("leaky_relu", |g, x| g.leaky_relu(x, 0.01), 0.0, 2.0),
        ("exp", |g, x| g.exp(x), 0.0, 2.0),
        ("sqrt", |g, x| g.sqrt(x), 2.0, 1.5),
        ("powf", |g, x| g.powf(x, 0.5), 2.0, 1.5),
        ("softmax", |g, x| g.softmax_rows(x), 0.0, 3.0),
        ("log_softmax", |g, x| g.log_softmax_rows(x), 0.0, 3.0),
        ("sum_rows", |g, x| g.sum_rows(x), 0.0, 2.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for (name, op, offset, scale) in ops {
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 3, 4, scale).map(|v| v + offset);
            let probe = g_shape(op, &x);
            let w = random_matrix(&mut rng, probe.0, probe.1, 1.0);
            let report = check_gradient(&[x], 1e-5, |g, v| {
                let y = op(g, v[0]);
                Ok(weighted_sum(g, y, &w))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{name}: {report:?}");
        }
    }
}

fn g_shape(op: UnaryOp, x: &Matrix) -> (usize, usize) {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = op(&mut g, v);
    g.shape(y)
}

#[test]
fn binary_ops_pass_finite_difference_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let rhs_shapes = [(3, 4), (1, 4), (3, 1), (1, 1)];
    for _ in 0..20 {
        for &(r, c) in &rhs_shapes {
            let a = random_matrix(&mut rng, 3, 4, 2.0);
            let b = random_matrix(&mut rng, r, c, 1.0).map(|v| v + 2.0 * v.signum());
            let w = random_matrix(&mut rng, 3, 4, 1.0);
            for name in ["add", "sub", "mul", "div"] {
                let report = check_gradient(&[a.clone(), b.clone()], 1e-5, |g, v| {
                    let y = match name {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        "mul" => g.mul(v[0], v[1])?,
                        _ => g.div(v[0], v[1])?,
                    };
                    Ok(weighted_sum(g, y, &w))
                })
                .unwrap();
                assert!(report.max_rel_err < 1e-4, "{name} {r}x{c}: {report:?}");
            }
        }
    }
}

#[test]
fn reductions_and_structure_ops_pass_finite_difference_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let a = random_matrix(&mut rng, 4, 3, 2.0);
        let b = random_matrix(&mut rng, 4, 2, 2.0);
        let w = random_matrix(&mut rng, 5, 5, 1.0);
        let report = check_gradient(&[a, b], 1e-5, |g, v| {
            let picked = g.select_rows(v[0], &[3, 0, 0, 2, 1])?;
            let picked_b = g.select_rows(v[1], &[1, 1, 2, 0, 3])?;
            let cat = g.concat_cols(&[picked, picked_b])?;
            let y = weighted_sum(g, cat, &w);
            let m = g.mean(v[0]);
            let s = g.add(y, m)?;
            Ok(g.clamp(s, -1e9, 1e9))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}

#[test]
fn mismatched_binary_shapes_are_rejected() {
    let mut g = Graph::new();
    let a = g.leaf(Matrix::zeros(3, 4));
    let b = g.leaf(Matrix::zeros(2, 4));
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    let c = g.leaf(Matrix::zeros(1, 3));
    assert!(matches!(g.mul(a, c), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_uniform_and_stable() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x);
    for &p in g.value(y).as_slice() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.leaf(Matrix::from_rows(&[[1000.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x);
    let p = g.value(y).as_slice();
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] - 1.0).abs() < 1e-15);
    assert!(p[1] < 1e-300);
    let ly = g.log_softmax_rows(x);
    assert!(g.value(ly).is_finite());
    assert_eq!(g.value(ly).as_slice()[0], 0.0);
}

#[test]
fn grad_reverse_forward_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(&mut rng, 4, 3, 1e3);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = g.grad_reverse(xv, GradScale::new(1.0).unwrap());
    assert_eq!(g.value(y), &x);
}

#[test]
fn grad_reverse_negates_and_scales() {
    let upstream = Matrix::row_vector(&[1.5, -2.0, 0.25]);
    for (lambda, expected) in [(1.0, [-1.5, 2.0, -0.25]), (0.0, [0.0, 0.0, 0.0])] {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::row_vector(&[3.0, 4.0, 5.0]));
        let y = g.grad_reverse(x, GradScale::new(lambda).unwrap());
        let out = weighted_sum(&mut g, y, &upstream);
        g.backward(out).unwrap();
        assert_eq!(g.grad(y), &upstream);
        assert_eq!(g.grad(x).as_slice(), &expected);
    }
}

#[test]
fn negative_reversal_multiplier_is_rejected() {
    assert!(GradScale::new(-0.5).is_err());
    assert!(GradScale::new(f64::NAN).is_err());
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::zeros(2, 2));
    let y = g.square(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_and_zero_grad_resets() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::scalar(2.0));
    let y = g.square(x);
    let z = g.scale(y, 3.0);
    g.backward(z).unwrap();
    assert_eq!(g.grad(x).item(), 12.0);
    g.backward(z).unwrap();
    assert_eq!(g.grad(x).item(), 24.0);
    g.zero_grad();
    assert_eq!(g.grad(x).item(), 0.0);
    assert_eq!(g.grad(y).item(), 0.0);
}

#[test]
fn shared_subexpressions_sum_over_paths() {
    // f = x*x + 3x, with x used by three consumers
    let mut g = Graph::new();
    let x = g.leaf(Matrix::scalar(1.5));
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let f = g.add(sq, lin).unwrap();
    g.backward(f).unwrap();
    assert_eq!(g.grad(x).item(), 2.0 * 1.5 + 3.0);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::scalar(2.0));
    let d = g.detach(x);
    let y = g.mul(d, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).item(), 2.0);
}

#[test]
fn powf_zero_exponent_is_constant_one() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::row_vector(&[0.0, 0.5, 2.0]));
    let y = g.powf(x, 0.0);
    assert_eq!(g.value(y).as_slice(), &[1.0, 1.0, 1.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).as_slice(), &[0.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.random_range(0.1..50.0);
        let m = random_matrix(&mut rng, rows, cols, scale);
        let p = softmax(&m);
        for i in 0..rows {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_reverse_jacobian_is_negative_scaled_identity(
        seed in any::<u64>(),
        lambda in 0.0f64..4.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 2, 3, 10.0);
        let up = random_matrix(&mut rng, 2, 3, 10.0);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = g.grad_reverse(xv, GradScale::new(lambda).unwrap());
        prop_assert_eq!(g.value(y), &x);
        let out = weighted_sum(&mut g, y, &up);
        g.backward(out).unwrap();
        for (gx, u) in g.grad(xv).as_slice().iter().zip(up.as_slice()) {
            prop_assert_eq!(*gx, -lambda * u);
        }
    }
}
