//! Tape evaluation and differentiation checks against hand values and
//! central differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon::autodiff::{finite_diff_check, sigmoid, smooth_relu_backward, BackwardMode, NodeId, Tape};
use recon::Tensor;

fn eval_scalar(tape: &Tape, root: NodeId, leaf: NodeId, x: &Tensor) -> f64 {
    tape.eval(&[(leaf, x)], &[root]).unwrap()[0].item()
}

#[test]
fn eval_add_relu_dot_hand_values() {
    // a + b with a = 1, b = 2
    let mut tape = Tape::new();
    let a = tape.leaf(vec![]);
    let b = tape.leaf(vec![]);
    let z = tape.add(a, b);
    let got = tape
        .eval(&[(a, &Tensor::scalar(1.0)), (b, &Tensor::scalar(2.0))], &[z])
        .unwrap()[0]
        .item();
    assert_eq!(got, 3.0);

    // relu(-1.5)
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(-1.5));
    let r = tape.relu(c);
    assert_eq!(tape.eval(&[], &[r]).unwrap()[0].item(), 0.0);

    // <(1,2), (3,4)> = 11
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::from_slice(&[1.0, 2.0]));
    let v = tape.constant(Tensor::from_slice(&[3.0, 4.0]));
    let d = tape.dot(u, v);
    assert_eq!(tape.eval(&[], &[d]).unwrap()[0].item(), 11.0);
}

#[test]
fn eval_errors() {
    let mut tape = Tape::new();
    let a = tape.leaf(vec![2]);
    let s = tape.sum(a);
    // unbound leaf
    assert!(tape.eval(&[], &[s]).is_err());
    // shape mismatch in the binding
    let bad = Tensor::from_slice(&[1.0, 2.0, 3.0]);
    assert!(tape.eval(&[(a, &bad)], &[s]).is_err());
}

#[test]
fn gradient_square_and_relu() {
    // d(x^2)/dx at 3 = 6
    let mut tape = Tape::new();
    let x = tape.leaf(vec![]);
    let z = tape.mul(x, x);
    let g = tape.gradient(z, &[x], BackwardMode::ExactRelu).unwrap()[0];
    assert_eq!(eval_scalar(&tape, g, x, &Tensor::scalar(3.0)), 6.0);

    // relu subgradient away from zero
    let mut tape = Tape::new();
    let x = tape.leaf(vec![]);
    let z = tape.relu(x);
    let g = tape.gradient(z, &[x], BackwardMode::ExactRelu).unwrap()[0];
    assert_eq!(eval_scalar(&tape, g, x, &Tensor::scalar(2.0)), 1.0);
    assert_eq!(eval_scalar(&tape, g, x, &Tensor::scalar(-2.0)), 0.0);

    // smooth backward at 0.1 with alpha 100 is sigmoid(10)
    let mut tape = Tape::new();
    let x = tape.leaf(vec![]);
    let z = tape.relu(x);
    let g = tape.gradient(z, &[x], BackwardMode::SmoothRelu { alpha: 100.0 }).unwrap()[0];
    let got = eval_scalar(&tape, g, x, &Tensor::scalar(0.1));
    assert!((got - 0.9999546).abs() < 1e-7, "sigmoid(10) = {got}");
}

#[test]
fn gradient_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![3]);
    let y = tape.relu(x);
    assert!(tape.gradient(y, &[x], BackwardMode::ExactRelu).is_err());
}

#[test]
fn smooth_relu_backward_values() {
    let z = Tensor::from_slice(&[0.0, 0.1, -5.0]);
    let s10 = smooth_relu_backward(&z, 10.0);
    let s100 = smooth_relu_backward(&z, 100.0);
    assert_eq!(s10.data()[0], 0.5);
    assert!((s100.data()[1] - 0.9999546).abs() < 1e-7);
    let tiny = s10.data()[2]; // sigmoid(-50)
    assert!((tiny - 1.9287498479639178e-22).abs() < 1e-30, "got {tiny:e}");
    // values stay in (0, 1)
    assert!(s10.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn smooth_relu_tends_to_exact() {
    // |sigmoid(alpha z) - 1[z>0]| <= e^{-0.1 alpha} whenever |z| >= 0.1
    for alpha in [10.0f64, 100.0, 500.0] {
        let bound = (-0.1 * alpha).exp();
        let mut z: f64 = -3.0;
        while z <= 3.0 {
            if z.abs() >= 0.1 {
                let s = sigmoid(alpha * z);
                let exact = if z > 0.0 { 1.0 } else { 0.0 };
                assert!(
                    (s - exact).abs() <= bound,
                    "alpha {alpha}, z {z}: |{s} - {exact}| > {bound}"
                );
            }
            z += 0.05;
        }
    }
}

#[test]
fn finite_diff_check_polynomial() {
    let point = Tensor::from_slice(&[3.0]);
    let analytic = Tensor::from_slice(&[6.0]);
    let rel = finite_diff_check(|t| Ok(t.data()[0] * t.data()[0]), &point, &analytic, 1e-5).unwrap();
    assert!(rel <= 1e-9, "rel err {rel}");
}

/// FD oracle over every input of a scalar-rooted tape.
fn check_grads_fd(tape: &mut Tape, root: NodeId, leaves: &[(NodeId, Tensor)], tol: f64, h: f64) {
    let grads = tape.gradient(root, &leaves.iter().map(|(n, _)| *n).collect::<Vec<_>>(), BackwardMode::ExactRelu).unwrap();
    let mut roots = vec![root];
    roots.extend(&grads);
    let bindings: Vec<(NodeId, &Tensor)> = leaves.iter().map(|(n, t)| (*n, t)).collect();
    let values = tape.eval(&bindings, &roots).unwrap();
    for (li, (leaf, tensor)) in leaves.iter().enumerate() {
        let analytic = &values[1 + li];
        let rel = finite_diff_check(
            |t| {
                let mut bindings: Vec<(NodeId, &Tensor)> =
                    leaves.iter().map(|(n, t)| (*n, t)).collect();
                bindings[li] = (*leaf, t);
                Ok(tape.eval(&bindings, &[root]).unwrap()[0].item())
            },
            tensor,
            analytic,
            h,
        )
        .unwrap();
        assert!(rel <= tol, "leaf {li}: rel err {rel} > {tol}");
    }
}

#[test]
fn matmul_gradients_all_transpose_combos() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        // logical A: 3x4, logical B: 4x2
        let a_shape = if ta { vec![4, 3] } else { vec![3, 4] };
        let b_shape = if tb { vec![2, 4] } else { vec![4, 2] };
        let a_t = Tensor::new(a_shape.clone(), (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b_t = Tensor::new(b_shape.clone(), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());

        let mut tape = Tape::new();
        let a = tape.leaf(a_shape);
        let b = tape.leaf(b_shape);
        let c = tape.matmul(a, b, ta, tb);
        let wc = tape.constant(w);
        let root = tape.dot(c, wc);
        check_grads_fd(&mut tape, root, &[(a, a_t), (b, b_t)], 1e-8, 1e-5);
    }
}

#[test]
fn row_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect());
    let idx = Arc::new(vec![1usize, 0, 3]);
    let weight = Tensor::from_slice(&[0.7, -0.4, 1.3]);

    // select - max_excluding, weighted
    let mut tape = Tape::new();
    let a = tape.leaf(vec![3, 4]);
    let own = tape.row_select(a, idx.clone());
    let other = tape.row_max_excluding(a, idx.clone());
    let gap = tape.sub(own, other);
    let wc = tape.constant(weight.clone());
    let root = tape.dot(gap, wc);
    check_grads_fd(&mut tape, root, &[(a, m.clone())], 1e-8, 1e-6);

    // logsumexp and softmax
    let mut tape = Tape::new();
    let a = tape.leaf(vec![3, 4]);
    let lse = tape.row_logsumexp(a);
    let wc = tape.constant(weight.clone());
    let root = tape.dot(lse, wc);
    check_grads_fd(&mut tape, root, &[(a, m.clone())], 1e-8, 1e-6);

    let mut tape = Tape::new();
    let a = tape.leaf(vec![3, 4]);
    let sm = tape.row_softmax(a);
    let probe = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let pc = tape.constant(probe);
    let weighted = tape.mul(sm, pc);
    let root = tape.sum(weighted);
    check_grads_fd(&mut tape, root, &[(a, m)], 1e-7, 1e-6);
}

#[test]
fn elementwise_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_slice(&(0..6).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());

    let mut tape = Tape::new();
    let a = tape.leaf(vec![6]);
    let sp = tape.softplus(a);
    let sg = tape.sigmoid_sharp(a, 3.0);
    let both = tape.mul(sp, sg);
    let branch = tape.signed_pow_abs(a, 2.5);
    let merged = tape.add(both, branch);
    let root = tape.sum(merged);
    check_grads_fd(&mut tape, root, &[(a, x.clone())], 1e-7, 1e-6);

    // amplified sigmoid: value alpha * sigmoid(z), checked against its rule
    let mut tape = Tape::new();
    let a = tape.leaf(vec![6]);
    let amp = tape.sigmoid_amplified(a, 7.0);
    let root = tape.sum(amp);
    let vals = tape.eval(&[(a, &x)], &[amp]).unwrap();
    for (v, z) in vals[0].iter().zip(x.iter()) {
        assert!((v - 7.0 * sigmoid(*z)).abs() < 1e-14);
    }
    check_grads_fd(&mut tape, root, &[(a, x)], 1e-8, 1e-6);
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(vec![2, 2, 5, 4], (0..80).map(|_| rng.random_range(-1.0..1.0)).collect());
    let w = Tensor::new(vec![3, 2, 3, 2], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect());

    let mut tape = Tape::new();
    let xn = tape.leaf(vec![2, 2, 5, 4]);
    let wn = tape.leaf(vec![3, 2, 3, 2]);
    let y = tape.conv2d(xn, wn);
    let probe = Tensor::new(
        vec![2, 3, 3, 3],
        (0..54).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let pc = tape.constant(probe);
    let weighted = tape.mul(y, pc);
    let root = tape.sum(weighted);
    check_grads_fd(&mut tape, root, &[(xn, x), (wn, w)], 1e-8, 1e-5);
}

#[test]
fn second_order_matches_finite_differences_of_the_gradient() {
    // f = sum(softplus(x)^2 + x^3); both passes stay on the tape, so the
    // gradient can be differentiated again
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = Tensor::from_slice(&(0..5).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>());

    let mut tape = Tape::new();
    let x = tape.leaf(vec![5]);
    let sp = tape.softplus(x);
    let sp2 = tape.mul(sp, sp);
    let x2 = tape.mul(x, x);
    let x3 = tape.mul(x2, x);
    let f_terms = tape.add(sp2, x3);
    let f = tape.sum(f_terms);

    let g = tape.gradient(f, &[x], BackwardMode::ExactRelu).unwrap()[0];
    for i in 0..5 {
        // pick one gradient component and differentiate it again
        let mut basis = vec![0.0; 5];
        basis[i] = 1.0;
        let e = tape.constant(Tensor::from_slice(&basis));
        let gi = tape.dot(g, e);
        let h = tape.gradient(gi, &[x], BackwardMode::ExactRelu).unwrap()[0];
        let analytic = tape.eval(&[(x, &x0)], &[h]).unwrap()[0].clone();
        let rel = finite_diff_check(
            |t| Ok(tape.eval(&[(x, t)], &[gi]).unwrap()[0].item()),
            &x0,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(rel <= 1e-6, "component {i}: rel err {rel}");
    }
}

#[test]
fn evaluation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x0 = Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let w0 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());

    let mut tape = Tape::new();
    let x = tape.leaf(vec![4, 3]);
    let w = tape.leaf(vec![3, 2]);
    let h = tape.matmul(x, w, false, false);
    let r = tape.relu(h);
    let s = tape.sum(r);
    let g = tape.gradient(s, &[x, w], BackwardMode::SmoothRelu { alpha: 50.0 }).unwrap();

    let run = || tape.eval(&[(x, &x0), (w, &w0)], &[s, g[0], g[1]]).unwrap();
    let first = run();
    let second = run();
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.shape(), b.shape());
        for (va, vb) in a.iter().zip(b.iter()) {
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }
}

#[test]
fn gradient_of_unreachable_leaf_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![2]);
    let unused = tape.leaf(vec![3]);
    let root = tape.dot(x, x);
    let g = tape.gradient(root, &[unused], BackwardMode::ExactRelu).unwrap()[0];
    let v = tape
        .eval(&[(x, &Tensor::from_slice(&[1.0, 2.0])), (unused, &Tensor::from_slice(&[0.0; 3]))], &[g])
        .unwrap();
    assert_eq!(v[0].data(), &[0.0, 0.0, 0.0]);
}
