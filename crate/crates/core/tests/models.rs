//! Architecture checks: hand-evaluated forwards, homogeneity, the Euler
//! identity, flattening round-trips, the conv-as-matrix oracle, and
//! initializer statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon::autodiff::{finite_diff_check, BackwardMode};
use recon::models::{
    forward_one, init_params, network_forward, param_gradient, Functional, InitScheme, Layer,
    ModelSpec, ParamVector,
};
use recon::Tensor;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_params(spec: &ModelSpec, seed: u64, scale: f64) -> ParamVector {
    let layout = spec.param_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = rand_vec(&mut rng, layout.total, scale);
    ParamVector::from_flat(layout, data).unwrap()
}

#[test]
fn dense_relu_dense_hand_value() {
    // identity weights, relu, then sum both hidden units: x = (1, -2) -> 1
    let spec = ModelSpec::mlp(2, &[2], 1);
    let tensors = vec![
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        Tensor::new(vec![2, 1], vec![1.0, 1.0]),
    ];
    let params = ParamVector::from_tensors(spec.param_layout(), &tensors);
    let out = forward_one(&spec, &params, &[1.0, -2.0]).unwrap();
    assert_eq!(out, vec![1.0]);
}

#[test]
fn zero_params_give_zero_output() {
    let spec = ModelSpec::mlp(5, &[7, 3], 2);
    let params = ParamVector::zeros(spec.param_layout());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![4, 5], rand_vec(&mut rng, 20, 1.0));
    let out = network_forward(&spec, &params, &x).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn homogeneity_scaling() {
    // |Φ(cθ; x) − c^L Φ(θ; x)| ≤ 1e-9 (1 + |c^L Φ|) for c in {0.5, 2, 10}
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let specs = [
        ModelSpec::mlp(6, &[12, 9], 1),
        ModelSpec::mlp(8, &[10], 3),
        ModelSpec::conv_net(1, 6, 6, 3, 4, &[10], 1),
    ];
    for spec in &specs {
        let degree = spec.homogeneity_degree().unwrap();
        let params = random_params(spec, 7, 0.8);
        let x = rand_vec(&mut rng, spec.input_dim(), 1.0);
        let phi = forward_one(spec, &params, &x).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled = forward_one(spec, &params.scaled(c), &x).unwrap();
            for (s, p) in scaled.iter().zip(&phi) {
                let expect = c.powi(degree as i32) * p;
                assert!(
                    (s - expect).abs() <= 1e-9 * (1.0 + expect.abs()),
                    "c = {c}: {s} vs {expect}"
                );
            }
        }
    }
}

#[test]
fn homogeneity_degree_counts_weight_layers() {
    assert_eq!(ModelSpec::mlp(10, &[1000, 1000], 1).homogeneity_degree().unwrap(), 3);
    assert_eq!(ModelSpec::conv_net(3, 32, 32, 3, 32, &[1000], 1).homogeneity_degree().unwrap(), 3);

    let mut biased = ModelSpec::mlp(10, &[8, 8], 1);
    biased.layers[2] = Layer::Dense { input: 8, output: 8, bias: true };
    assert!(biased.homogeneity_degree().is_err());
}

#[test]
fn euler_identity() {
    // <θ, ∇_θ Φ> = L · Φ for bias-free nets at generic points
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let specs = [ModelSpec::mlp(6, &[12, 9], 1), ModelSpec::conv_net(1, 6, 6, 3, 4, &[8], 2)];
    for spec in &specs {
        let degree = spec.homogeneity_degree().unwrap() as f64;
        let params = random_params(spec, 3, 0.7);
        let x = Tensor::from_slice(&rand_vec(&mut rng, spec.input_dim(), 1.0));
        for class in 0..spec.output_dim() {
            let phi = forward_one(spec, &params, x.data()).unwrap()[class];
            let g = param_gradient(spec, &params, &x, Functional::Output { class }, BackwardMode::ExactRelu)
                .unwrap();
            let euler = g.dot(&params.flat_tensor());
            assert!(
                (euler - degree * phi).abs() <= 1e-9 * (1.0 + (degree * phi).abs()),
                "{euler} vs {}",
                degree * phi
            );
        }
    }
}

#[test]
fn flatten_unflatten_roundtrip() {
    let spec = ModelSpec::conv_net(2, 7, 5, 3, 4, &[11], 3);
    let params = random_params(&spec, 23, 1.0);
    let rebuilt = ParamVector::from_tensors(spec.param_layout(), &params.tensors());
    assert_eq!(params.flat(), rebuilt.flat());
    // offsets tile the vector exactly
    let layout = spec.param_layout();
    let mut expected_offset = 0;
    for slot in &layout.slots {
        assert_eq!(slot.offset, expected_offset);
        expected_offset += slot.count();
    }
    assert_eq!(expected_offset, layout.total);
}

#[test]
fn conv_equals_dense_matrix_oracle() {
    // brute-force the conv as an explicit matrix and compare
    let (ci, h, w, k, co) = (2usize, 4usize, 5usize, 3usize, 3usize);
    let spec = ModelSpec {
        input: recon::models::InputShape::Image { channels: ci, height: h, width: w },
        layers: vec![Layer::Conv2d { in_channels: ci, out_channels: co, kernel: k, bias: false }],
    };
    let params = random_params(&spec, 5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = ci * h * w;
    let x = Tensor::new(vec![1, d], rand_vec(&mut rng, d, 1.0));
    let got = network_forward(&spec, &params, &x).unwrap();

    let (oh, ow) = (h - k + 1, w - k + 1);
    let kernel = &params.tensors()[0];
    let mut expected = vec![0.0; co * oh * ow];
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                // one dense row of the equivalent matrix
                let mut row = vec![0.0; d];
                for c in 0..ci {
                    for a in 0..k {
                        for b in 0..k {
                            row[(c * h + i + a) * w + j + b] =
                                kernel.data()[((o * ci + c) * k + a) * k + b];
                        }
                    }
                }
                expected[(o * oh + i) * ow + j] =
                    row.iter().zip(x.data()).map(|(r, v)| r * v).sum::<f64>();
            }
        }
    }
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()));
    }
}

#[test]
fn init_schemes() {
    let spec = ModelSpec::mlp(200, &[1000, 1000], 1);

    // small first layer: empirical std within a factor 2 of the scale
    let params = init_params(&spec, InitScheme::SmallFirstLayer { scale: 1e-4 }, 0).unwrap();
    let first = &params.tensors()[0];
    let std = (first.iter().map(|v| v * v).sum::<f64>() / first.len() as f64).sqrt();
    assert!((0.5e-4..=2e-4).contains(&std), "first-layer std {std}");
    // later layers keep the standard scale
    let second = &params.tensors()[1];
    let std2 = (second.iter().map(|v| v * v).sum::<f64>() / second.len() as f64).sqrt();
    let expect2 = 1.0 / (1000f64).sqrt();
    assert!((std2 / expect2 - 1.0).abs() < 0.2, "second-layer std {std2}");

    // standard init on Dense(100, 50): std within [0.8, 1.2] / sqrt(100)
    let spec = ModelSpec::mlp(100, &[], 50);
    let params = init_params(&spec, InitScheme::Standard, 1).unwrap();
    let wstd = (params.flat().iter().map(|v| v * v).sum::<f64>() / params.len() as f64).sqrt();
    assert!((0.08..=0.12).contains(&wstd), "std {wstd}");

    // determinism
    let a = init_params(&spec, InitScheme::Standard, 9).unwrap();
    let b = init_params(&spec, InitScheme::Standard, 9).unwrap();
    assert_eq!(a.flat(), b.flat());
    let c = init_params(&spec, InitScheme::Standard, 10).unwrap();
    assert_ne!(a.flat(), c.flat());
}

#[test]
fn param_gradient_linear_model_is_input() {
    let spec = ModelSpec::mlp(4, &[], 1);
    let params = random_params(&spec, 2, 1.0);
    let x = Tensor::from_slice(&[0.3, -0.7, 1.1, 0.2]);
    let g = param_gradient(&spec, &params, &x, Functional::Output { class: 0 }, BackwardMode::ExactRelu)
        .unwrap();
    assert_eq!(g.data(), x.data());
}

#[test]
fn param_gradient_matches_finite_differences() {
    let spec = ModelSpec::mlp(5, &[8], 1);
    let params = random_params(&spec, 31, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_slice(&rand_vec(&mut rng, 5, 1.0));
    let g = param_gradient(&spec, &params, &x, Functional::SignedOutput { y: -1.0 }, BackwardMode::ExactRelu)
        .unwrap();
    let rel = finite_diff_check(
        |theta| {
            let p = ParamVector::from_flat(spec.param_layout(), theta.data().to_vec())?;
            Ok(-forward_one(&spec, &p, x.data())?[0])
        },
        &params.flat_tensor(),
        &g,
        1e-5,
    )
    .unwrap();
    assert!(rel <= 1e-6, "rel err {rel}");
}

#[test]
fn bias_layers_work_and_break_homogeneity() {
    let spec = ModelSpec {
        input: recon::models::InputShape::Flat(3),
        layers: vec![
            Layer::Dense { input: 3, output: 4, bias: true },
            Layer::Relu,
            Layer::Dense { input: 4, output: 1, bias: false },
        ],
    };
    assert!(spec.homogeneity_degree().is_err());
    let params = random_params(&spec, 12, 0.8);
    // finite differences still hold with biases in the layout
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::from_slice(&rand_vec(&mut rng, 3, 1.0));
    let g = param_gradient(&spec, &params, &x, Functional::Output { class: 0 }, BackwardMode::ExactRelu)
        .unwrap();
    let rel = finite_diff_check(
        |theta| {
            let p = ParamVector::from_flat(spec.param_layout(), theta.data().to_vec())?;
            Ok(forward_one(&spec, &p, x.data())?[0])
        },
        &params.flat_tensor(),
        &g,
        1e-5,
    )
    .unwrap();
    assert!(rel <= 1e-6, "rel err {rel}");
}

#[test]
fn invalid_specs_are_rejected() {
    // mismatched dense chain
    let spec = ModelSpec {
        input: recon::models::InputShape::Flat(4),
        layers: vec![
            Layer::Dense { input: 4, output: 3, bias: false },
            Layer::Dense { input: 5, output: 1, bias: false },
        ],
    };
    assert!(spec.validate().is_err());
    // conv on flat input
    let spec = ModelSpec {
        input: recon::models::InputShape::Flat(12),
        layers: vec![Layer::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, bias: false }],
    };
    assert!(spec.validate().is_err());
    // class index out of range
    let spec = ModelSpec::mlp(3, &[4], 2);
    let params = random_params(&spec, 1, 1.0);
    let x = Tensor::from_slice(&[0.1, 0.2, 0.3]);
    assert!(param_gradient(&spec, &params, &x, Functional::Output { class: 2 }, BackwardMode::ExactRelu)
        .is_err());
}
