use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recon::data_io::{Dataset, Labels, Provenance};
use recon::models::{InitScheme, ModelSpec};
use recon::training::{stationarity_residual, train, LossKind, TrainConfig};
use recon::Tensor;

fn teacher_data(n: usize, d: usize, seed: u64, margin: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let vnorm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut x = Vec::new();
    let mut y = Vec::new();
    while y.len() < n {
        let s: Vec<f64> = (0..d).map(|_| rng.random_range(-0.45..0.45)).collect();
        let t: f64 = s.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / vnorm * 2.0;
        if t.abs() >= margin && t.abs() <= 0.95 {
            x.extend(s);
            y.push(t.abs());
        }
    }
    let mut mean = vec![0.0; d];
    for row in 0..n { for k in 0..d { mean[k] += x[row*d+k]; } }
    for m in &mut mean { *m /= n as f64; }
    for row in 0..n { for k in 0..d { x[row*d+k] -= mean[k]; } }
    Dataset::new(Tensor::new(vec![n, d], x), Labels::Value(y), mean, (1, 4, 5),
        Provenance { source: "probe".into(), seed, per_class: vec![] })
}

#[test]
fn probe() {
    for (dseed, nseed, margin) in [(77u64, 5u64, 0.25f64)] {
        let data = teacher_data(20, 20, dseed, margin);
        let spec = ModelSpec::mlp(20, &[64, 64], 1);
        let mut cfg = TrainConfig::new(LossKind::Mse, 0.07, 7_000_000, 1e-3, nseed);
        cfg.init = InitScheme::SmallFirstLayer { scale: 1e-4 };
        cfg.stop_grad_norm = 1e-7;
        cfg.trace_every = 500_000;
        match train(&spec, &data, &cfg) {
            Ok((params, trace)) => {
                let res = stationarity_residual(&spec, &params, &data, LossKind::Mse, 1e-3).unwrap();
                let gs: Vec<String> = trace.rows.iter().map(|r| format!("{}:g{:.1e}", r.epoch, r.grad_norm)).collect();
                println!("tail {}", gs.join(" "));
                println!("d{dseed} n{nseed} m{margin}: stop {} grad {:.3e} residual {:.3e}",
                    trace.epochs_run, trace.final_grad_norm, res.residual);
            }
            Err(e) => println!("d{dseed} n{nseed} m{margin}: {e}"),
        }
    }
}
