//! Experiment orchestration: random hyperparameter search over
//! reconstruction runs, checkpoint/manifest persistence, and verification
//! checks backing the CLI.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::autodiff::{finite_diff_check, BackwardMode};
use crate::data_io::{
    self, load_dataset, preprocess, save_dataset, synthetic, ClassScheme, Dataset, Label, SyntheticKind,
};
use crate::error::{Error, Result};
use crate::models::{forward_one, param_gradient, Functional, ModelSpec, ParamVector};
use crate::reconstruction::{
    rec_loss_parts, reconstruct, CandidateSet, Objective, ReconstructionConfig,
};
use crate::tensor::Tensor;
use crate::training::{self, train, StationarityReport, TrainConfig, TrainTrace};

// -- search space -------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Self {
        Band { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Random-search distributions for a reconstruction sweep. Learning rate
/// and candidate init std are drawn log-uniformly; the dual floor and the
/// backward sharpness uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: Band,
    pub sigma_x: Band,
    pub lambda_min: Band,
    pub alpha: Band,
    /// Number of runs k.
    pub runs: usize,
    /// Everything the bands do not override (objective, m, iterations,
    /// seed, ...).
    pub base: ReconstructionConfig,
}

impl SearchSpace {
    /// Full-scale defaults: lr in [1e-5, 1] and sigma_x in [1e-6, 0.1]
    /// log-uniform, lambda_min in [0.01, 0.5] and alpha in [10, 500]
    /// uniform, 100 runs.
    pub fn defaults(base: ReconstructionConfig) -> Self {
        SearchSpace {
            learning_rate: Band::new(1e-5, 1.0),
            sigma_x: Band::new(1e-6, 0.1),
            lambda_min: Band::new(0.01, 0.5),
            alpha: Band::new(10.0, 500.0),
            runs: 100,
            base,
        }
    }

    /// Narrow desk-scale preset with 8 runs.
    pub fn desk(base: ReconstructionConfig) -> Self {
        SearchSpace {
            learning_rate: Band::new(3e-3, 3e-1),
            sigma_x: Band::new(1e-4, 3e-2),
            lambda_min: Band::new(0.01, 0.5),
            alpha: Band::new(50.0, 400.0),
            runs: 8,
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, band, log) in [
            ("learning_rate", self.learning_rate, true),
            ("sigma_x", self.sigma_x, true),
            ("lambda_min", self.lambda_min, false),
            ("alpha", self.alpha, false),
        ] {
            if !(band.lo <= band.hi) || (log && !(band.lo > 0.0)) || (!log && !band.lo.is_finite()) {
                return Err(Error::InvalidConfig(format!("bad {name} band [{}, {}]", band.lo, band.hi)));
            }
        }
        if self.runs < 1 {
            return Err(Error::InvalidConfig("need at least one run".into()));
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut impl Rng, band: Band) -> f64 {
    let u: f64 = rng.random();
    (band.lo.ln() + u * (band.hi.ln() - band.lo.ln())).exp()
}

fn uniform(rng: &mut impl Rng, band: Band) -> f64 {
    let u: f64 = rng.random();
    band.lo + u * (band.hi - band.lo)
}

/// One random draw from the space, overriding the four searched fields of
/// the base config.
pub fn sample_hyperparams(space: &SearchSpace, rng: &mut impl Rng) -> ReconstructionConfig {
    let mut cfg = space.base.clone();
    cfg.learning_rate = log_uniform(rng, space.learning_rate);
    cfg.sigma_x = log_uniform(rng, space.sigma_x);
    cfg.lambda_min = uniform(rng, space.lambda_min);
    cfg.alpha = uniform(rng, space.alpha);
    cfg
}

// -- run manifests and the sweep ------------------------------------------

/// Everything needed to bit-reproduce one reconstruction run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ReconstructionConfig,
    pub dataset_fingerprint: Option<String>,
    pub final_loss: Option<f64>,
    pub wall_secs: f64,
    pub code_version: String,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub index: usize,
    pub manifest: RunManifest,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Candidates of all successful runs, concatenated in run order.
    pub merged: CandidateSet,
    pub runs: Vec<RunRecord>,
}

fn run_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1))
}

/// `k` independent reconstructions with per-run hyperparameter draws,
/// dispatched over a `jobs`-thread pool. Failed runs are recorded and the
/// sweep continues; the merge is ordered by run index, so the outcome is
/// independent of the parallelism level.
pub fn run_search(
    spec: &ModelSpec,
    params: &ParamVector,
    space: &SearchSpace,
    jobs: usize,
    dataset_fingerprint: Option<&str>,
) -> Result<SearchOutcome> {
    space.validate()?;
    space.base.validate(spec.output_dim())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let results: Vec<(usize, Result<(CandidateSet, f64)>, ReconstructionConfig, f64)> =
        pool.install(|| {
            (0..space.runs)
                .into_par_iter()
                .map(|r| {
                    // independent, scheduling-invariant per-run stream
                    let mut rng = ChaCha8Rng::seed_from_u64(space.base.seed);
                    rng.set_stream(r as u64 + 1);
                    let mut cfg = sample_hyperparams(space, &mut rng);
                    cfg.seed = run_seed(space.base.seed, r);
                    let started = Instant::now();
                    let out = reconstruct(spec, params, &cfg)
                        .map(|o| (o.candidates, o.best_loss));
                    (r, out, cfg, started.elapsed().as_secs_f64())
                })
                .collect()
        });

    let mut runs = Vec::with_capacity(space.runs);
    let mut sets = Vec::new();
    for (index, out, config, wall_secs) in results {
        let (final_loss, error) = match &out {
            Ok((set, loss)) => {
                sets.push(set.clone());
                (Some(*loss), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        runs.push(RunRecord {
            index,
            manifest: RunManifest {
                config,
                dataset_fingerprint: dataset_fingerprint.map(str::to_owned),
                final_loss,
                wall_secs,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
            },
            error,
        });
    }
    let merged = CandidateSet::concat(&sets)
        .ok_or_else(|| Error::InvalidConfig("every run in the sweep failed".into()))?;
    Ok(SearchOutcome { merged, runs })
}

// -- checkpoints ----------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

/// Plain-text description of a trained model; `params.f64` holds θ as raw
/// little-endian doubles in flattened order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub dataset_fingerprint: String,
    pub final_grad_norm: f64,
    pub epochs_run: usize,
}

pub fn save_checkpoint(
    spec: &ModelSpec,
    params: &ParamVector,
    manifest: &CheckpointManifest,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    if spec.param_layout() != *params.layout() {
        return Err(Error::ShapeMismatch("parameters do not match the spec being saved".into()));
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    data_io::write_f64_le(&dir.join("params.f64"), params.flat())?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelSpec, ParamVector, CheckpointManifest)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: CHECKPOINT_VERSION });
    }
    manifest.spec.validate()?;
    let layout = manifest.spec.param_layout();
    let flat = data_io::read_f64_le(&dir.join("params.f64"), layout.total)?;
    let params = ParamVector::from_flat(layout, flat)?;
    Ok((manifest.spec.clone(), params, manifest))
}

pub fn checkpoint_manifest(
    spec: &ModelSpec,
    train: &TrainConfig,
    dataset: &Dataset,
    trace: &TrainTrace,
) -> CheckpointManifest {
    CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        spec: spec.clone(),
        train: train.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        final_grad_norm: trace.final_grad_norm,
        epochs_run: trace.epochs_run,
    }
}

// -- candidate dumps -------------------------------------------------------

const CANDIDATES_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateDumpManifest {
    pub format_version: u32,
    pub m: usize,
    pub d: usize,
    pub labels: Vec<Label>,
    /// Config of the producing run, or the base config for merged sweeps.
    pub config: ReconstructionConfig,
    pub final_loss: Option<f64>,
}

/// Writes `manifest.json`, `x.f64` (m x d), and `lambda.f64` (m).
pub fn save_candidates(
    cands: &CandidateSet,
    config: &ReconstructionConfig,
    final_loss: Option<f64>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = CandidateDumpManifest {
        format_version: CANDIDATES_VERSION,
        m: cands.m(),
        d: cands.d(),
        labels: cands.labels.clone(),
        config: config.clone(),
        final_loss,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    data_io::write_f64_le(&dir.join("x.f64"), cands.x.data())?;
    data_io::write_f64_le(&dir.join("lambda.f64"), cands.lambda.data())?;
    Ok(())
}

pub fn load_candidates(dir: impl AsRef<Path>) -> Result<(CandidateSet, CandidateDumpManifest)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: CandidateDumpManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CANDIDATES_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: CANDIDATES_VERSION });
    }
    if manifest.labels.len() != manifest.m {
        return Err(Error::Schema(format!("{} labels for m = {}", manifest.labels.len(), manifest.m)));
    }
    let x = data_io::read_f64_le(&dir.join("x.f64"), manifest.m * manifest.d)?;
    let lambda = data_io::read_f64_le(&dir.join("lambda.f64"), manifest.m)?;
    let cands = CandidateSet {
        x: Tensor::new(vec![manifest.m, manifest.d], x),
        lambda: Tensor::from_slice(&lambda),
        labels: manifest.labels.clone(),
    };
    Ok((cands, manifest))
}

// -- training jobs (shared by the CLI and the acceptance pipeline) -----------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum DatasetSource {
    Cifar10 { dir: String, scheme: ClassScheme, per_class: usize, seed: u64 },
    Cifar100 { dir: String, scheme: ClassScheme, per_class: usize, seed: u64 },
    Mnist { dir: String, scheme: ClassScheme, per_class: usize, seed: u64 },
    Synthetic { kind: SyntheticKind, n: usize, d: usize, seed: u64 },
    SyntheticMulticlass { per_class: usize, classes: usize, d: usize, seed: u64 },
    Saved { dir: String },
}

pub fn load_source(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Cifar10 { dir, scheme, per_class, seed } => {
            preprocess(&data_io::load_cifar10(dir)?, scheme, *per_class, *seed)
        }
        DatasetSource::Cifar100 { dir, scheme, per_class, seed } => {
            preprocess(&data_io::load_cifar100(dir)?, scheme, *per_class, *seed)
        }
        DatasetSource::Mnist { dir, scheme, per_class, seed } => {
            preprocess(&data_io::load_mnist(dir)?, scheme, *per_class, *seed)
        }
        DatasetSource::Synthetic { kind, n, d, seed } => synthetic(*kind, *n, *d, *seed),
        DatasetSource::SyntheticMulticlass { per_class, classes, d, seed } => {
            data_io::synthetic_blobs_multiclass(*per_class, *classes, *d, *seed)
        }
        DatasetSource::Saved { dir } => load_dataset(dir),
    }
}

/// A full training job: dataset, architecture, and optimizer settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainJob {
    pub dataset: DatasetSource,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

/// Trains and persists checkpoint + dataset + trace under `out`:
/// `out/checkpoint/`, `out/dataset/`, `out/trace.csv`.
pub fn run_train_job(job: &TrainJob, out: impl AsRef<Path>) -> Result<(ParamVector, TrainTrace)> {
    let out = out.as_ref();
    let dataset = load_source(&job.dataset)?;
    let (params, trace) = train(&job.model, &dataset, &job.train)?;
    fs::create_dir_all(out)?;
    let manifest = checkpoint_manifest(&job.model, &job.train, &dataset, &trace);
    save_checkpoint(&job.model, &params, &manifest, out.join("checkpoint"))?;
    save_dataset(&dataset, out.join("dataset"))?;
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    fs::write(out.join("trace.csv"), csv)?;
    Ok((params, trace))
}

// -- verification ----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct VerifyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<VerifyCheck>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(VerifyCheck { name: name.to_string(), passed, detail });
    }
}

/// Spot checks on a trained checkpoint: analytic-vs-numeric gradients,
/// homogeneity and the Euler identity (bias-free models), and the
/// stationarity residual when the model was trained with weight decay.
pub fn verify_checkpoint(
    spec: &ModelSpec,
    params: &ParamVector,
    manifest: &CheckpointManifest,
    dataset: &Dataset,
) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let x0 = Tensor::from_slice(dataset.sample(0));

    // central differences on a random parameter-coordinate subset
    {
        let functional = Functional::Output { class: 0 };
        let analytic = param_gradient(spec, params, &x0, functional, BackwardMode::ExactRelu)?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coords: Vec<usize> = (0..60.min(params.len()))
            .map(|_| rng.random_range(0..params.len()))
            .collect();
        let mut worst = 0.0f64;
        for &k in &coords {
            let sub_point = Tensor::from_slice(&[params.flat()[k]]);
            let sub_grad = Tensor::from_slice(&[analytic.data()[k]]);
            let rel = finite_diff_check(
                |t| {
                    let mut p = params.clone();
                    p.flat_mut()[k] = t.data()[0];
                    Ok(forward_one(spec, &p, x0.data())?[0])
                },
                &sub_point,
                &sub_grad,
                1e-5,
            )?;
            worst = worst.max(rel);
        }
        report.push(
            "gradient-finite-difference",
            worst <= 1e-6,
            format!("worst rel err {worst:.3e} over {} coordinates (tol 1e-6)", coords.len()),
        );
    }

    match spec.homogeneity_degree() {
        Ok(degree) => {
            let phi = forward_one(spec, params, x0.data())?[0];
            let mut worst = 0.0f64;
            for c in [0.5, 2.0, 10.0] {
                let scaled = forward_one(spec, &params.scaled(c), x0.data())?[0];
                let expect = c.powi(degree as i32) * phi;
                worst = worst.max((scaled - expect).abs() / (1.0 + expect.abs()));
            }
            report.push(
                "homogeneity",
                worst <= 1e-9,
                format!("degree {degree}, worst rel err {worst:.3e} (tol 1e-9)"),
            );

            let grad = param_gradient(spec, params, &x0, Functional::Output { class: 0 }, BackwardMode::ExactRelu)?;
            let euler = grad.dot(&params.flat_tensor());
            let expect = degree as f64 * phi;
            let rel = (euler - expect).abs() / (1.0 + expect.abs());
            report.push("euler-identity", rel <= 1e-9, format!("rel err {rel:.3e} (tol 1e-9)"));
        }
        Err(e) => report.push("homogeneity", true, format!("skipped: {e}")),
    }

    if manifest.train.weight_decay > 0.0 && manifest.train.loss.validate().is_ok() {
        match training::stationarity_residual(spec, params, dataset, manifest.train.loss, manifest.train.weight_decay)
        {
            Ok(StationarityReport { residual, .. }) => {
                report.push(
                    "stationarity-residual",
                    residual <= 1e-3,
                    format!("relative residual {residual:.3e} (tol 1e-3)"),
                );
            }
            Err(e) => report.push("stationarity-residual", true, format!("skipped: {e}")),
        }
    }

    Ok(report)
}

/// Convenience: analyze a candidate dump against a dataset + checkpoint.
pub fn analyze(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &Dataset,
    candidates: &CandidateSet,
    cfg: &analysis::AnalysisConfig,
    axis: analysis::ReportAxis,
) -> Result<analysis::MatchReport> {
    analysis::build_report(spec, params, dataset, &candidates.x, cfg, axis)
}

/// Evaluates the objective's loss parts on a merged candidate set (used for
/// reporting merged-sweep manifests).
pub fn merged_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    cands: &CandidateSet,
    cfg: &ReconstructionConfig,
) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.m = cands.m();
    Ok(rec_loss_parts(spec, params, cands, &cfg)?.total())
}

/// Default desk-scale reconstruction base for an n-sample dataset: the
/// balanced 2n-candidate scheme.
pub fn desk_base(objective: Objective, n: usize, seed: u64, iterations: usize) -> ReconstructionConfig {
    let mut cfg = ReconstructionConfig::new(objective, 2 * n, seed);
    cfg.iterations = iterations;
    cfg
}
