//! Reconstruction of training samples from trained parameters.
//!
//! All three objectives share one structure: a stationary term
//! `||θ − ∇_θ S||²` with `S = Σ_i λ_i f_i(x_i; θ)`, where `f_i` is the
//! signed output (binary), the margin gap (multiclass), or the raw output
//! (general losses). Pulling the duals inside the gradient keeps the whole
//! batch in a single backward pass. `∇_θ` is recorded with the smooth
//! ReLU backward of sharpness `alpha`, which makes the loss differentiable
//! in the candidates; the optimizer then differentiates that loss exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardMode, Evaluator, NodeId, Tape};
use crate::data_io::Label;
use crate::error::{Error, Result};
use crate::models::{ModelSpec, ParamVector};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// `||θ − Σ λ_i ∇_θ[y_i Φ(x_i)]||² + L_λ + L_prior`; scalar-output models.
    Binary,
    /// `||θ − Σ λ_i ∇_θ[Φ_{y_i}(x_i) − max_{j≠y_i} Φ_j(x_i)]||² + L_λ + L_prior`.
    Multiclass,
    /// `||θ − Σ λ_i ∇_θ Φ(x_i)||² + L_prior`. No dual penalty: the
    /// stationarity coefficients of a regression loss may carry either sign.
    GeneralLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    pub objective: Objective,
    /// Candidate count; 2n is a good default when n is known.
    pub m: usize,
    /// Candidate init std.
    pub sigma_x: f64,
    /// Dual floor fed to the λ penalty (Binary/Multiclass only).
    pub lambda_min: f64,
    /// Backward sharpness for the recorded `∇_θ`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Initial value of every dual variable.
    #[serde(default = "default_lambda_init")]
    pub lambda_init: f64,
    /// Use the `α·σ(z)` backward instead of `σ(αz)` (comparison only).
    #[serde(default)]
    pub amplified_backward: bool,
    /// Multiclass comparison variant with one dual per (candidate, class)
    /// pair instead of the margin-gap form. Known to reconstruct poorly;
    /// reachable only through [`reconstruct`].
    #[serde(default)]
    pub per_pair_duals: bool,
}

fn default_lambda_init() -> f64 {
    0.5
}

impl ReconstructionConfig {
    pub fn new(objective: Objective, m: usize, seed: u64) -> Self {
        ReconstructionConfig {
            objective,
            m,
            sigma_x: 1e-3,
            lambda_min: 0.1,
            alpha: 100.0,
            learning_rate: 0.01,
            iterations: 50_000,
            seed,
            lambda_init: default_lambda_init(),
            amplified_backward: false,
            per_pair_duals: false,
        }
    }

    /// Number of label classes candidates are balanced over.
    pub fn classes(&self, model_outputs: usize) -> usize {
        match self.objective {
            Objective::Binary | Objective::GeneralLoss => 2,
            Objective::Multiclass => model_outputs,
        }
    }

    pub fn validate(&self, model_outputs: usize) -> Result<()> {
        if self.m < 1 {
            return Err(Error::InvalidConfig("need at least one candidate".into()));
        }
        if !(self.sigma_x > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma_x must be positive, got {}", self.sigma_x)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("need at least one iteration".into()));
        }
        match self.objective {
            Objective::Binary | Objective::GeneralLoss => {
                if model_outputs != 1 {
                    return Err(Error::ArityMismatch(format!(
                        "{:?} objective expects a scalar-output model, got {model_outputs} outputs",
                        self.objective
                    )));
                }
            }
            Objective::Multiclass => {
                if model_outputs < 2 {
                    return Err(Error::ArityMismatch("multiclass objective needs at least 2 outputs".into()));
                }
            }
        }
        if matches!(self.objective, Objective::Binary | Objective::Multiclass) && !(self.lambda_min > 0.0) {
            return Err(Error::InvalidConfig(format!("lambda_min must be positive, got {}", self.lambda_min)));
        }
        if self.per_pair_duals && self.objective != Objective::Multiclass {
            return Err(Error::InvalidConfig("per-pair duals only apply to the multiclass objective".into()));
        }
        let classes = self.classes(model_outputs);
        if self.m % classes != 0 {
            return Err(Error::InvalidConfig(format!(
                "m = {} is not divisible by the {classes}-way balanced label scheme",
                self.m
            )));
        }
        Ok(())
    }

    fn backward_mode(&self) -> BackwardMode {
        if self.amplified_backward {
            BackwardMode::AmplifiedSigmoid { alpha: self.alpha }
        } else {
            BackwardMode::SmoothRelu { alpha: self.alpha }
        }
    }
}

/// Candidate inputs, dual variables, and their fixed balanced labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// `[m, d]`.
    pub x: Tensor,
    /// `[m]`.
    pub lambda: Tensor,
    pub labels: Vec<Label>,
}

impl CandidateSet {
    pub fn m(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.x.shape()[1]
    }

    /// Concatenates candidate sets (labels included), preserving order.
    pub fn concat(sets: &[CandidateSet]) -> Option<CandidateSet> {
        let first = sets.first()?;
        let d = first.d();
        let mut x = Vec::new();
        let mut lambda = Vec::new();
        let mut labels = Vec::new();
        for s in sets {
            assert_eq!(s.d(), d, "candidate dimensions differ");
            x.extend_from_slice(s.x.data());
            lambda.extend_from_slice(s.lambda.data());
            labels.extend_from_slice(&s.labels);
        }
        let m = labels.len();
        Some(CandidateSet { x: Tensor::new(vec![m, d], x), lambda: Tensor::from_slice(&lambda), labels })
    }
}

/// Gaussian candidates with balanced labels (`candidate i` gets class
/// `i mod C`) and constant duals.
pub fn init_candidates(cfg: &ReconstructionConfig, d: usize, classes: usize, seed: u64) -> Result<CandidateSet> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    if classes < 2 {
        return Err(Error::InvalidConfig("need at least two label classes".into()));
    }
    if cfg.m % classes != 0 {
        return Err(Error::InvalidConfig(format!("m = {} not divisible by {classes} classes", cfg.m)));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; cfg.m * d];
    for v in &mut x {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = cfg.sigma_x * z;
    }
    let labels: Vec<Label> = (0..cfg.m)
        .map(|i| {
            let class = i % classes;
            match cfg.objective {
                Objective::Binary | Objective::GeneralLoss => {
                    Label::Sign(if class == 0 { 1.0 } else { -1.0 })
                }
                Objective::Multiclass => Label::Class(class),
            }
        })
        .collect();
    Ok(CandidateSet {
        x: Tensor::new(vec![cfg.m, d], x),
        lambda: Tensor::full(vec![cfg.m], cfg.lambda_init),
        labels,
    })
}

// -- penalties ---------------------------------------------------------------

/// `Σ_i Σ_k max{max{x−1, 0}, max{−x−1, 0}}`: zero inside `[-1, 1]^d`,
/// growing linearly outside.
pub fn prior_penalty(x: &Tensor) -> f64 {
    x.iter().map(|&v| (v - 1.0).max(0.0).max((-v - 1.0).max(0.0))).sum()
}

/// `Σ_i max{−λ_i, −λ_min}`: pushes every dual toward `λ_i ≥ λ_min`.
pub fn lambda_penalty(lambda: &Tensor, lambda_min: f64) -> f64 {
    assert!(lambda_min > 0.0, "lambda_min must be positive");
    lambda.iter().map(|&l| (-l).max(-lambda_min)).sum()
}

// -- the reconstruction graph ---------------------------------------------

struct RecGraph {
    tape: Tape,
    x: NodeId,
    lambda: NodeId,
    lambda_shape: Vec<usize>,
    loss: NodeId,
    stationary: NodeId,
    lambda_pen: Option<NodeId>,
    prior_pen: NodeId,
}

fn class_indices(labels: &[Label], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| match *l {
            Label::Class(c) if c < classes => Ok(c),
            Label::Sign(y) if y == 1.0 => Ok(0),
            Label::Sign(y) if y == -1.0 => Ok(1),
            other => Err(Error::InvalidLabel(format!("candidate label {other:?} unusable here"))),
        })
        .collect()
}

fn build_graph(
    spec: &ModelSpec,
    params: &ParamVector,
    cfg: &ReconstructionConfig,
    labels: &[Label],
    include_penalties: bool,
) -> Result<RecGraph> {
    spec.validate()?;
    let c = spec.output_dim();
    cfg.validate(c)?;
    let m = labels.len();
    let d = spec.input_dim();

    let mut tape = Tape::new();
    let x = tape.leaf(vec![m, d]);
    let lambda_shape = if cfg.per_pair_duals { vec![m, c] } else { vec![m] };
    let lambda = tape.leaf(lambda_shape.clone());
    let param_nodes: Vec<NodeId> = params.tensors().into_iter().map(|t| tape.constant(t)).collect();
    let logits = spec.build_forward(&mut tape, x, &param_nodes);

    // S = Σ_i λ_i f_i; the duals ride inside the gradient so one backward
    // pass covers the whole candidate batch
    let weighted = match cfg.objective {
        Objective::Binary => {
            let signs: Vec<f64> = labels
                .iter()
                .map(|l| match *l {
                    Label::Sign(y) if y.abs() == 1.0 => Ok(y),
                    other => Err(Error::InvalidLabel(format!("binary objective needs ±1 labels, got {other:?}"))),
                })
                .collect::<Result<_>>()?;
            let flat = tape.reshape(logits, vec![m]);
            let yc = tape.constant(Tensor::from_slice(&signs));
            let ly = tape.mul(lambda, yc);
            tape.dot(ly, flat)
        }
        Objective::GeneralLoss => {
            let flat = tape.reshape(logits, vec![m]);
            tape.dot(lambda, flat)
        }
        Objective::Multiclass => {
            let idx = std::sync::Arc::new(class_indices(labels, c)?);
            if cfg.per_pair_duals {
                // straightforward form: one dual per (candidate, class) pair
                let own = tape.row_select(logits, idx.clone());
                let own_b = tape.col_broadcast(own, c);
                let diffs = tape.sub(own_b, logits);
                let mut mask = vec![1.0; m * c];
                for (i, &y) in idx.iter().enumerate() {
                    mask[i * c + y] = 0.0;
                }
                let mask = tape.constant(Tensor::new(vec![m, c], mask));
                let masked = tape.mul(lambda, mask);
                let weighted = tape.mul(masked, diffs);
                tape.sum(weighted)
            } else {
                let own = tape.row_select(logits, idx.clone());
                let other = tape.row_max_excluding(logits, idx);
                let gap = tape.sub(own, other);
                tape.dot(lambda, gap)
            }
        }
    };

    let grads = tape.gradient(weighted, &param_nodes, cfg.backward_mode())?;
    let mut stationary: Option<NodeId> = None;
    for (p, g) in param_nodes.iter().zip(&grads) {
        let r = tape.sub(*p, *g);
        let sq = tape.dot(r, r);
        stationary = Some(match stationary {
            Some(acc) => tape.add(acc, sq),
            None => sq,
        });
    }
    let stationary = stationary.expect("at least one parameter slot");

    // L_prior via max ops so the backward mode never touches the penalties
    let xm1 = tape.add_scalar(x, -1.0);
    let hi = tape.max_scalar(xm1, 0.0);
    let nx = tape.neg(x);
    let nxm1 = tape.add_scalar(nx, -1.0);
    let lo = tape.max_scalar(nxm1, 0.0);
    let hi_sum = tape.sum(hi);
    let lo_sum = tape.sum(lo);
    let prior_pen = tape.add(hi_sum, lo_sum);

    let lambda_pen = match cfg.objective {
        Objective::Binary | Objective::Multiclass => {
            let nl = tape.neg(lambda);
            let floored = tape.max_scalar(nl, -cfg.lambda_min);
            if cfg.per_pair_duals {
                // penalize only the duals that participate in the sum
                let idx = class_indices(labels, c)?;
                let mut mask = vec![1.0; m * c];
                for (i, &y) in idx.iter().enumerate() {
                    mask[i * c + y] = 0.0;
                }
                let mask = tape.constant(Tensor::new(vec![m, c], mask));
                let masked = tape.mul(floored, mask);
                Some(tape.sum(masked))
            } else {
                Some(tape.sum(floored))
            }
        }
        Objective::GeneralLoss => None,
    };

    let mut loss = stationary;
    if include_penalties {
        if let Some(lp) = lambda_pen {
            loss = tape.add(loss, lp);
        }
        loss = tape.add(loss, prior_pen);
    }

    Ok(RecGraph { tape, x, lambda, lambda_shape, loss, stationary, lambda_pen, prior_pen })
}

/// Value of the reconstruction loss split into its terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecLossParts {
    pub stationary: f64,
    pub lambda_penalty: f64,
    pub prior_penalty: f64,
}

impl RecLossParts {
    pub fn total(&self) -> f64 {
        self.stationary + self.lambda_penalty + self.prior_penalty
    }
}

/// Evaluates the configured objective at a candidate set.
pub fn rec_loss_parts(
    spec: &ModelSpec,
    params: &ParamVector,
    cands: &CandidateSet,
    cfg: &ReconstructionConfig,
) -> Result<RecLossParts> {
    if cfg.per_pair_duals {
        return Err(Error::InvalidConfig(
            "per-pair duals are a comparison path inside reconstruct() only".into(),
        ));
    }
    let graph = build_graph(spec, params, cfg, &cands.labels, true)?;
    let mut roots = vec![graph.stationary, graph.prior_pen];
    if let Some(lp) = graph.lambda_pen {
        roots.push(lp);
    }
    let values = graph.tape.eval(&[(graph.x, &cands.x), (graph.lambda, &cands.lambda)], &roots)?;
    Ok(RecLossParts {
        stationary: values[0].item(),
        prior_penalty: values[1].item(),
        lambda_penalty: values.get(2).map(|t| t.item()).unwrap_or(0.0),
    })
}

/// Total reconstruction loss (stationary term plus the objective's
/// penalties).
pub fn rec_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    cands: &CandidateSet,
    cfg: &ReconstructionConfig,
) -> Result<f64> {
    Ok(rec_loss_parts(spec, params, cands, cfg)?.total())
}

/// Result of one reconstruction run: the best-loss iterate plus run stats.
#[derive(Clone, Debug)]
pub struct RecOutcome {
    pub candidates: CandidateSet,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub initial_loss: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Joint first-order optimization of `(X, Λ)` against the configured
/// objective. Candidates and duals update together each step with adaptive
/// per-coordinate moment estimates; the iterate with the lowest recorded
/// loss is returned. Deterministic per seed.
pub fn reconstruct(spec: &ModelSpec, params: &ParamVector, cfg: &ReconstructionConfig) -> Result<RecOutcome> {
    let c = spec.output_dim();
    cfg.validate(c)?;
    let d = spec.input_dim();
    let classes = cfg.classes(c);
    let init = init_candidates(cfg, d, classes, cfg.seed)?;

    let mut graph = build_graph(spec, params, cfg, &init.labels, true)?;
    let grads = graph.tape.gradient(graph.loss, &[graph.x, graph.lambda], BackwardMode::ExactRelu)?;
    let (gx, glam) = (grads[0], grads[1]);
    let sched = graph.tape.schedule(&[graph.loss, gx, glam]);
    let mut ev = Evaluator::new();

    let mut x = init.x.clone();
    let mut lam = if cfg.per_pair_duals {
        Tensor::full(graph.lambda_shape.clone(), cfg.lambda_init)
    } else {
        init.lambda.clone()
    };

    let mut adam_x = Adam::new(x.len());
    let mut adam_l = Adam::new(lam.len());

    let mut best_x = x.clone();
    let mut best_lam = lam.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_iteration = 0;
    let mut initial_loss = f64::NAN;

    for iter in 0..=cfg.iterations {
        let bindings = [(graph.x, &x), (graph.lambda, &lam)];
        ev.run(&graph.tape, &sched, &bindings)?;
        let loss = ev.value(graph.loss).item();
        if !loss.is_finite() {
            return Err(Error::ReconstructionDiverged { iter, loss });
        }
        if iter == 0 {
            initial_loss = loss;
        }
        if loss < best_loss {
            best_loss = loss;
            best_iteration = iter;
            best_x.data_mut().copy_from_slice(x.data());
            best_lam.data_mut().copy_from_slice(lam.data());
        }
        if iter == cfg.iterations {
            break;
        }
        adam_x.step(x.data_mut(), ev.value(gx).data(), cfg.learning_rate);
        adam_l.step(lam.data_mut(), ev.value(glam).data(), cfg.learning_rate);
    }

    // collapse per-pair duals to per-candidate sums for reporting
    let lambda = if cfg.per_pair_duals {
        let sums: Vec<f64> = best_lam.data().chunks_exact(c).map(|row| row.iter().sum()).collect();
        Tensor::from_slice(&sums)
    } else {
        best_lam
    };

    Ok(RecOutcome {
        candidates: CandidateSet { x: best_x, lambda, labels: init.labels },
        best_loss,
        best_iteration,
        initial_loss,
    })
}
