//! Full-batch gradient-descent training with optional weight decay, plus
//! convergence diagnostics (margins, stationarity residual).

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardMode, Evaluator, NodeId, Tape};
use crate::data_io::{Dataset, Label, Labels};
use crate::error::{Error, Result};
use crate::models::{init_params, network_forward, param_gradient, Functional, InitScheme, ModelSpec, ParamVector};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    /// `log(1 + e^{-yΦ})` with y in {-1, +1}.
    Bce,
    /// `-log softmax_y` over C logits.
    CrossEntropy,
    /// `(Φ - y)^2`.
    Mse,
    /// `|Φ - y|^p`, p > 1.
    Lp { p: f64 },
    /// `r^2/2` for `|r| <= delta`, else `delta(|r| - delta/2)`.
    Huber { delta: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Lp { p } if !(p > 1.0) => {
                Err(Error::InvalidConfig(format!("Lp loss needs p > 1, got {p}")))
            }
            LossKind::Huber { delta } if !(delta > 0.0) => {
                Err(Error::InvalidConfig(format!("Huber loss needs delta > 0, got {delta}")))
            }
            _ => Ok(()),
        }
    }

    fn scalar_output(&self) -> bool {
        !matches!(self, LossKind::CrossEntropy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub init: InitScheme,
    pub seed: u64,
    /// Early-stop threshold on the total-loss gradient norm.
    #[serde(default = "default_stop_grad_norm")]
    pub stop_grad_norm: f64,
    /// Trace subsampling period; 0 picks `epochs / 1000`.
    #[serde(default)]
    pub trace_every: usize,
}

fn default_stop_grad_norm() -> f64 {
    1e-9
}

impl TrainConfig {
    pub fn new(loss: LossKind, learning_rate: f64, epochs: usize, weight_decay: f64, seed: u64) -> Self {
        TrainConfig {
            loss,
            learning_rate,
            epochs,
            weight_decay,
            init: InitScheme::Standard,
            seed,
            stop_grad_norm: default_stop_grad_norm(),
            trace_every: 0,
        }
    }

    /// Full-scale binary regime: lr 0.01 for 10^6 epochs.
    pub fn full_run_binary(loss: LossKind, weight_decay: f64, seed: u64) -> Self {
        TrainConfig::new(loss, 0.01, 1_000_000, weight_decay, seed)
    }

    /// Full-scale multiclass regime: lr 0.5 for 10^6 epochs.
    pub fn full_run_multiclass(weight_decay: f64, seed: u64) -> Self {
        TrainConfig::new(LossKind::CrossEntropy, 0.5, 1_000_000, weight_decay, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("need at least one epoch".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub train_err: f64,
    pub min_margin: f64,
}

/// Subsampled per-epoch diagnostics.
#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub epochs_run: usize,
    pub final_grad_norm: f64,
}

impl TrainTrace {
    /// CSV columns: epoch, loss, grad_norm, train_err, min_margin.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,loss,grad_norm,train_err,min_margin")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.loss, r.grad_norm, r.train_err, r.min_margin)?;
        }
        Ok(())
    }
}

// -- losses ---------------------------------------------------------------

fn scalar_target(label: Label) -> Result<f64> {
    match label {
        Label::Sign(y) => Ok(y),
        Label::Value(v) => Ok(v),
        Label::Class(_) => Err(Error::ArityMismatch(
            "class labels need the cross-entropy loss / a multiclass output".into(),
        )),
    }
}

/// Per-sample loss at a raw model output.
pub fn primal_loss(kind: LossKind, output: &[f64], label: Label) -> Result<f64> {
    kind.validate()?;
    match kind {
        LossKind::CrossEntropy => {
            let c = match label {
                Label::Class(c) => c,
                _ => return Err(Error::ArityMismatch("cross-entropy needs a class label".into())),
            };
            if c >= output.len() {
                return Err(Error::InvalidLabel(format!("class {c} out of range for {} logits", output.len())));
            }
            let mx = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + output.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            Ok(lse - output[c])
        }
        _ => {
            if output.len() != 1 {
                return Err(Error::ArityMismatch(format!(
                    "{kind:?} expects a scalar output, got {} values",
                    output.len()
                )));
            }
            let phi = output[0];
            let y = scalar_target(label)?;
            Ok(match kind {
                LossKind::Bce => {
                    let t = -y * phi;
                    if t > 0.0 {
                        t + (-t).exp().ln_1p()
                    } else {
                        t.exp().ln_1p()
                    }
                }
                LossKind::Mse => (phi - y) * (phi - y),
                LossKind::Lp { p } => (phi - y).abs().powf(p),
                LossKind::Huber { delta } => {
                    let r = (phi - y).abs();
                    if r <= delta {
                        0.5 * r * r
                    } else {
                        delta * (r - 0.5 * delta)
                    }
                }
                LossKind::CrossEntropy => unreachable!(),
            })
        }
    }
}

/// dℓ/dΦ for the scalar-output losses.
pub(crate) fn loss_output_derivative(kind: LossKind, phi: f64, y: f64) -> f64 {
    match kind {
        LossKind::Bce => -y * crate::autodiff::sigmoid(-y * phi),
        LossKind::Mse => 2.0 * (phi - y),
        LossKind::Lp { p } => {
            let r = phi - y;
            p * r.signum() * r.abs().powf(p - 1.0)
        }
        LossKind::Huber { delta } => (phi - y).clamp(-delta, delta),
        LossKind::CrossEntropy => unreachable!("not a scalar-output loss"),
    }
}

/// Appends `sum_i loss_i` over the batch to the tape.
fn build_data_loss(tape: &mut Tape, logits: NodeId, labels: &Labels, kind: LossKind) -> Result<NodeId> {
    let n = tape.shape(logits)[0];
    match kind {
        LossKind::CrossEntropy => {
            let indices = match labels {
                Labels::Class { indices, .. } => Arc::new(indices.clone()),
                _ => return Err(Error::ArityMismatch("cross-entropy needs class labels".into())),
            };
            let lse = tape.row_logsumexp(logits);
            let own = tape.row_select(logits, indices);
            let ce = tape.sub(lse, own);
            Ok(tape.sum(ce))
        }
        _ => {
            let targets: Vec<f64> = (0..n).map(|i| scalar_target(labels.get(i))).collect::<Result<_>>()?;
            if matches!(kind, LossKind::Bce) {
                if let Some(bad) = targets.iter().find(|y| y.abs() != 1.0) {
                    return Err(Error::InvalidLabel(format!("BCE labels must be ±1, got {bad}")));
                }
            }
            let flat = tape.reshape(logits, vec![n]);
            let yc = tape.constant(Tensor::from_slice(&targets));
            Ok(match kind {
                LossKind::Bce => {
                    let z = tape.mul(flat, yc);
                    let nz = tape.neg(z);
                    let sp = tape.softplus(nz);
                    tape.sum(sp)
                }
                LossKind::Mse => {
                    let r = tape.sub(flat, yc);
                    tape.dot(r, r)
                }
                LossKind::Lp { p } => {
                    let r = tape.sub(flat, yc);
                    let lp = tape.pow_abs(r, p);
                    tape.sum(lp)
                }
                LossKind::Huber { delta } => {
                    // huber(r) = c*r - c^2/2 with c = clamp(r, ±delta)
                    let r = tape.sub(flat, yc);
                    let c = tape.clamp(r, -delta, delta);
                    let cr = tape.mul(c, r);
                    let cc = tape.mul(c, c);
                    let half_cc = tape.scale(cc, 0.5);
                    let h = tape.sub(cr, half_cc);
                    tape.sum(h)
                }
                _ => unreachable!(),
            })
        }
    }
}

fn check_arity(spec: &ModelSpec, labels: &Labels, kind: LossKind) -> Result<()> {
    let c = spec.output_dim();
    if kind.scalar_output() {
        if c != 1 {
            return Err(Error::ArityMismatch(format!("{kind:?} expects a scalar-output model, got {c} outputs")));
        }
    } else {
        let classes = labels
            .class_count()
            .ok_or_else(|| Error::ArityMismatch("cross-entropy needs class labels".into()))?;
        if c != classes {
            return Err(Error::ArityMismatch(format!("model has {c} outputs for {classes} classes")));
        }
        if let Labels::Class { indices, .. } = labels {
            if let Some(&bad) = indices.iter().find(|&&i| i >= classes) {
                return Err(Error::InvalidLabel(format!("class index {bad} out of range 0..{classes}")));
            }
        }
    }
    Ok(())
}

// -- margins and errors -----------------------------------------------------

/// Margin at a raw output vector: `y·Φ` for binary labels, `Φ_y − max_{j≠y} Φ_j`
/// for class labels.
pub fn margin_from_output(output: &[f64], label: Label) -> Result<f64> {
    match label {
        Label::Sign(y) => {
            if output.len() != 1 {
                return Err(Error::ArityMismatch(format!(
                    "binary margin expects a scalar output, got {}",
                    output.len()
                )));
            }
            Ok(y * output[0])
        }
        Label::Class(c) => {
            if output.len() < 2 || c >= output.len() {
                return Err(Error::ArityMismatch(format!(
                    "class {c} margin undefined for {} outputs",
                    output.len()
                )));
            }
            let other = output
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != c)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(output[c] - other)
        }
        Label::Value(_) => Err(Error::InvalidLabel("margin undefined for regression targets".into())),
    }
}

/// Margin of one sample under the model.
pub fn margin(spec: &ModelSpec, params: &ParamVector, x: &[f64], label: Label) -> Result<f64> {
    let out = crate::models::forward_one(spec, params, x)?;
    margin_from_output(&out, label)
}

fn classification_error(output: &[f64], label: Label) -> f64 {
    match label {
        Label::Sign(y) => {
            let s = if output[0] > 0.0 { 1.0 } else { -1.0 };
            (s != y) as u8 as f64
        }
        Label::Class(c) => {
            let mut best = 0;
            for j in 1..output.len() {
                if output[j] > output[best] {
                    best = j;
                }
            }
            (best != c) as u8 as f64
        }
        // regression: count a miss when the output is off by 0.5 or more
        Label::Value(v) => ((output[0] - v).abs() >= 0.5) as u8 as f64,
    }
}

fn batch_diagnostics(logits: &Tensor, labels: &Labels) -> (f64, f64) {
    let (n, c) = logits.dims2();
    let mut err = 0.0;
    let mut min_margin = f64::INFINITY;
    for i in 0..n {
        let out = &logits.data()[i * c..(i + 1) * c];
        let label = labels.get(i);
        err += classification_error(out, label);
        let m = margin_from_output(out, label).unwrap_or(f64::NAN);
        if m < min_margin {
            min_margin = m;
        }
    }
    (err / n as f64, min_margin)
}

/// Total regularized loss `Σ_i ℓ_i + wd/2 ||θ||²` and its flattened
/// parameter gradient (exact ReLU backward), evaluated at `params`.
pub fn total_loss_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &Dataset,
    kind: LossKind,
    weight_decay: f64,
) -> Result<(f64, Tensor)> {
    kind.validate()?;
    spec.validate()?;
    check_arity(spec, dataset.labels(), kind)?;
    if weight_decay < 0.0 {
        return Err(Error::InvalidConfig("weight decay must be nonnegative".into()));
    }
    let layout = params.layout().clone();
    let mut tape = Tape::new();
    let x = tape.constant(dataset.x().clone());
    let param_nodes: Vec<NodeId> = params.tensors().into_iter().map(|t| tape.constant(t)).collect();
    let logits = spec.build_forward(&mut tape, x, &param_nodes);
    let data_loss = build_data_loss(&mut tape, logits, dataset.labels(), kind)?;
    let total = if weight_decay > 0.0 {
        let mut sq: Option<NodeId> = None;
        for &p in &param_nodes {
            let d = tape.dot(p, p);
            sq = Some(match sq {
                Some(acc) => tape.add(acc, d),
                None => d,
            });
        }
        let wd = tape.scale(sq.unwrap(), 0.5 * weight_decay);
        tape.add(data_loss, wd)
    } else {
        data_loss
    };
    let grads = tape.gradient(total, &param_nodes, BackwardMode::ExactRelu)?;
    let mut roots = vec![total];
    roots.extend(&grads);
    let values = tape.eval(&[], &roots)?;
    let mut flat = vec![0.0; layout.total];
    for (slot, v) in layout.slots.iter().zip(&values[1..]) {
        flat[slot.offset..slot.offset + slot.count()].copy_from_slice(v.data());
    }
    Ok((values[0].item(), Tensor::from_slice(&flat)))
}

// -- the training loop ----------------------------------------------------

/// Full-batch gradient descent on `sum_i loss_i + wd/2 ||θ||^2`, exact ReLU
/// backward throughout. Stops early once the gradient norm falls below
/// `cfg.stop_grad_norm`; aborts with a diagnostic if the loss turns
/// non-finite.
pub fn train(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ParamVector, TrainTrace)> {
    cfg.validate()?;
    spec.validate()?;
    if dataset.n() == 0 {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    if dataset.d() != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset dimension {} does not match model input {}",
            dataset.d(),
            spec.input_dim()
        )));
    }
    check_arity(spec, dataset.labels(), cfg.loss)?;

    let params = init_params(spec, cfg.init, cfg.seed)?;
    let layout = params.layout().clone();
    let mut tensors = params.tensors();

    // one tape for the whole run; every epoch re-binds the parameter leaves
    let mut tape = Tape::new();
    let x = tape.constant(dataset.x().clone());
    let param_nodes: Vec<NodeId> = layout.slots.iter().map(|s| tape.leaf(s.shape.clone())).collect();
    let logits = spec.build_forward(&mut tape, x, &param_nodes);
    let data_loss = build_data_loss(&mut tape, logits, dataset.labels(), cfg.loss)?;
    let total = if cfg.weight_decay > 0.0 {
        let mut sq: Option<NodeId> = None;
        for &p in &param_nodes {
            let d = tape.dot(p, p);
            sq = Some(match sq {
                Some(acc) => tape.add(acc, d),
                None => d,
            });
        }
        let wd = tape.scale(sq.unwrap(), 0.5 * cfg.weight_decay);
        tape.add(data_loss, wd)
    } else {
        data_loss
    };
    let grads = tape.gradient(total, &param_nodes, BackwardMode::ExactRelu)?;

    let mut roots = vec![total, logits];
    roots.extend(&grads);
    let sched = tape.schedule(&roots);
    let mut ev = Evaluator::new();

    let trace_every = if cfg.trace_every > 0 { cfg.trace_every } else { (cfg.epochs / 1000).max(1) };
    let mut trace = TrainTrace::default();
    let lr = cfg.learning_rate;

    let mut epoch = 0;
    loop {
        let bindings: Vec<(NodeId, &Tensor)> =
            param_nodes.iter().copied().zip(tensors.iter()).collect();
        ev.run(&tape, &sched, &bindings)?;

        let loss = ev.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        let mut sq = 0.0;
        for g in &grads {
            let gv = ev.value(*g);
            sq += gv.dot(gv);
        }
        let grad_norm = sq.sqrt();

        let stop = grad_norm <= cfg.stop_grad_norm || epoch == cfg.epochs;
        if epoch % trace_every == 0 || stop {
            let (train_err, min_margin) = batch_diagnostics(ev.value(logits), dataset.labels());
            trace.rows.push(TraceRow { epoch, loss, grad_norm, train_err, min_margin });
        }
        trace.epochs_run = epoch;
        trace.final_grad_norm = grad_norm;
        if stop {
            break;
        }

        for (t, g) in tensors.iter_mut().zip(&grads) {
            let gv = ev.value(*g);
            for (w, gw) in t.data_mut().iter_mut().zip(gv.iter()) {
                *w -= lr * gw;
            }
        }
        epoch += 1;
    }

    Ok((ParamVector::from_tensors(layout, &tensors), trace))
}

// -- stationarity -------------------------------------------------------

/// Per-sample dual coefficients and the relative residual of the
/// weight-decay stationarity condition.
#[derive(Clone, Debug)]
pub struct StationarityReport {
    /// `||θ − Σ ℓ'_i ∇_θ Φ(x_i; θ)|| / ||θ||`.
    pub residual: f64,
    /// `ℓ'_i = −(1/λ_wd) ∂ℓ/∂Φ` at the model outputs.
    pub coefficients: Vec<f64>,
}

/// Checks how well `θ = Σ ℓ'_i ∇_θ Φ(x_i; θ)` holds on a dataset, with the
/// coefficients computed analytically from the loss derivative and the
/// per-sample gradients via a separate single-sample backward pass. Exact
/// ReLU backward; scalar-output losses only.
pub fn stationarity_residual(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &Dataset,
    kind: LossKind,
    weight_decay: f64,
) -> Result<StationarityReport> {
    if !(weight_decay > 0.0) {
        return Err(Error::UndefinedStationarity(
            "the dual coefficients divide by the weight decay; λ_wd must be positive".into(),
        ));
    }
    if !kind.scalar_output() {
        return Err(Error::ArityMismatch(
            "stationarity coefficients are defined per scalar output; use a scalar-output loss".into(),
        ));
    }
    check_arity(spec, dataset.labels(), kind)?;
    let outputs = network_forward(spec, params, dataset.x())?;

    let n = dataset.n();
    let mut coefficients = Vec::with_capacity(n);
    let mut residual = params.flat().to_vec();
    for i in 0..n {
        let phi = outputs.data()[i];
        let y = scalar_target(dataset.label(i))?;
        // gradient flow stationarity: θ = Σ_i [−(1/λ) ∂ℓ/∂Φ] ∇Φ
        let coeff = -loss_output_derivative(kind, phi, y) / weight_decay;
        if !coeff.is_finite() {
            return Err(Error::NonFinite(format!("dual coefficient of sample {i}")));
        }
        coefficients.push(coeff);
        let g = param_gradient(
            spec,
            params,
            &Tensor::from_slice(dataset.sample(i)),
            Functional::Output { class: 0 },
            BackwardMode::ExactRelu,
        )?;
        for (r, gv) in residual.iter_mut().zip(g.iter()) {
            *r -= coeff * gv;
        }
    }
    let rnorm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(StationarityReport { residual: rnorm / params.norm(), coefficients })
}
