//! Matching candidates to training samples and scoring reconstruction
//! quality.
//!
//! The matching protocol per training sample: rank all candidates by the
//! normalized L2 score, average the leading prefix whose distances stay
//! within `B` times the nearest distance, rescale the average to an image in
//! `[0, 1]`, and score it against the equally rescaled training sample with
//! SSIM. A sample counts as a good reconstruction when SSIM exceeds `tau`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, Label};
use crate::error::{Error, Result};
use crate::models::{network_forward, ModelSpec, ParamVector};
use crate::tensor::Tensor;
use crate::training::{margin_from_output, primal_loss, LossKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SsimWindow {
    /// 11x11 Gaussian window with sigma 1.5 (the reference choice).
    fn default() -> Self {
        SsimWindow { size: 11, sigma: 1.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Aggregation threshold multiplier `B >= 1`.
    pub b_multiplier: f64,
    /// Good-reconstruction SSIM threshold.
    pub tau: f64,
    pub window: SsimWindow,
}

impl AnalysisConfig {
    pub fn mlp_default() -> Self {
        AnalysisConfig { b_multiplier: 1.1, tau: 0.4, window: SsimWindow::default() }
    }

    pub fn conv_default() -> Self {
        AnalysisConfig { b_multiplier: 1.5, tau: 0.4, window: SsimWindow::default() }
    }

    /// B = 1.1 for MLPs, 1.5 for convolutional models.
    pub fn for_spec(spec: &ModelSpec) -> Self {
        if spec.has_conv() {
            Self::conv_default()
        } else {
            Self::mlp_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_multiplier >= 1.0) {
            return Err(Error::InvalidConfig(format!("B must be >= 1, got {}", self.b_multiplier)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.window.size < 2 || !(self.window.sigma > 0.0) {
            return Err(Error::InvalidConfig("SSIM window needs size >= 2 and sigma > 0".into()));
        }
        Ok(())
    }
}

// -- normalized L2 ------------------------------------------------------

fn standardize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len();
    let mu = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok(v.iter().map(|x| (x - mu) / sigma).collect())
}

/// `d(x, y) = ||(x−μ_x)/σ_x − (y−μ_y)/σ_y||²` with the `d−1` variance
/// denominator. Zero exactly when one argument is a positive-affine
/// transform of the other; errors on zero-variance input.
pub fn normalized_l2(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::ShapeMismatch("normalized L2 needs dimension >= 2".into()));
    }
    let sx = standardize(x)?;
    let sy = standardize(y)?;
    Ok(sx.iter().zip(&sy).map(|(a, b)| (a - b) * (a - b)).sum())
}

// -- aggregation --------------------------------------------------------

/// Aggregated reconstruction for one training sample.
#[derive(Clone, Debug)]
pub struct AggregateMatch {
    /// Mean of the `count` nearest candidates, still in data coordinates.
    pub xhat_raw: Vec<f64>,
    /// Size of the `B`-prefix that was averaged.
    pub count: usize,
    /// Distance to the nearest candidate.
    pub nn_distance: f64,
}

fn aggregate_one(sample: &[f64], candidates: &Tensor, b: f64) -> AggregateMatch {
    let (m, d) = candidates.dims2();
    // zero-variance candidates (or samples) never match anything
    let mut order: Vec<(f64, usize)> = (0..m)
        .map(|j| {
            let cand = &candidates.data()[j * d..(j + 1) * d];
            (normalized_l2(sample, cand).unwrap_or(f64::INFINITY), j)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let nn_distance = order[0].0;
    let count = if nn_distance.is_finite() {
        order.iter().take_while(|(dist, _)| *dist <= b * nn_distance).count().max(1)
    } else {
        1
    };
    let mut xhat = vec![0.0; d];
    for &(_, j) in order.iter().take(count) {
        for (acc, v) in xhat.iter_mut().zip(&candidates.data()[j * d..(j + 1) * d]) {
            *acc += v;
        }
    }
    for v in &mut xhat {
        *v /= count as f64;
    }
    AggregateMatch { xhat_raw: xhat, count, nn_distance }
}

/// Nearest-candidate aggregation for every training sample. Candidates are
/// ranked by normalized L2 (stable on ties by candidate index) and the
/// prefix within `B` times the nearest distance is averaged.
pub fn aggregate_matches(train: &Dataset, candidates: &Tensor, b: f64) -> Result<Vec<AggregateMatch>> {
    if candidates.rank() != 2 || candidates.shape()[1] != train.d() {
        return Err(Error::ShapeMismatch(format!(
            "candidates of shape {:?} against d = {}",
            candidates.shape(),
            train.d()
        )));
    }
    if candidates.shape()[0] == 0 {
        return Err(Error::InvalidConfig("no candidates to match".into()));
    }
    if !(b >= 1.0) {
        return Err(Error::InvalidConfig(format!("B must be >= 1, got {b}")));
    }
    Ok((0..train.n())
        .into_par_iter()
        .map(|i| aggregate_one(train.sample(i), candidates, b))
        .collect())
}

/// Adds the stored mean back and stretches min/max linearly onto `[0, 1]`;
/// a constant result maps to all 0.5.
pub fn rescale_to_image(xhat_raw: &[f64], mean_image: &[f64]) -> Vec<f64> {
    assert_eq!(xhat_raw.len(), mean_image.len(), "shape mismatch");
    let v: Vec<f64> = xhat_raw.iter().zip(mean_image).map(|(a, m)| a + m).collect();
    let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == mn {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - mn) / (mx - mn)).collect()
}

// -- SSIM ---------------------------------------------------------------

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Valid-window separable Gaussian filter: `[h, w] -> [h-size+1, w-size+1]`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let size = k.len();
    let ow = w - size + 1;
    let oh = h - size + 1;
    // horizontal pass over all rows
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (dx, &kv) in k.iter().enumerate() {
                acc += kv * img[i * w + j + dx];
            }
            tmp[i * ow + j] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (dy, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(i + dy) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// Mean structural similarity over sliding Gaussian windows, dynamic range
/// 1, `K1 = 0.01`, `K2 = 0.03`. Multi-channel images average the per-channel
/// scores. Both images are `[c, h, w]` in `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor, window: &SsimWindow) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("ssim inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("ssim expects [c, h, w] images, got {:?}", a.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let size = window.size;
    if h < size || w < size {
        return Err(Error::InvalidConfig(format!(
            "image {h}x{w} is smaller than the {size}x{size} SSIM window"
        )));
    }
    let k = gaussian_kernel(size, window.sigma);
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();

        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let m_aa = filter_valid(&sq_a, h, w, &k);
        let m_bb = filter_valid(&sq_b, h, w, &k);
        let m_ab = filter_valid(&ab, h, w, &k);

        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

// -- report ------------------------------------------------------------------

/// X-axis of the quality scatter: margin for classifiers, per-sample loss
/// for regression models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ReportAxis {
    Margin,
    Loss(LossKind),
}

#[derive(Clone, Debug)]
pub struct MatchRow {
    pub sample_id: usize,
    pub label: Label,
    pub axis_value: f64,
    pub nn_distance: f64,
    pub candidate_count: usize,
    pub ssim: f64,
    pub good: bool,
}

#[derive(Clone, Debug)]
pub struct MatchReport {
    pub rows: Vec<MatchRow>,
    pub tau: f64,
    pub good_count: usize,
    pub axis: ReportAxis,
}

fn label_text(label: Label) -> String {
    match label {
        Label::Sign(y) => {
            if y > 0.0 {
                "+1".into()
            } else {
                "-1".into()
            }
        }
        Label::Class(c) => c.to_string(),
        Label::Value(v) => format!("{v}"),
    }
}

impl MatchReport {
    /// CSV columns: sample_id, label, axis_value, nn_distance, c, ssim, good.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "sample_id,label,axis_value,nn_distance,c,ssim,good")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.sample_id,
                label_text(r.label),
                r.axis_value,
                r.nn_distance,
                r.candidate_count,
                r.ssim,
                r.good
            )?;
        }
        Ok(())
    }

    /// Standalone scatter of quality against the margin/loss coordinate,
    /// with a horizontal line at the good-reconstruction threshold.
    pub fn to_scatter_svg(&self) -> String {
        let (width, height, ml, mb) = (640.0, 440.0, 60.0, 50.0);
        let (pw, ph) = (width - ml - 20.0, height - mb - 20.0);
        let finite: Vec<f64> = self.rows.iter().map(|r| r.axis_value).filter(|v| v.is_finite()).collect();
        let (mut x0, mut x1) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !x0.is_finite() || x0 == x1 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        let pad = 0.05 * (x1 - x0);
        let (x0, x1) = (x0 - pad, x1 + pad);
        let (y0, y1) = (-0.05f64, 1.05f64);
        let sx = |v: f64| ml + (v - x0) / (x1 - x0) * pw;
        let sy = |v: f64| 20.0 + (y1 - v) / (y1 - y0) * ph;

        let mut s = String::new();
        s.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
        ));
        s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        // axes
        s.push_str(&format!(
            "<line x1=\"{:.4}\" y1=\"{:.4}\" x2=\"{:.4}\" y2=\"{:.4}\" stroke=\"black\"/>\n",
            ml,
            sy(y0),
            ml + pw,
            sy(y0)
        ));
        s.push_str(&format!(
            "<line x1=\"{:.4}\" y1=\"{:.4}\" x2=\"{:.4}\" y2=\"{:.4}\" stroke=\"black\"/>\n",
            ml,
            sy(y0),
            ml,
            sy(y1)
        ));
        let axis_name = match self.axis {
            ReportAxis::Margin => "margin",
            ReportAxis::Loss(_) => "per-sample loss",
        };
        s.push_str(&format!(
            "<text x=\"{:.4}\" y=\"{:.4}\" font-size=\"14\" text-anchor=\"middle\">{axis_name}</text>\n",
            ml + pw / 2.0,
            height - 10.0
        ));
        s.push_str(&format!(
            "<text x=\"16\" y=\"{:.4}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.4})\">ssim</text>\n",
            20.0 + ph / 2.0,
            20.0 + ph / 2.0
        ));
        // threshold line
        s.push_str(&format!(
            "<line x1=\"{:.4}\" y1=\"{:.4}\" x2=\"{:.4}\" y2=\"{:.4}\" stroke=\"gray\" stroke-dasharray=\"6 3\"/>\n",
            ml,
            sy(self.tau),
            ml + pw,
            sy(self.tau)
        ));
        s.push_str(&format!(
            "<text x=\"{:.4}\" y=\"{:.4}\" font-size=\"12\" fill=\"gray\">tau = {}</text>\n",
            ml + pw - 70.0,
            sy(self.tau) - 5.0,
            self.tau
        ));
        for r in &self.rows {
            if !r.axis_value.is_finite() {
                continue;
            }
            let color = if r.good { "#1f77b4" } else { "#d62728" };
            s.push_str(&format!(
                "<circle cx=\"{:.4}\" cy=\"{:.4}\" r=\"3.5\" fill=\"{color}\" fill-opacity=\"0.75\"/>\n",
                sx(r.axis_value),
                sy(r.ssim)
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Full matching pipeline: aggregate candidates per training sample,
/// rescale both sides to `[0, 1]` images, score with SSIM, and attach the
/// margin or per-sample loss coordinate.
pub fn build_report(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    candidates: &Tensor,
    cfg: &AnalysisConfig,
    axis: ReportAxis,
) -> Result<MatchReport> {
    cfg.validate()?;
    if let ReportAxis::Loss(kind) = axis {
        kind.validate()?;
    }
    let matches = aggregate_matches(train, candidates, cfg.b_multiplier)?;
    let outputs = network_forward(spec, params, train.x())?;
    let c_out = outputs.shape()[1];
    let (c, h, w) = train.image_shape();

    let rows: Vec<MatchRow> = (0..train.n())
        .into_par_iter()
        .map(|i| -> Result<MatchRow> {
            let label = train.label(i);
            let out = &outputs.data()[i * c_out..(i + 1) * c_out];
            let axis_value = match axis {
                ReportAxis::Margin => margin_from_output(out, label)?,
                ReportAxis::Loss(kind) => primal_loss(kind, out, label)?,
            };
            let m = &matches[i];
            let rec = Tensor::new(vec![c, h, w], rescale_to_image(&m.xhat_raw, train.mean_image()));
            let orig = Tensor::new(vec![c, h, w], rescale_to_image(train.sample(i), train.mean_image()));
            let score = ssim(&orig, &rec, &cfg.window)?;
            Ok(MatchRow {
                sample_id: i,
                label,
                axis_value,
                nn_distance: m.nn_distance,
                candidate_count: m.count,
                ssim: score,
                good: score > cfg.tau,
            })
        })
        .collect::<Result<_>>()?;

    let good_count = rows.iter().filter(|r| r.good).count();
    Ok(MatchReport { rows, tau: cfg.tau, good_count, axis })
}
