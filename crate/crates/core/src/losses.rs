//! Contrastive losses and their gradients with respect to the encoder
//! parameters and the shared additive perturbation `delta`.
//!
//! Two views of every window are compared: view A is `x + delta` and view B
//! is `x + t_a`, where `t_a` is the additive template of an augmentation.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmodel::EncoderParams;
use crate::error::{check_len, Result, TtsoError};
use crate::linalg::{axpy, norm_sq};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    /// Independent Gaussian noise on every entry.
    Jitter,
    /// Per-feature linear ramp across the window (first-order gain drift).
    Scale,
    /// Per-feature constant offset.
    Shift,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, magnitude: f64, seed: u64) -> Self {
        Self { kind, magnitude, seed }
    }

    /// The additive template `t_a` for a `window_len x n_features` window.
    pub fn template(&self, window_len: usize, n_features: usize) -> Vec<f64> {
        let mut r = rng::stream(self.seed, "augmentation", &[self.kind as u64]);
        let m = self.magnitude;
        let mut out = vec![0.0; window_len * n_features];
        match self.kind {
            AugmentationKind::Jitter => {
                for v in &mut out {
                    let z: f64 = r.sample(StandardNormal);
                    *v = m * z;
                }
            }
            AugmentationKind::Shift => {
                let g: Vec<f64> = (0..n_features).map(|_| r.sample(StandardNormal)).collect();
                for t in 0..window_len {
                    for f in 0..n_features {
                        out[t * n_features + f] = m * g[f];
                    }
                }
            }
            AugmentationKind::Scale => {
                let g: Vec<f64> = (0..n_features).map(|_| r.sample(StandardNormal)).collect();
                let denom = (window_len.max(2) - 1) as f64;
                for t in 0..window_len {
                    let ramp = 2.0 * t as f64 / denom - 1.0;
                    for f in 0..n_features {
                        out[t * n_features + f] = m * g[f] * ramp;
                    }
                }
            }
        }
        out
    }
}

/// One domain's minibatch together with the augmentation that produces its
/// second view.
#[derive(Clone, Debug)]
pub struct DomainBatch<'a> {
    pub windows: Vec<&'a [f64]>,
    pub aug: AugmentationSpec,
}

impl<'a> DomainBatch<'a> {
    pub fn new(windows: Vec<&'a [f64]>, aug: AugmentationSpec) -> Self {
        Self { windows, aug }
    }
}

/// A loss value with its gradient blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grad_theta: Vec<f64>,
    pub grad_delta: Vec<f64>,
}

impl LossValueGrad {
    pub fn zeros(n_theta: usize, n_delta: usize) -> Self {
        Self {
            value: 0.0,
            grad_theta: vec![0.0; n_theta],
            grad_delta: vec![0.0; n_delta],
        }
    }

    /// `self += w * other`
    pub fn add_scaled(&mut self, w: f64, other: &LossValueGrad) {
        self.value += w * other.value;
        axpy(w, &other.grad_theta, &mut self.grad_theta);
        axpy(w, &other.grad_delta, &mut self.grad_delta);
    }
}

fn shifted(x: &[f64], d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + b).collect()
}

fn check_batch<W: AsRef<[f64]>>(params: &EncoderParams, batch: &[W], delta: &[f64]) -> Result<()> {
    let d = params.arch.input_len();
    check_len("perturbation delta", d, delta.len())?;
    for w in batch {
        check_len("batch window", d, w.as_ref().len())?;
    }
    if !crate::linalg::all_finite(delta) {
        return Err(TtsoError::Input("perturbation has non-finite entries".into()));
    }
    Ok(())
}

/// Shared evaluation of `w_align * l_align + w_reg * l_reg`. A zero weight
/// skips its term entirely.
fn combined<W: AsRef<[f64]>>(
    params: &EncoderParams,
    batch: &[W],
    delta: &[f64],
    aug: &AugmentationSpec,
    w_align: f64,
    w_reg: f64,
) -> Result<LossValueGrad> {
    check_batch(params, batch, delta)?;
    let a = &params.arch;
    let b = batch.len();
    let template = aug.template(a.window_len, a.n_features);
    let mut out = LossValueGrad::zeros(params.n_params(), delta.len());

    let views_a: Vec<Vec<f64>> = batch.iter().map(|x| shifted(x.as_ref(), delta)).collect();
    let fwd_a: Vec<_> = views_a.iter().map(|v| params.forward_cached(v)).collect();
    let mut up_a: Vec<Vec<f64>> = vec![vec![0.0; a.repr_dim]; b];

    if w_align != 0.0 {
        let inv_b = 1.0 / b as f64;
        let mut align = 0.0;
        for (i, x) in batch.iter().enumerate() {
            let view_b = shifted(x.as_ref(), &template);
            let (rb, cache_b) = params.forward_cached(&view_b);
            let diff: Vec<f64> = fwd_a[i].0.iter().zip(&rb).map(|(p, q)| p - q).collect();
            align += norm_sq(&diff);
            axpy(2.0 * w_align * inv_b, &diff, &mut up_a[i]);
            let up_b: Vec<f64> = diff.iter().map(|v| -2.0 * w_align * inv_b * v).collect();
            params.backward_cached(&view_b, &cache_b, &up_b, &mut out.grad_theta, None);
        }
        out.value += w_align * align * inv_b;
    }

    if w_reg != 0.0 {
        let pairs = (b * (b - 1) / 2) as f64;
        let mut reg = 0.0;
        for i in 0..b {
            for j in (i + 1)..b {
                let diff: Vec<f64> = fwd_a[i].0.iter().zip(&fwd_a[j].0).map(|(p, q)| p - q).collect();
                let e = (-norm_sq(&diff)).exp();
                reg += e;
                let c = -2.0 * w_reg * e / pairs;
                axpy(c, &diff, &mut up_a[i]);
                axpy(-c, &diff, &mut up_a[j]);
            }
        }
        out.value += w_reg * reg / pairs;
    }

    for (i, v) in views_a.iter().enumerate() {
        params.backward_cached(v, &fwd_a[i].1, &up_a[i], &mut out.grad_theta, Some(&mut out.grad_delta));
    }
    Ok(out)
}

/// Mean squared representation distance between `x + delta` and `x + t_a`.
pub fn alignment_loss<W: AsRef<[f64]>>(
    params: &EncoderParams,
    batch: &[W],
    delta: &[f64],
    aug: &AugmentationSpec,
) -> Result<LossValueGrad> {
    if batch.is_empty() {
        return Err(TtsoError::Input("alignment loss needs a nonempty batch".into()));
    }
    combined(params, batch, delta, aug, 1.0, 0.0)
}

/// Pairwise Gaussian uniformity term `mean_{i<j} exp(-|R_i - R_j|^2)` on the
/// `x + delta` view. Large values mean collapsed representations.
pub fn reg_loss<W: AsRef<[f64]>>(
    params: &EncoderParams,
    batch: &[W],
    delta: &[f64],
    aug: &AugmentationSpec,
) -> Result<LossValueGrad> {
    if batch.len() < 2 {
        return Err(TtsoError::Input(format!(
            "uniformity regularizer needs at least 2 windows, got {}",
            batch.len()
        )));
    }
    combined(params, batch, delta, aug, 0.0, 1.0)
}

/// `alignment_loss + lambda * reg_loss`.
pub fn contrastive_loss<W: AsRef<[f64]>>(
    params: &EncoderParams,
    batch: &[W],
    delta: &[f64],
    aug: &AugmentationSpec,
    lambda: f64,
) -> Result<LossValueGrad> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(TtsoError::Input(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return alignment_loss(params, batch, delta, aug);
    }
    if batch.len() < 2 {
        return Err(TtsoError::Input(format!(
            "contrastive loss with lambda > 0 needs at least 2 windows, got {}",
            batch.len()
        )));
    }
    combined(params, batch, delta, aug, 1.0, lambda)
}

/// Worst-case alignment over a finite augmentation set:
/// `mean_x max_{(a, a')} |r(a(x)) - r(a'(x))|^2`.
pub fn ar_loss_estimate<W: AsRef<[f64]>>(
    params: &EncoderParams,
    batch: &[W],
    aug_set: &[AugmentationSpec],
) -> Result<f64> {
    if aug_set.is_empty() {
        return Err(TtsoError::Input("augmentation set is empty".into()));
    }
    if batch.is_empty() {
        return Err(TtsoError::Input("robust alignment needs a nonempty batch".into()));
    }
    let a = &params.arch;
    let templates: Vec<Vec<f64>> = aug_set.iter().map(|s| s.template(a.window_len, a.n_features)).collect();
    let mut total = 0.0;
    for x in batch {
        let x = x.as_ref();
        check_len("batch window", a.input_len(), x.len())?;
        let reprs = templates
            .iter()
            .map(|t| params.forward(&shifted(x, t)))
            .collect::<Result<Vec<_>>>()?;
        let mut worst: f64 = 0.0;
        for (i, ri) in reprs.iter().enumerate() {
            // the distance is symmetric, so unordered pairs cover all ordered ones
            for rj in &reprs[i + 1..] {
                let d: f64 = ri.iter().zip(rj).map(|(p, q)| (p - q) * (p - q)).sum();
                worst = worst.max(d);
            }
        }
        total += worst;
    }
    Ok(total / batch.len() as f64)
}

/// Softmax cross-entropy: returns `(-log softmax(logits)[label], softmax - onehot)`.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(TtsoError::Input(format!(
            "need at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(TtsoError::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let value = z.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((value, grad))
}
