//! The group level: domain weights `q`, the exterior penalty on their
//! feasibility, and the constraint surrogate `h = |q - phi(theta, delta)|`
//! where `phi` is one linearized ascent step of the inner weighting problem.
//!
//! `phi` is built from a [`LinearizationAnchor`] holding the per-domain
//! contrastive losses and their Jacobians at `(theta_bar, delta_bar)`. With
//! the anchor fixed, `phi` is affine in `(theta, delta)`, so `h` is convex.

use serde::{Deserialize, Serialize};

use crate::diffmodel::EncoderParams;
use crate::error::{check_len, Result, TtsoError};
use crate::linalg::{axpy, dot, norm, sub};
use crate::losses::{contrastive_loss, DomainBatch};
use crate::perturb::AscentTrajectory;

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // re-normalize the rounding residue onto the support
    let s: f64 = out.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 0.0 {
        let support = out.iter().filter(|&&x| x > 0.0).count() as f64;
        let fix = (1.0 - s) / support;
        for x in out.iter_mut().filter(|x| **x > 0.0) {
            *x = (*x + fix).max(0.0);
        }
    }
    out
}

pub fn euclid_dist(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len("distance operands", p.len(), q.len())?;
    Ok(norm(&sub(p, q)))
}

pub fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Weights and switches of the group-feasibility penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct P2Config {
    /// `(lambda1, lambda2, lambda3, lambda4)`: simplex sum, negativity hinge,
    /// ascent-trajectory consistency, prior-ball radius.
    pub lambdas: [f64; 4],
    /// Radius of the ball around the prior `p`.
    pub tau: f64,
    pub tau_term: bool,
    /// Square the negativity hinge instead of keeping it linear.
    pub squared_hinge: bool,
}

impl Default for P2Config {
    fn default() -> Self {
        Self {
            lambdas: [1.0, 1.0, 0.1, 1.0],
            tau: 0.3,
            tau_term: true,
            squared_hinge: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct P2Value {
    pub value: f64,
    pub grad_q: Vec<f64>,
    pub grad_delta: Vec<f64>,
}

/// `lambda1 (sum q - 1)^2 + lambda2 sum max(0, -q_i)
///  + lambda3 |delta - delta0 - S(q)|^2 + lambda4 max(0, |p - q| - tau)^2`
/// where `S(q)` is the trajectory's accumulated ascent re-weighted by `q`.
///
/// Kinks take the zero subgradient.
pub fn p2_penalty(q: &[f64], delta: &[f64], traj: &AscentTrajectory, cfg: &P2Config, prior: &[f64]) -> Result<P2Value> {
    let k = q.len();
    check_len("prior", k, prior.len())?;
    check_len("trajectory start", delta.len(), traj.delta0.len())?;
    check_len("trajectory domains", k, traj.domain_sums.len())?;
    let [l1, l2, l3, l4] = cfg.lambdas;
    let mut grad_q = vec![0.0; k];
    let mut value = 0.0;

    let excess = q.iter().sum::<f64>() - 1.0;
    value += l1 * excess * excess;
    grad_q.iter_mut().for_each(|g| *g += 2.0 * l1 * excess);

    for (g, &qi) in grad_q.iter_mut().zip(q) {
        if qi < 0.0 {
            if cfg.squared_hinge {
                value += l2 * qi * qi;
                *g += 2.0 * l2 * qi;
            } else {
                value -= l2 * qi;
                *g -= l2;
            }
        }
    }

    let s = traj.sum_at(q);
    let resid: Vec<f64> = delta
        .iter()
        .zip(&traj.delta0)
        .zip(&s)
        .map(|((d, d0), si)| d - d0 - si)
        .collect();
    value += l3 * crate::linalg::norm_sq(&resid);
    let grad_delta: Vec<f64> = resid.iter().map(|r| 2.0 * l3 * r).collect();
    for (g, row) in grad_q.iter_mut().zip(&traj.domain_sums) {
        *g -= 2.0 * l3 * dot(row, &resid);
    }

    if cfg.tau_term {
        let diff = sub(q, prior);
        let dist = norm(&diff);
        let over = dist - cfg.tau;
        if over > 0.0 {
            value += l4 * over * over;
            axpy(2.0 * l4 * over / dist, &diff, &mut grad_q);
        }
    }
    Ok(P2Value {
        value,
        grad_q,
        grad_delta,
    })
}

/// Direction of the single inner step taken by `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerStepSign {
    /// `phi = q0 + eta grad f2`, matching the inner maximization.
    Ascent,
    /// `phi = q0 - eta grad f2`.
    Descent,
}

impl InnerStepSign {
    pub fn factor(self) -> f64 {
        match self {
            InnerStepSign::Ascent => 1.0,
            InnerStepSign::Descent => -1.0,
        }
    }
}

/// First-order expansion point of the inner objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizationAnchor {
    pub theta_bar: Vec<f64>,
    pub delta_bar: Vec<f64>,
    /// Per-domain contrastive loss at the anchor.
    pub loss_bar: Vec<f64>,
    /// `K x N` row-major, row `i` = d loss_i / d theta.
    pub j_theta: Vec<f64>,
    /// `K x D` row-major, row `i` = d loss_i / d delta.
    pub j_delta: Vec<f64>,
    pub q0: Vec<f64>,
    pub eta_q: f64,
    pub sign: InnerStepSign,
    pub prior: Vec<f64>,
    pub p2: P2Config,
    pub traj: AscentTrajectory,
}

/// `h` and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct HValue {
    pub h: f64,
    pub grad_theta: Vec<f64>,
    pub grad_q: Vec<f64>,
    pub grad_delta: Vec<f64>,
}

/// Settings shared by every anchor of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSpec {
    pub q0: Vec<f64>,
    pub eta_q: f64,
    pub sign: InnerStepSign,
    pub prior: Vec<f64>,
    pub p2: P2Config,
    pub lambda_con: f64,
}

/// Evaluate per-domain contrastive losses and Jacobians at the current point.
pub fn build_anchor(
    params: &EncoderParams,
    delta: &[f64],
    domains: &[DomainBatch],
    traj: AscentTrajectory,
    spec: &AnchorSpec,
) -> Result<LinearizationAnchor> {
    if domains.is_empty() {
        return Err(TtsoError::Input("anchor needs at least one domain".into()));
    }
    let k = domains.len();
    check_len("anchor q0", k, spec.q0.len())?;
    let n = params.n_params();
    let d = delta.len();
    let mut loss_bar = Vec::with_capacity(k);
    let mut j_theta = Vec::with_capacity(k * n);
    let mut j_delta = Vec::with_capacity(k * d);
    for dom in domains {
        let l = contrastive_loss(params, &dom.windows, delta, &dom.aug, spec.lambda_con)?;
        loss_bar.push(l.value);
        j_theta.extend_from_slice(&l.grad_theta);
        j_delta.extend_from_slice(&l.grad_delta);
    }
    Ok(LinearizationAnchor {
        theta_bar: params.theta.clone(),
        delta_bar: delta.to_vec(),
        loss_bar,
        j_theta,
        j_delta,
        q0: spec.q0.clone(),
        eta_q: spec.eta_q,
        sign: spec.sign,
        prior: spec.prior.clone(),
        p2: spec.p2,
        traj,
    })
}

impl LinearizationAnchor {
    pub fn n_groups(&self) -> usize {
        self.loss_bar.len()
    }

    pub fn n_theta(&self) -> usize {
        self.theta_bar.len()
    }

    pub fn n_delta(&self) -> usize {
        self.delta_bar.len()
    }

    fn check(&self, theta: &[f64], delta: &[f64]) -> Result<()> {
        check_len("phi theta", self.n_theta(), theta.len())?;
        check_len("phi delta", self.n_delta(), delta.len())
    }

    /// `phi(theta, delta) = q0 +/- eta_q (loss_bar + J_theta (theta - theta_bar)
    ///  + J_delta (delta - delta_bar) - grad_q P2(q0, delta))`.
    pub fn phi(&self, theta: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta, delta)?;
        let (k, n, d) = (self.n_groups(), self.n_theta(), self.n_delta());
        let dt = sub(theta, &self.theta_bar);
        let dd = sub(delta, &self.delta_bar);
        let p2 = p2_penalty(&self.q0, delta, &self.traj, &self.p2, &self.prior)?;
        let step = self.sign.factor() * self.eta_q;
        Ok((0..k)
            .map(|i| {
                let grad_f2 = self.loss_bar[i]
                    + dot(&self.j_theta[i * n..(i + 1) * n], &dt)
                    + dot(&self.j_delta[i * d..(i + 1) * d], &dd)
                    - p2.grad_q[i];
                self.q0[i] + step * grad_f2
            })
            .collect())
    }

    /// `h = |q - phi(theta, delta)|` with gradients; all-zero subgradient at `h = 0`.
    pub fn h_value_grads(&self, theta: &[f64], q: &[f64], delta: &[f64]) -> Result<HValue> {
        check_len("h q", self.n_groups(), q.len())?;
        let phi = self.phi(theta, delta)?;
        let (k, n, d) = (self.n_groups(), self.n_theta(), self.n_delta());
        let r = sub(q, &phi);
        let h = norm(&r);
        let mut out = HValue {
            h,
            grad_theta: vec![0.0; n],
            grad_q: vec![0.0; k],
            grad_delta: vec![0.0; d],
        };
        if h == 0.0 {
            return Ok(out);
        }
        let u: Vec<f64> = r.iter().map(|v| v / h).collect();
        out.grad_q.clone_from(&u);
        let c = -self.sign.factor() * self.eta_q;
        let l3 = self.p2.lambdas[2];
        for i in 0..k {
            axpy(c * u[i], &self.j_theta[i * n..(i + 1) * n], &mut out.grad_theta);
            axpy(c * u[i], &self.j_delta[i * d..(i + 1) * d], &mut out.grad_delta);
            // d/d delta of -grad_q_i P2 through the trajectory term
            axpy(c * u[i] * 2.0 * l3, &self.traj.domain_sums[i], &mut out.grad_delta);
        }
        Ok(out)
    }

    pub fn h(&self, theta: &[f64], q: &[f64], delta: &[f64]) -> Result<f64> {
        let phi = self.phi(theta, delta)?;
        check_len("h q", phi.len(), q.len())?;
        Ok(norm(&sub(q, &phi)))
    }
}
