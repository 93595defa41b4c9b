//! Worst-case input perturbations.
//!
//! The perturbation `delta` is one additive template shared by every window
//! of every domain. In the default mode it is the deterministic image of a
//! diagonal Gaussian mixture under frozen base noise,
//! `delta = sum_m pi_m (mu_m + sigma_m * eps_m)`, and every gradient with
//! respect to `delta` is pulled back onto `(pi, mu, sigma)`. In direct mode
//! `delta` is a free vector.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmodel::EncoderParams;
use crate::error::{check_len, Result, TtsoError};
use crate::linalg::{all_finite, axpy, norm};
use crate::losses::{alignment_loss, DomainBatch};
use crate::rng;

/// Lower clamp applied to every component scale after each update.
pub const SIGMA_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    GmmReparam,
    Direct,
}

/// Mixture parameters. `mu`, `sigma` and `base_noise` are row-major
/// `n_components x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub base_noise: Vec<f64>,
    pub dim: usize,
}

/// Gradient (or update direction) over the mixture parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmGrad {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GmmGrad {
    pub fn zeros_like(g: &GmmParams) -> Self {
        Self {
            pi: vec![0.0; g.pi.len()],
            mu: vec![0.0; g.mu.len()],
            sigma: vec![0.0; g.sigma.len()],
        }
    }

    pub fn norm_sq(&self) -> f64 {
        crate::linalg::norm_sq(&self.pi) + crate::linalg::norm_sq(&self.mu) + crate::linalg::norm_sq(&self.sigma)
    }

    fn is_finite(&self) -> bool {
        all_finite(&self.pi) && all_finite(&self.mu) && all_finite(&self.sigma)
    }
}

impl GmmParams {
    pub fn new(pi: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>, base_noise: Vec<f64>, dim: usize) -> Result<Self> {
        let m = pi.len();
        if m == 0 || dim == 0 {
            return Err(TtsoError::Config(
                "mixture needs at least one component and dim > 0".into(),
            ));
        }
        check_len("mixture means", m * dim, mu.len())?;
        check_len("mixture scales", m * dim, sigma.len())?;
        check_len("mixture base noise", m * dim, base_noise.len())?;
        let mut g = Self {
            pi,
            mu,
            sigma,
            base_noise,
            dim,
        };
        if !(all_finite(&g.pi) && all_finite(&g.mu) && all_finite(&g.sigma) && all_finite(&g.base_noise)) {
            return Err(TtsoError::Input("mixture parameters must be finite".into()));
        }
        g.clamp_sigma();
        Ok(g)
    }

    /// Uniform weights, zero means, constant scale and seeded base noise.
    pub fn init(n_components: usize, dim: usize, init_sigma: f64, seed: u64) -> Result<Self> {
        let m = n_components;
        let mut g = Self::new(
            vec![1.0 / m.max(1) as f64; m],
            vec![0.0; m * dim],
            vec![init_sigma; m * dim],
            vec![0.0; m * dim],
            dim,
        )?;
        g.refresh_noise(seed, 0);
        Ok(g)
    }

    pub fn n_components(&self) -> usize {
        self.pi.len()
    }

    /// Redraw the frozen standard-normal base noise for outer iteration `epoch`.
    pub fn refresh_noise(&mut self, seed: u64, epoch: u64) {
        let mut r = rng::stream(seed, "gmm-base-noise", &[epoch]);
        for v in &mut self.base_noise {
            *v = StandardNormal.sample(&mut r);
        }
    }

    pub fn clamp_sigma(&mut self) {
        for s in &mut self.sigma {
            if *s < SIGMA_MIN {
                *s = SIGMA_MIN;
            }
        }
    }

    /// `delta = sum_m pi_m (mu_m + sigma_m * eps_m)`.
    pub fn derive_delta(&self) -> Vec<f64> {
        let d = self.dim;
        let mut delta = vec![0.0; d];
        for (m, &p) in self.pi.iter().enumerate() {
            for j in 0..d {
                let k = m * d + j;
                delta[j] += p * (self.mu[k] + self.sigma[k] * self.base_noise[k]);
            }
        }
        delta
    }

    /// Chain rule through [`Self::derive_delta`] for an upstream `d/d delta`.
    pub fn pullback(&self, g_delta: &[f64]) -> GmmGrad {
        let d = self.dim;
        let mut out = GmmGrad::zeros_like(self);
        for (m, &p) in self.pi.iter().enumerate() {
            let mut gp = 0.0;
            for j in 0..d {
                let k = m * d + j;
                let g = g_delta[j];
                gp += g * (self.mu[k] + self.sigma[k] * self.base_noise[k]);
                out.mu[k] = p * g;
                out.sigma[k] = p * g * self.base_noise[k];
            }
            out.pi[m] = gp;
        }
        out
    }

    /// `self += step * dir`, then clamp the scales.
    pub fn step(&mut self, dir: &GmmGrad, step: f64) {
        axpy(step, &dir.pi, &mut self.pi);
        axpy(step, &dir.mu, &mut self.mu);
        axpy(step, &dir.sigma, &mut self.sigma);
        self.clamp_sigma();
    }
}

/// Bounds and penalty weights of the mixture-feasibility penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct P3Config {
    pub c1: f64,
    pub c2: f64,
    pub rho: [f64; 4],
}

/// Exterior penalty on the mixture constraints:
/// `rho1 max(0,|mu|-C1)^2 + rho2 max(0,|sigma|-C2)^2 + rho3 (sum pi - 1)^2
///  + rho4 sum_m max(0,-pi_m)^2`, with Frobenius norms.
pub fn p3_penalty(gmm: &GmmParams, cfg: &P3Config) -> (f64, GmmGrad) {
    let [r1, r2, r3, r4] = cfg.rho;
    let mut g = GmmGrad::zeros_like(gmm);
    let mut value = 0.0;

    let mu_norm = norm(&gmm.mu);
    let over = mu_norm - cfg.c1;
    if over > 0.0 {
        value += r1 * over * over;
        axpy(2.0 * r1 * over / mu_norm, &gmm.mu, &mut g.mu);
    }
    let sig_norm = norm(&gmm.sigma);
    let over = sig_norm - cfg.c2;
    if over > 0.0 {
        value += r2 * over * over;
        axpy(2.0 * r2 * over / sig_norm, &gmm.sigma, &mut g.sigma);
    }
    let excess = gmm.pi.iter().sum::<f64>() - 1.0;
    value += r3 * excess * excess;
    for (gi, &p) in g.pi.iter_mut().zip(&gmm.pi) {
        *gi += 2.0 * r3 * excess;
        if p < 0.0 {
            value += r4 * p * p;
            *gi += 2.0 * r4 * p;
        }
    }
    (value, g)
}

/// Direct-mode penalty `rho1 max(0, |delta| - C1 - C2)^2` and its gradient.
pub fn p3_direct(delta: &[f64], cfg: &P3Config) -> (f64, Vec<f64>) {
    let n = norm(delta);
    let over = n - cfg.c1 - cfg.c2;
    let mut g = vec![0.0; delta.len()];
    if over > 0.0 {
        axpy(2.0 * cfg.rho[0] * over / n, delta, &mut g);
        (cfg.rho[0] * over * over, g)
    } else {
        (0.0, g)
    }
}

/// The perturbation block of the solver state.
#[derive(Clone, Debug, PartialEq)]
pub enum DeltaState {
    Gmm(GmmParams),
    Direct(Vec<f64>),
}

impl DeltaState {
    pub fn delta(&self) -> Vec<f64> {
        match self {
            DeltaState::Gmm(g) => g.derive_delta(),
            DeltaState::Direct(d) => d.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DeltaState::Gmm(g) => g.dim,
            DeltaState::Direct(d) => d.len(),
        }
    }

    pub fn mode(&self) -> PerturbMode {
        match self {
            DeltaState::Gmm(_) => PerturbMode::GmmReparam,
            DeltaState::Direct(_) => PerturbMode::Direct,
        }
    }

    /// Squared norm of a `delta` gradient as seen by the free variables of
    /// this block (pulled back in mixture mode).
    pub fn free_grad_norm_sq(&self, g_delta: &[f64]) -> f64 {
        match self {
            DeltaState::Gmm(g) => g.pullback(g_delta).norm_sq(),
            DeltaState::Direct(_) => crate::linalg::norm_sq(g_delta),
        }
    }

    /// Move the free variables by `step * g_delta` (pulled back in mixture mode).
    pub fn apply(&mut self, g_delta: &[f64], step: f64) {
        match self {
            DeltaState::Gmm(g) => {
                let dir = g.pullback(g_delta);
                g.step(&dir, step);
            }
            DeltaState::Direct(d) => axpy(step, g_delta, d),
        }
    }
}

/// Record of an ascent run, consumed by the trajectory term of the
/// group-level penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct AscentTrajectory {
    /// Perturbation at the start of the ascent.
    pub delta0: Vec<f64>,
    /// `sum_s eta * grad_delta f3` over the ascent steps.
    pub grad_sum: Vec<f64>,
    pub steps: usize,
    /// Per-domain `sum_s eta * grad_delta l_align_i`, one row per domain.
    pub domain_sums: Vec<Vec<f64>>,
    /// Group weights the ascent was run with.
    pub q_used: Vec<f64>,
}

impl AscentTrajectory {
    /// A trajectory with no steps taken from `delta0`.
    pub fn empty(delta0: Vec<f64>, n_domains: usize) -> Self {
        let d = delta0.len();
        Self {
            grad_sum: vec![0.0; d],
            delta0,
            steps: 0,
            domain_sums: vec![vec![0.0; d]; n_domains],
            q_used: vec![0.0; n_domains],
        }
    }

    /// Accumulated ascent displacement re-weighted by group weights `q`:
    /// `grad_sum + sum_i (q_i - q_used_i) domain_sums_i`. Equals `grad_sum`
    /// at `q = q_used`.
    pub fn sum_at(&self, q: &[f64]) -> Vec<f64> {
        let mut s = self.grad_sum.clone();
        for (i, row) in self.domain_sums.iter().enumerate() {
            let w = q[i] - self.q_used[i];
            if w != 0.0 {
                axpy(w, row, &mut s);
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentConfig {
    pub steps: usize,
    pub eta: f64,
    pub p3: P3Config,
}

/// Value of `f3 = sum_i q_i l_align_i(delta) - P3` at the given state.
pub fn f3_value(
    params: &EncoderParams,
    q: &[f64],
    state: &DeltaState,
    domains: &[DomainBatch],
    p3: &P3Config,
) -> Result<f64> {
    let delta = state.delta();
    let mut v = 0.0;
    for (qi, dom) in q.iter().zip(domains) {
        v += qi * alignment_loss(params, &dom.windows, &delta, &dom.aug)?.value;
    }
    let pen = match state {
        DeltaState::Gmm(g) => p3_penalty(g, p3).0,
        DeltaState::Direct(d) => p3_direct(d, p3).0,
    };
    Ok(v - pen)
}

/// `steps` rounds of gradient ascent on `f3` starting from `state`.
/// Returns the updated block, its `delta`, and the trajectory record.
pub fn third_level_ascent(
    params: &EncoderParams,
    q: &[f64],
    state: &DeltaState,
    domains: &[DomainBatch],
    cfg: &AscentConfig,
) -> Result<(DeltaState, Vec<f64>, AscentTrajectory)> {
    check_len("group weights for ascent", domains.len(), q.len())?;
    if !all_finite(q) {
        return Err(TtsoError::Input("group weights must be finite".into()));
    }
    if !(cfg.eta > 0.0) {
        return Err(TtsoError::Config(format!(
            "perturb.eta must be positive, got {}",
            cfg.eta
        )));
    }
    let mut cur = state.clone();
    let delta0 = cur.delta();
    let dim = delta0.len();
    let mut traj = AscentTrajectory::empty(delta0, domains.len());
    traj.q_used = q.to_vec();

    for step in 0..cfg.steps {
        let delta = cur.delta();
        let mut g_delta = vec![0.0; dim];
        for (i, dom) in domains.iter().enumerate() {
            let l = alignment_loss(params, &dom.windows, &delta, &dom.aug)?;
            axpy(q[i], &l.grad_delta, &mut g_delta);
            axpy(cfg.eta, &l.grad_delta, &mut traj.domain_sums[i]);
        }
        match &mut cur {
            DeltaState::Gmm(g) => {
                let mut dir = g.pullback(&g_delta);
                let (_, pen) = p3_penalty(g, &cfg.p3);
                axpy(-1.0, &pen.pi, &mut dir.pi);
                axpy(-1.0, &pen.mu, &mut dir.mu);
                axpy(-1.0, &pen.sigma, &mut dir.sigma);
                if !dir.is_finite() || !all_finite(&g_delta) {
                    return Err(TtsoError::Numerical {
                        iteration: step,
                        what: "non-finite perturbation gradient".into(),
                    });
                }
                g.step(&dir, cfg.eta);
                axpy(cfg.eta, &g_delta, &mut traj.grad_sum);
            }
            DeltaState::Direct(d) => {
                let (_, pen) = p3_direct(d, &cfg.p3);
                axpy(-1.0, &pen, &mut g_delta);
                if !all_finite(&g_delta) {
                    return Err(TtsoError::Numerical {
                        iteration: step,
                        what: "non-finite perturbation gradient".into(),
                    });
                }
                axpy(cfg.eta, &g_delta, d);
                axpy(cfg.eta, &g_delta, &mut traj.grad_sum);
            }
        }
        traj.steps += 1;
    }
    let delta = cur.delta();
    Ok((cur, delta, traj))
}
