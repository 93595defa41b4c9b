//! Objective bundles for the solver: the contrastive encoder objective, a
//! convex quadratic toy with affine per-group losses, and a separable
//! logistic objective used for step-schedule rate checks.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cutplane::{generate_plane, Blocks, PlaneSet};
use crate::diffmodel::EncoderParams;
use crate::error::{check_len, Result, TtsoError};
use crate::group::{build_anchor, simplex_project, AnchorSpec, InnerStepSign, LinearizationAnchor, P2Config};
use crate::linalg::{axpy, cholesky_solve, dot, mat_vec, norm};
use crate::losses::{alignment_loss, contrastive_loss, AugmentationKind, AugmentationSpec, DomainBatch, LossValueGrad};
use crate::perturb::{third_level_ascent, AscentConfig, AscentTrajectory, DeltaState};
use crate::rng;
use crate::sla::{ObjectiveBundle, SlaState};

// ---------------------------------------------------------------------------
// Minibatching and augmentation draws

/// Per-domain sampling without replacement within each pass over the
/// domain. Batches are a pure function of `(seed, domain, t)`, so repeated
/// queries for the same iteration return the same indices.
#[derive(Clone, Debug)]
pub struct MinibatchSampler {
    seed: u64,
    batch: usize,
    sizes: Vec<usize>,
    cache: Vec<Option<(u64, Vec<usize>)>>,
}

impl MinibatchSampler {
    pub fn new(seed: u64, batch: usize, sizes: &[usize]) -> Self {
        Self {
            seed,
            batch,
            sizes: sizes.to_vec(),
            cache: vec![None; sizes.len()],
        }
    }

    fn permutation(&mut self, domain: usize, epoch: u64) -> &[usize] {
        let hit = matches!(&self.cache[domain], Some((e, _)) if *e == epoch);
        if !hit {
            let mut perm: Vec<usize> = (0..self.sizes[domain]).collect();
            perm.shuffle(&mut rng::stream(self.seed, "minibatch", &[domain as u64, epoch]));
            self.cache[domain] = Some((epoch, perm));
        }
        &self.cache[domain].as_ref().expect("filled above").1
    }

    pub fn indices(&mut self, domain: usize, t: usize) -> Vec<usize> {
        let n = self.sizes[domain];
        let b = self.batch.min(n);
        let start = t * b;
        (start..start + b)
            .map(|pos| {
                let epoch = (pos / n) as u64;
                self.permutation(domain, epoch)[pos % n]
            })
            .collect()
    }
}

/// One entry of the augmentation pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugChoice {
    pub kind: AugmentationKind,
    pub magnitude: f64,
}

/// Draw the augmentation for `(t, domain)` from the pool.
pub fn draw_augmentation(pool: &[AugChoice], seed: u64, tag: &str, t: usize, domain: usize) -> AugmentationSpec {
    let mut r = rng::stream(seed, tag, &[t as u64, domain as u64]);
    let pick = pool[r.random_range(0..pool.len())];
    AugmentationSpec::new(pick.kind, pick.magnitude, r.random())
}

// ---------------------------------------------------------------------------
// Contrastive encoder objective

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// `f1 = sum_i q_i l_con_i`.
    #[default]
    Contrastive,
    /// `f1 = sum_i q_i l_align_i`.
    Alignment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtsoSettings {
    pub lambda_con: f64,
    pub f1_mode: F1Mode,
    pub aug_pool: Vec<AugChoice>,
    pub ascent: AscentConfig,
    pub anchor: AnchorSpec,
    pub batch_size: usize,
    pub seed: u64,
}

/// `f1 = sum_i q_i l_i(theta, delta)` over minibatches of the source
/// domains; plane checks run the perturbation ascent and linearize the
/// middle level on full domains.
pub struct TtsoBundle<'a> {
    template: EncoderParams,
    domains: Vec<&'a [Vec<f64>]>,
    settings: TtsoSettings,
    sampler: MinibatchSampler,
}

impl<'a> TtsoBundle<'a> {
    pub fn new(template: EncoderParams, domains: Vec<&'a [Vec<f64>]>, settings: TtsoSettings) -> Result<Self> {
        if domains.is_empty() || domains.iter().any(|d| d.is_empty()) {
            return Err(TtsoError::Input("every source domain needs at least one window".into()));
        }
        if settings.aug_pool.is_empty() {
            return Err(TtsoError::Config("loss.augmentations must not be empty".into()));
        }
        let len = template.arch.input_len();
        for d in &domains {
            for w in d.iter() {
                check_len("window", len, w.len())?;
            }
        }
        let sizes: Vec<usize> = domains.iter().map(|d| d.len()).collect();
        let sampler = MinibatchSampler::new(
            rng::derive_seed(settings.seed, "sampler", &[]),
            settings.batch_size,
            &sizes,
        );
        Ok(Self {
            template,
            domains,
            settings,
            sampler,
        })
    }

    fn loss(
        &self,
        params: &EncoderParams,
        windows: &[&[f64]],
        delta: &[f64],
        aug: &AugmentationSpec,
    ) -> Result<LossValueGrad> {
        match self.settings.f1_mode {
            F1Mode::Contrastive if windows.len() >= 2 => {
                contrastive_loss(params, windows, delta, aug, self.settings.lambda_con)
            }
            _ => alignment_loss(params, windows, delta, aug),
        }
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    /// Minibatch loss of every domain at iteration `t`, in domain order.
    pub fn per_domain(&mut self, t: usize, theta: &[f64], delta: &[f64]) -> Result<Vec<LossValueGrad>> {
        let (n, _, d) = self.dims();
        check_len("f1 theta", n, theta.len())?;
        check_len("f1 delta", d, delta.len())?;
        let params = self.template.with_theta(theta);
        (0..self.domains.len())
            .map(|i| {
                let idx = self.sampler.indices(i, t);
                let windows: Vec<&[f64]> = idx.iter().map(|&j| self.domains[i][j].as_slice()).collect();
                let aug = draw_augmentation(&self.settings.aug_pool, self.settings.seed, "aug", t, i);
                self.loss(&params, &windows, delta, &aug)
            })
            .collect()
    }

    fn check_batches(&self, t: usize) -> Vec<DomainBatch<'a>> {
        self.domains
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let aug = draw_augmentation(&self.settings.aug_pool, self.settings.seed, "check-aug", t, i);
                DomainBatch::new(d.iter().map(|w| w.as_slice()).collect(), aug)
            })
            .collect()
    }
}

impl ObjectiveBundle for TtsoBundle<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (
            self.template.n_params(),
            self.domains.len(),
            self.template.arch.input_len(),
        )
    }

    fn f1(&mut self, t: usize, theta: &[f64], q: &[f64], delta: &[f64]) -> Result<(f64, Blocks)> {
        let (n, k, d) = self.dims();
        check_len("f1 q", k, q.len())?;
        let losses = self.per_domain(t, theta, delta)?;
        let mut g = Blocks::zeros(n, k, d);
        let mut value = 0.0;
        for (i, l) in losses.iter().enumerate() {
            value += q[i] * l.value;
            g.q[i] = l.value;
            axpy(q[i], &l.grad_theta, &mut g.theta);
            axpy(q[i], &l.grad_delta, &mut g.delta);
        }
        Ok((value, g))
    }

    fn refresh(&mut self, t: usize, state: &mut SlaState) -> Result<Option<LinearizationAnchor>> {
        let params = self.template.with_theta(&state.theta);
        let q_feasible = simplex_project(&state.q);
        if let DeltaState::Gmm(g) = &mut state.delta {
            g.refresh_noise(rng::derive_seed(self.settings.seed, "base-noise", &[]), t as u64);
        }
        let batches = self.check_batches(t);
        let (next, delta, traj) =
            third_level_ascent(&params, &q_feasible, &state.delta, &batches, &self.settings.ascent)?;
        state.delta = next;
        let mut spec = self.settings.anchor.clone();
        if self.settings.f1_mode == F1Mode::Alignment {
            spec.lambda_con = 0.0;
        }
        build_anchor(&params, &delta, &batches, traj, &spec).map(Some)
    }
}

// ---------------------------------------------------------------------------
// Convex quadratic toy

/// `f1(x) = x^T H x / 2 + g^T x` over the stacked `x = (theta, q, delta)`
/// with SPD `H`, plus affine per-group losses `l_i = c_i + u_i^T theta +
/// v_i^T delta` that define an exact linearization for `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBundle {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// Row-major `P x P`, `P = n + k + d`.
    pub hess: Vec<f64>,
    pub lin: Vec<f64>,
    pub loss_c: Vec<f64>,
    /// `k x n`.
    pub loss_u: Vec<f64>,
    /// `k x d`.
    pub loss_v: Vec<f64>,
    pub eta_q: f64,
    pub p2: P2Config,
}

impl QuadraticBundle {
    /// Random instance. `H = A^T A / P + I / 2`; the linear term is scaled
    /// so the unconstrained minimizer sits far from `q = phi`.
    pub fn random(n: usize, k: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(TtsoError::Config("toy quadratic needs n >= 1 and k >= 1".into()));
        }
        let p = n + k + d;
        let mut r = rng::stream(seed, "toy-quadratic", &[]);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut r) };
        let a: Vec<f64> = (0..p * p).map(|_| gauss()).collect();
        let mut hess = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                let s: f64 = (0..p).map(|m| a[m * p + i] * a[m * p + j]).sum();
                hess[i * p + j] = s / p as f64 + if i == j { 0.5 } else { 0.0 };
            }
        }
        let lin: Vec<f64> = (0..p).map(|_| 3.0 * gauss()).collect();
        let loss_c: Vec<f64> = (0..k).map(|_| gauss()).collect();
        let loss_u: Vec<f64> = (0..k * n).map(|_| gauss()).collect();
        let loss_v: Vec<f64> = (0..k * d).map(|_| gauss()).collect();
        Ok(Self {
            n,
            k,
            d,
            hess,
            lin,
            loss_c,
            loss_u,
            loss_v,
            eta_q: 0.5,
            p2: P2Config::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n + self.k + self.d
    }

    pub fn stack(&self, theta: &[f64], q: &[f64], delta: &[f64]) -> Vec<f64> {
        theta.iter().chain(q).chain(delta).cloned().collect()
    }

    pub fn split<'b>(&self, x: &'b [f64]) -> (&'b [f64], &'b [f64], &'b [f64]) {
        let (t, rest) = x.split_at(self.n);
        let (q, d) = rest.split_at(self.k);
        (t, q, d)
    }

    pub fn f1_stacked(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let p = self.dim();
        let hx = mat_vec(&self.hess, p, p, x);
        let v = 0.5 * dot(x, &hx) + dot(&self.lin, x);
        let g: Vec<f64> = hx.iter().zip(&self.lin).map(|(a, b)| a + b).collect();
        (v, g)
    }

    /// The (point-independent) linearization anchor at `(theta_bar, delta_bar)`.
    pub fn anchor_at(&self, theta_bar: &[f64], delta_bar: &[f64]) -> LinearizationAnchor {
        let (n, k, d) = (self.n, self.k, self.d);
        let loss_bar = (0..k)
            .map(|i| {
                self.loss_c[i]
                    + dot(&self.loss_u[i * n..(i + 1) * n], theta_bar)
                    + dot(&self.loss_v[i * d..(i + 1) * d], delta_bar)
            })
            .collect();
        let uniform = crate::group::uniform(k);
        LinearizationAnchor {
            theta_bar: theta_bar.to_vec(),
            delta_bar: delta_bar.to_vec(),
            loss_bar,
            j_theta: self.loss_u.clone(),
            j_delta: self.loss_v.clone(),
            q0: uniform.clone(),
            eta_q: self.eta_q,
            sign: InnerStepSign::Ascent,
            prior: uniform,
            p2: self.p2,
            traj: AscentTrajectory::empty(vec![0.0; d], k),
        }
    }
}

impl ObjectiveBundle for QuadraticBundle {
    fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.k, self.d)
    }

    fn f1(&mut self, _t: usize, theta: &[f64], q: &[f64], delta: &[f64]) -> Result<(f64, Blocks)> {
        check_len("toy theta", self.n, theta.len())?;
        check_len("toy q", self.k, q.len())?;
        check_len("toy delta", self.d, delta.len())?;
        let (v, g) = self.f1_stacked(&self.stack(theta, q, delta));
        let (gt, gq, gd) = self.split(&g);
        Ok((
            v,
            Blocks {
                theta: gt.to_vec(),
                q: gq.to_vec(),
                delta: gd.to_vec(),
            },
        ))
    }

    fn refresh(&mut self, _t: usize, state: &mut SlaState) -> Result<Option<LinearizationAnchor>> {
        Ok(Some(self.anchor_at(&state.theta, &state.delta.delta())))
    }
}

/// Minimizer of `F = f1 + sum lambda max(0, plane)^2` on the toy bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictedOptimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub f1: f64,
    pub grad_norm: f64,
    pub newton_iters: usize,
}

fn stacked_planes(set: &PlaneSet) -> Vec<(Vec<f64>, f64, f64)> {
    set.planes
        .iter()
        .map(|p| {
            let w: Vec<f64> = p.a.iter().chain(&p.b).chain(&p.c).cloned().collect();
            (w, p.d, p.lambda)
        })
        .collect()
}

fn penalized(b: &QuadraticBundle, planes: &[(Vec<f64>, f64, f64)], x: &[f64]) -> (f64, f64, Vec<f64>) {
    let (f1, mut g) = b.f1_stacked(x);
    let mut f = f1;
    for (w, d, lam) in planes {
        let v = dot(w, x) + d;
        if v > 0.0 {
            f += lam * v * v;
            axpy(2.0 * lam * v, w, &mut g);
        }
    }
    (f, f1, g)
}

/// Semi-smooth Newton with Armijo backtracking, run until the gradient norm
/// is at most `tol`.
pub fn restricted_optimum(b: &QuadraticBundle, set: &PlaneSet, x0: &[f64], tol: f64) -> Result<RestrictedOptimum> {
    let p = b.dim();
    check_len("restricted start", p, x0.len())?;
    let planes = stacked_planes(set);
    let mut x = x0.to_vec();
    for it in 0..200 {
        let (f, f1, g) = penalized(b, &planes, &x);
        let gn = norm(&g);
        if gn <= tol {
            return Ok(RestrictedOptimum {
                x,
                f,
                f1,
                grad_norm: gn,
                newton_iters: it,
            });
        }
        let mut hmat = b.hess.clone();
        for (w, d, lam) in &planes {
            if dot(w, &x) + d > 0.0 {
                for i in 0..p {
                    for j in 0..p {
                        hmat[i * p + j] += 2.0 * lam * w[i] * w[j];
                    }
                }
            }
        }
        let dir = cholesky_solve(&hmat, p, &g).ok_or_else(|| TtsoError::Numerical {
            iteration: it,
            what: "restricted Hessian not positive definite".into(),
        })?;
        let slope = -dot(&g, &dir);
        let mut alpha = 1.0;
        let mut next = x.clone();
        for _ in 0..60 {
            next.iter_mut()
                .zip(&x)
                .zip(&dir)
                .for_each(|((n, xi), di)| *n = xi - alpha * di);
            if penalized(b, &planes, &next).0 <= f + 1e-4 * alpha * slope {
                break;
            }
            alpha *= 0.5;
        }
        x = next;
    }
    Err(TtsoError::Numerical {
        iteration: 200,
        what: "restricted solve did not reach tolerance".into(),
    })
}

/// One plane-addition epoch of the localization loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalizationEpoch {
    pub epoch: usize,
    pub n_planes: usize,
    pub f_opt: f64,
    pub f1_opt: f64,
    pub h: f64,
    pub grad_norm: f64,
}

/// Solve the restricted problem, add a plane at its optimum while `h > eps`,
/// and repeat for at most `max_epochs` solves.
pub fn run_localization(
    b: &QuadraticBundle,
    eps: f64,
    lambda: f64,
    max_epochs: usize,
    tol: f64,
) -> Result<Vec<LocalizationEpoch>> {
    let mut set = PlaneSet::new(max_epochs.max(1));
    let mut x = vec![0.0; b.dim()];
    let mut out = Vec::new();
    for epoch in 0..max_epochs {
        let opt = restricted_optimum(b, &set, &x, tol)?;
        x = opt.x.clone();
        let (theta, q, delta) = b.split(&x);
        let anchor = b.anchor_at(theta, delta);
        let h = anchor.h(theta, q, delta)?;
        out.push(LocalizationEpoch {
            epoch,
            n_planes: set.len(),
            f_opt: opt.f,
            f1_opt: opt.f1,
            h,
            grad_norm: opt.grad_norm,
        });
        if h <= eps {
            break;
        }
        set.push(generate_plane(&anchor, theta, q, delta, eps, lambda, epoch)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Separable logistic objective

/// `f1(x) = mean_j log(1 + exp(-y_j z_j^T x))` over the stacked iterate on
/// linearly separable data. It has no minimizer, so gradient descent with a
/// constant step `eta` drives the gradient down like `1 / (eta t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticBundle {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// Rows `y_j z_j`, row-major `m x (n + k + d)`.
    pub signed: Vec<f64>,
    pub m: usize,
}

impl LogisticBundle {
    pub fn separable(n: usize, k: usize, d: usize, m: usize, margin: f64, seed: u64) -> Self {
        let p = n + k + d;
        let mut r = rng::stream(seed, "logistic", &[]);
        let mut w: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut r)).collect();
        let wn = norm(&w);
        w.iter_mut().for_each(|v| *v /= wn);
        let mut signed = Vec::with_capacity(m * p);
        let mut count = 0;
        while count < m {
            let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut r)).collect();
            let s = dot(&w, &z);
            if s.abs() < margin {
                continue;
            }
            let y = s.signum();
            signed.extend(z.iter().map(|v| y * v));
            count += 1;
        }
        Self { n, k, d, signed, m }
    }
}

fn log1p_exp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl ObjectiveBundle for LogisticBundle {
    fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.k, self.d)
    }

    fn f1(&mut self, _t: usize, theta: &[f64], q: &[f64], delta: &[f64]) -> Result<(f64, Blocks)> {
        let p = self.n + self.k + self.d;
        let x: Vec<f64> = theta.iter().chain(q).chain(delta).cloned().collect();
        check_len("logistic iterate", p, x.len())?;
        let mut v = 0.0;
        let mut g = vec![0.0; p];
        for j in 0..self.m {
            let row = &self.signed[j * p..(j + 1) * p];
            let s = dot(row, &x);
            v += log1p_exp(-s);
            let sig = 1.0 / (1.0 + s.exp());
            axpy(-sig, row, &mut g);
        }
        let inv = 1.0 / self.m as f64;
        g.iter_mut().for_each(|e| *e *= inv);
        let (gt, rest) = g.split_at(self.n);
        let (gq, gd) = rest.split_at(self.k);
        Ok((
            v * inv,
            Blocks {
                theta: gt.to_vec(),
                q: gq.to_vec(),
                delta: gd.to_vec(),
            },
        ))
    }

    fn refresh(&mut self, _t: usize, _state: &mut SlaState) -> Result<Option<LinearizationAnchor>> {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cutplane::CutplaneConfig;
    use crate::diffmodel::{init_params, Architecture};
    use crate::perturb::P3Config;
    use crate::sla::{sla_run, SlaConfig, StepSize};

    fn toy_state(b: &QuadraticBundle) -> SlaState {
        SlaState {
            theta: vec![0.0; b.n],
            q: crate::group::uniform(b.k),
            delta: DeltaState::Direct(vec![0.0; b.d]),
        }
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = MinibatchSampler::new(7, 4, &[10, 3]);
        let mut seen: Vec<usize> = Vec::new();
        // 10 windows with batch 4: iterations 0..5 span exactly two epochs
        for t in 0..5 {
            seen.extend(s.indices(0, t));
        }
        let (first, second) = seen.split_at(10);
        let mut a = first.to_vec();
        a.sort();
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        let mut b = second.to_vec();
        b.sort();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
        assert_eq!(s.indices(0, 2), s.indices(0, 2));
        assert_eq!(s.indices(1, 0).len(), 3);
    }

    #[test]
    fn augmentation_draws_are_deterministic() {
        let pool = [
            AugChoice {
                kind: AugmentationKind::Jitter,
                magnitude: 0.1,
            },
            AugChoice {
                kind: AugmentationKind::Shift,
                magnitude: 0.5,
            },
        ];
        assert_eq!(
            draw_augmentation(&pool, 3, "aug", 4, 1),
            draw_augmentation(&pool, 3, "aug", 4, 1)
        );
    }

    #[test]
    fn toy_gradient_matches_differences() {
        let mut b = QuadraticBundle::random(3, 2, 2, 1).unwrap();
        let x: Vec<f64> = (0..7).map(|i| 0.3 * i as f64 - 1.0).collect();
        let (_, g) = b.f1_stacked(&x);
        for i in 0..7 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (b.f1_stacked(&xp).0 - b.f1_stacked(&xm).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()));
        }
        let (_, blocks) = b.f1(0, &x[..3], &x[3..5], &x[5..]).unwrap();
        assert_eq!(blocks.theta, g[..3].to_vec());
    }

    #[test]
    fn toy_anchor_is_point_independent() {
        let b = QuadraticBundle::random(3, 3, 2, 2).unwrap();
        let a1 = b.anchor_at(&[0.0; 3], &[0.0; 2]);
        let a2 = b.anchor_at(&[1.0, -2.0, 0.5], &[0.3, 0.7]);
        let (t, q, d) = ([0.2, 0.1, -0.4], [0.5, 0.2, 0.3], [-0.1, 0.9]);
        assert!((a1.h(&t, &q, &d).unwrap() - a2.h(&t, &q, &d).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn restricted_optimum_is_stationary() {
        let b = QuadraticBundle::random(4, 3, 2, 3).unwrap();
        let set = PlaneSet::new(4);
        let opt = restricted_optimum(&b, &set, &vec![0.0; b.dim()], 1e-10).unwrap();
        assert!(opt.grad_norm <= 1e-10);
        // without planes the optimum solves H x = -g
        let p = b.dim();
        let neg: Vec<f64> = b.lin.iter().map(|v| -v).collect();
        let direct = cholesky_solve(&b.hess, p, &neg).unwrap();
        for (a, e) in opt.x.iter().zip(direct) {
            assert!((a - e).abs() < 1e-8);
        }
    }

    #[test]
    fn localization_optima_never_decrease() {
        let b = QuadraticBundle::random(4, 3, 2, 5).unwrap();
        let epochs = run_localization(&b, 1e-4, 10.0, 8, 1e-9).unwrap();
        assert!(epochs.len() >= 2);
        for w in epochs.windows(2) {
            assert!(w[1].f_opt >= w[0].f_opt - 1e-7);
        }
    }

    #[test]
    fn toy_run_is_deterministic_and_planes_follow_cadence() {
        let mut cfg = SlaConfig::new(60, 1e-4, 1e-12);
        cfg.plane_every = 4;
        cfg.eta_theta = StepSize::Fixed(0.05);
        cfg.eta_q = StepSize::Fixed(0.05);
        cfg.eta_delta = StepSize::Fixed(0.05);
        let mut b = QuadraticBundle::random(3, 3, 2, 9).unwrap();
        let init = toy_state(&b);
        let a = sla_run(&cfg, &CutplaneConfig::default(), &mut b, init.clone()).unwrap();
        let again = sla_run(&cfg, &CutplaneConfig::default(), &mut b, init).unwrap();
        assert_eq!(a.trace, again.trace);
        assert_eq!(a.state, again.state);
        for w in a.trace.records.windows(2) {
            if w[1].n_planes != w[0].n_planes {
                assert_eq!(w[1].t % 4, 0);
            }
        }
        assert!(a.trace.records.iter().any(|r| r.plane_added));
    }

    #[test]
    fn toy_descent_is_monotone_without_planes() {
        let mut cfg = SlaConfig::new(50, 1e-4, 1e-12);
        cfg.plane_every = 1000;
        cfg.eta_theta = StepSize::Fixed(0.02);
        cfg.eta_q = StepSize::Fixed(0.02);
        cfg.eta_delta = StepSize::Fixed(0.02);
        let mut b = QuadraticBundle::random(3, 2, 2, 4).unwrap();
        // plane_every = 1000 still checks at t = 0; use a huge eps to keep the set empty
        cfg.eps_h = 1e9;
        let init = toy_state(&b);
        let out = sla_run(&cfg, &CutplaneConfig::default(), &mut b, init).unwrap();
        for w in out.trace.records.windows(2) {
            assert!(w[1].f <= w[0].f + 1e-12);
        }
    }

    #[test]
    fn zero_iterations_return_initial_state() {
        let cfg = SlaConfig::new(0, 1e-4, 1e-6);
        let mut b = QuadraticBundle::random(2, 2, 1, 1).unwrap();
        let init = toy_state(&b);
        let out = sla_run(&cfg, &CutplaneConfig::default(), &mut b, init.clone()).unwrap();
        assert_eq!(out.state, init);
        assert!(out.trace.records.is_empty());
    }

    #[test]
    fn stationary_stop_respects_tolerance() {
        let mut cfg = SlaConfig::new(2000, 1e9, 1e-3);
        cfg.eta_theta = StepSize::Fixed(0.2);
        cfg.eta_q = StepSize::Fixed(0.2);
        cfg.eta_delta = StepSize::Fixed(0.2);
        let mut b = QuadraticBundle::random(2, 2, 1, 6).unwrap();
        let init = toy_state(&b);
        let out = sla_run(&cfg, &CutplaneConfig::default(), &mut b, init).unwrap();
        assert_eq!(out.trace.status, crate::sla::SolverStatus::Stationary);
        let last = out.trace.records.last().unwrap();
        assert!(last.grad_norm_sq.sqrt() <= 1e-3);
        assert!(last.t > cfg.warmup);
        assert_eq!(out.trace.stopped_at, Some(last.t));
    }

    #[test]
    fn logistic_gradient_matches_differences() {
        let mut b = LogisticBundle::separable(2, 2, 1, 12, 0.1, 3);
        let x = [0.3, -0.2, 0.1, 0.5, -0.4];
        let (_, g) = b.f1(0, &x[..2], &x[2..4], &x[4..]).unwrap();
        let flat: Vec<f64> = g.theta.iter().chain(&g.q).chain(&g.delta).cloned().collect();
        for i in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fp = b.f1(0, &xp[..2], &xp[2..4], &xp[4..]).unwrap().0;
            let fm = b.f1(0, &xm[..2], &xm[2..4], &xm[4..]).unwrap().0;
            assert!(((fp - fm) / 2e-6 - flat[i]).abs() < 1e-7);
        }
    }

    fn tiny_ttso(windows: &[Vec<Vec<f64>>]) -> TtsoBundle<'_> {
        let arch = Architecture::mlp(4, 2, 3, &[5]);
        let params = init_params(&arch, 1).unwrap();
        let k = windows.len();
        let settings = TtsoSettings {
            lambda_con: 0.5,
            f1_mode: F1Mode::Contrastive,
            aug_pool: vec![AugChoice {
                kind: AugmentationKind::Jitter,
                magnitude: 0.2,
            }],
            ascent: AscentConfig {
                steps: 2,
                eta: 0.05,
                p3: P3Config {
                    c1: 1.0,
                    c2: 1.0,
                    rho: [1.0; 4],
                },
            },
            anchor: AnchorSpec {
                q0: crate::group::uniform(k),
                eta_q: 0.1,
                sign: InnerStepSign::Ascent,
                prior: crate::group::uniform(k),
                p2: P2Config::default(),
                lambda_con: 0.5,
            },
            batch_size: 3,
            seed: 11,
        };
        TtsoBundle::new(params, windows.iter().map(|d| d.as_slice()).collect(), settings).unwrap()
    }

    fn tiny_domains() -> Vec<Vec<Vec<f64>>> {
        let mut r = rng::stream(5, "tiny", &[]);
        (0..2)
            .map(|_| {
                (0..5)
                    .map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn ttso_f1_gradient_matches_differences() {
        let doms = tiny_domains();
        let mut b = tiny_ttso(&doms);
        let (n, k, d) = b.dims();
        let theta = b.template.theta.clone();
        let q = vec![0.7, 0.3];
        let delta: Vec<f64> = (0..d).map(|i| 0.05 * i as f64).collect();
        let (_, g) = b.f1(3, &theta, &q, &delta).unwrap();
        let h = 1e-6;
        let check =
            |fd: f64, an: f64| assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())), "{fd} vs {an}");
        for i in (0..n).step_by(7) {
            let (mut p, mut m) = (theta.clone(), theta.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (b.f1(3, &p, &q, &delta).unwrap().0 - b.f1(3, &m, &q, &delta).unwrap().0) / (2.0 * h);
            check(fd, g.theta[i]);
        }
        for i in 0..k {
            let (mut p, mut m) = (q.clone(), q.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (b.f1(3, &theta, &p, &delta).unwrap().0 - b.f1(3, &theta, &m, &delta).unwrap().0) / (2.0 * h);
            check(fd, g.q[i]);
        }
        for i in 0..d {
            let (mut p, mut m) = (delta.clone(), delta.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (b.f1(3, &theta, &q, &p).unwrap().0 - b.f1(3, &theta, &q, &m).unwrap().0) / (2.0 * h);
            check(fd, g.delta[i]);
        }
    }

    #[test]
    fn ttso_run_adds_planes_and_is_deterministic() {
        let doms = tiny_domains();
        let mut cfg = SlaConfig::new(12, 1e-6, 1e-12);
        cfg.plane_every = 3;
        let run = || {
            let mut b = tiny_ttso(&doms);
            let init = SlaState {
                theta: b.template.theta.clone(),
                q: crate::group::uniform(2),
                delta: DeltaState::Direct(vec![0.0; 8]),
            };
            sla_run(&cfg, &CutplaneConfig::default(), &mut b, init).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.trace, b.trace);
        assert!(!a.planes.is_empty());
        assert_eq!(a.trace.records.len(), 12);
    }
}
