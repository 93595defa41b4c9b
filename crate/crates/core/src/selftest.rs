//! Quick built-in property checks run by `ttso selftest`: analytic versus
//! central-difference gradients, convexity of `h`, and validity of
//! generated cutting planes.

use rand::Rng as _;

use crate::cutplane::generate_plane;
use crate::diffmodel::{init_params, Architecture, EncoderParams};
use crate::error::Result;
use crate::group::{build_anchor, p2_penalty, uniform, AnchorSpec, InnerStepSign, LinearizationAnchor, P2Config};
use crate::losses::{contrastive_loss, AugmentationKind, AugmentationSpec, DomainBatch};
use crate::perturb::AscentTrajectory;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

fn windows(r: &mut Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..len).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

fn encoder_gradients(arch: Architecture, seed: u64) -> Result<f64> {
    let params = init_params(&arch, seed)?;
    let mut r = rng::stream(seed, "selftest-grad", &[]);
    let len = arch.input_len();
    let batch = windows(&mut r, 3, len);
    let delta: Vec<f64> = (0..len).map(|_| r.random_range(-0.1..0.1)).collect();
    let aug = AugmentationSpec::new(AugmentationKind::Jitter, 0.1, seed);
    let l = contrastive_loss(&params, &batch, &delta, &aug, 0.5)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let eval = |p: &EncoderParams, d: &[f64]| contrastive_loss(p, &batch, d, &aug, 0.5).map(|v| v.value);
    for _ in 0..8 {
        let i = r.random_range(0..params.n_params());
        let (mut tp, mut tm) = (params.theta.clone(), params.theta.clone());
        tp[i] += h;
        tm[i] -= h;
        let fd = (eval(&params.with_theta(&tp), &delta)? - eval(&params.with_theta(&tm), &delta)?) / (2.0 * h);
        worst = worst.max(rel_err(fd, l.grad_theta[i]));
    }
    for _ in 0..4 {
        let i = r.random_range(0..len);
        let (mut dp, mut dm) = (delta.clone(), delta.clone());
        dp[i] += h;
        dm[i] -= h;
        let fd = (eval(&params, &dp)? - eval(&params, &dm)?) / (2.0 * h);
        worst = worst.max(rel_err(fd, l.grad_delta[i]));
    }
    Ok(worst)
}

fn p2_gradients(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "selftest-p2", &[]);
    let (k, d) = (3, 4);
    let mut traj = AscentTrajectory::empty((0..d).map(|_| r.random_range(-0.5..0.5)).collect(), k);
    traj.grad_sum = (0..d).map(|_| r.random_range(-0.5..0.5)).collect();
    traj.domain_sums = (0..k)
        .map(|_| (0..d).map(|_| r.random_range(-0.5..0.5)).collect())
        .collect();
    traj.q_used = uniform(k);
    let q: Vec<f64> = (0..k).map(|_| r.random_range(-0.2..0.9)).collect();
    let delta: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let cfg = P2Config {
        squared_hinge: true,
        ..P2Config::default()
    };
    let prior = uniform(k);
    let v = p2_penalty(&q, &delta, &traj, &cfg, &prior)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..k {
        let (mut a, mut b) = (q.clone(), q.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (p2_penalty(&a, &delta, &traj, &cfg, &prior)?.value
            - p2_penalty(&b, &delta, &traj, &cfg, &prior)?.value)
            / (2.0 * h);
        worst = worst.max(rel_err(fd, v.grad_q[i]));
    }
    for i in 0..d {
        let (mut a, mut b) = (delta.clone(), delta.clone());
        a[i] += h;
        b[i] -= h;
        let fd = (p2_penalty(&q, &a, &traj, &cfg, &prior)?.value - p2_penalty(&q, &b, &traj, &cfg, &prior)?.value)
            / (2.0 * h);
        worst = worst.max(rel_err(fd, v.grad_delta[i]));
    }
    Ok(worst)
}

/// A small anchor built from a random MLP over three random domains.
pub fn random_anchor(seed: u64) -> Result<LinearizationAnchor> {
    let arch = Architecture::mlp(4, 2, 3, &[5]);
    let params = init_params(&arch, seed)?;
    let mut r = rng::stream(seed, "selftest-anchor", &[]);
    let len = arch.input_len();
    let data: Vec<Vec<Vec<f64>>> = (0..3).map(|_| windows(&mut r, 4, len)).collect();
    let batches: Vec<DomainBatch> = data
        .iter()
        .enumerate()
        .map(|(i, w)| {
            DomainBatch::new(
                w.iter().map(|x| x.as_slice()).collect(),
                AugmentationSpec::new(AugmentationKind::Jitter, 0.2, i as u64),
            )
        })
        .collect();
    let delta: Vec<f64> = (0..len).map(|_| r.random_range(-0.1..0.1)).collect();
    let spec = AnchorSpec {
        q0: uniform(3),
        eta_q: 0.5,
        sign: InnerStepSign::Ascent,
        prior: uniform(3),
        p2: P2Config::default(),
        lambda_con: 0.5,
    };
    let mut traj = AscentTrajectory::empty(delta.clone(), 3);
    traj.domain_sums = (0..3)
        .map(|_| (0..len).map(|_| r.random_range(-0.1..0.1)).collect())
        .collect();
    traj.q_used = uniform(3);
    build_anchor(&params, &delta, &batches, traj, &spec)
}

fn random_point(r: &mut Rng, a: &LinearizationAnchor, scale: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let theta = a
        .theta_bar
        .iter()
        .map(|v| v + scale * r.random_range(-1.0..1.0))
        .collect();
    let q = (0..a.n_groups()).map(|_| r.random_range(-0.5..1.5)).collect();
    let delta = a
        .delta_bar
        .iter()
        .map(|v| v + scale * r.random_range(-1.0..1.0))
        .collect();
    (theta, q, delta)
}

fn convexity(seed: u64, trials: usize) -> Result<f64> {
    let a = random_anchor(seed)?;
    let mut r = rng::stream(seed, "selftest-convexity", &[]);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let (t1, q1, d1) = random_point(&mut r, &a, 1.0);
        let (t2, q2, d2) = random_point(&mut r, &a, 1.0);
        let (h1, h2) = (a.h(&t1, &q1, &d1)?, a.h(&t2, &q2, &d2)?);
        for lam in [0.25, 0.5, 0.75] {
            let mix = |x: &[f64], y: &[f64]| {
                x.iter()
                    .zip(y)
                    .map(|(u, v)| lam * u + (1.0 - lam) * v)
                    .collect::<Vec<_>>()
            };
            let hm = a.h(&mix(&t1, &t2), &mix(&q1, &q2), &mix(&d1, &d2))?;
            worst = worst.max(hm - (lam * h1 + (1.0 - lam) * h2));
        }
    }
    Ok(worst)
}

fn planes(seed: u64, n_planes: usize) -> Result<(f64, f64)> {
    let a = random_anchor(seed)?;
    let mut r = rng::stream(seed, "selftest-planes", &[]);
    let eps = 1e-3;
    let mut planes = Vec::new();
    let mut worst_exact: f64 = 0.0;
    while planes.len() < n_planes {
        let (t, q, d) = random_point(&mut r, &a, 0.5);
        let h = a.h(&t, &q, &d)?;
        if h <= eps {
            continue;
        }
        let p = generate_plane(&a, &t, &q, &d, eps, 1.0, planes.len())?;
        worst_exact = worst_exact.max((p.lhs(&t, &q, &d) - (h - eps)).abs());
        planes.push(p);
    }
    let mut worst_slack = f64::INFINITY;
    for _ in 0..50 {
        let (t, _, d) = random_point(&mut r, &a, 0.5);
        let phi = a.phi(&t, &d)?;
        let q: Vec<f64> = phi
            .iter()
            .map(|v| v + 0.5 * eps * r.random_range(-1.0..1.0) / (a.n_groups() as f64).sqrt())
            .collect();
        if a.h(&t, &q, &d)? > eps {
            continue;
        }
        for p in &planes {
            worst_slack = worst_slack.min(-p.lhs(&t, &q, &d));
        }
    }
    Ok((worst_exact, worst_slack))
}

/// Run every check with a fixed seed.
pub fn run(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let kinds = [
        ("linear", Architecture::linear(5, 2, 3)),
        ("mlp", Architecture::mlp(5, 2, 3, &[4])),
        ("dilated_conv", Architecture::dilated_conv(6, 2, 3, 2, 3)),
    ];
    for (name, arch) in kinds {
        let e = encoder_gradients(arch, seed)?;
        out.push(CheckResult {
            name: format!("gradient/{name}"),
            passed: e <= 1e-5,
            detail: format!("max relative error {e:.2e}"),
        });
    }
    let e = p2_gradients(seed)?;
    out.push(CheckResult {
        name: "gradient/group_penalty".into(),
        passed: e <= 1e-5,
        detail: format!("max relative error {e:.2e}"),
    });
    let gap = convexity(seed, 200)?;
    out.push(CheckResult {
        name: "convexity/h".into(),
        passed: gap <= 1e-9,
        detail: format!("largest convexity gap {gap:.2e}"),
    });
    let (exact, slack) = planes(seed, 20)?;
    out.push(CheckResult {
        name: "planes/validity".into(),
        passed: exact <= 1e-10 && slack >= -1e-9,
        detail: format!("violation error {exact:.2e}, worst feasible slack {slack:.2e}"),
    });
    Ok(out)
}
