#![allow(dead_code)]

use rand::Rng as _;

use ttso_core::diffmodel::{init_params, Architecture, EncoderParams};
use ttso_core::group::{build_anchor, uniform, AnchorSpec, InnerStepSign, LinearizationAnchor, P2Config};
use ttso_core::losses::{AugmentationKind, AugmentationSpec, DomainBatch};
use ttso_core::perturb::AscentTrajectory;
use ttso_core::rng::{self, Rng};

pub const FD_STEP: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], i: usize) -> f64 {
    let (mut p, mut m) = (x.to_vec(), x.to_vec());
    p[i] += FD_STEP;
    m[i] -= FD_STEP;
    (f(&p) - f(&m)) / (2.0 * FD_STEP)
}

/// Up to `n` coordinate indices of a vector of length `len`, all of them
/// when `len <= n`.
pub fn sample_coords(r: &mut Rng, len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        (0..n).map(|_| r.random_range(0..len)).collect()
    }
}

pub fn uniform_vec(r: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Small encoders of every kind, each with at most 200 parameters.
pub fn small_architectures() -> Vec<(&'static str, Architecture)> {
    vec![
        ("linear", Architecture::linear(5, 2, 3)),
        ("mlp", Architecture::mlp(5, 2, 3, &[6])),
        ("dilated_conv", Architecture::dilated_conv(6, 2, 3, 2, 3)),
    ]
}

pub fn random_windows(r: &mut Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| uniform_vec(r, len, -1.0, 1.0)).collect()
}

pub fn jitter(magnitude: f64, seed: u64) -> AugmentationSpec {
    AugmentationSpec::new(AugmentationKind::Jitter, magnitude, seed)
}

/// An anchor over `k` random domains with a nonzero ascent record.
pub fn anchor_for(params: &EncoderParams, k: usize, seed: u64) -> LinearizationAnchor {
    let mut r = rng::stream(seed, "test-anchor", &[]);
    let len = params.arch.input_len();
    let data: Vec<Vec<Vec<f64>>> = (0..k).map(|_| random_windows(&mut r, 4, len)).collect();
    let batches: Vec<DomainBatch> = data
        .iter()
        .enumerate()
        .map(|(i, w)| DomainBatch::new(w.iter().map(|x| x.as_slice()).collect(), jitter(0.2, seed + i as u64)))
        .collect();
    let delta = uniform_vec(&mut r, len, -0.1, 0.1);
    let spec = AnchorSpec {
        q0: uniform(k),
        eta_q: 0.5,
        sign: InnerStepSign::Ascent,
        prior: uniform(k),
        p2: P2Config::default(),
        lambda_con: 0.5,
    };
    let mut traj = AscentTrajectory::empty(delta.clone(), k);
    traj.grad_sum = uniform_vec(&mut r, len, -0.05, 0.05);
    traj.domain_sums = (0..k).map(|_| uniform_vec(&mut r, len, -0.1, 0.1)).collect();
    traj.q_used = uniform(k);
    build_anchor(params, &delta, &batches, traj, &spec).expect("anchor builds")
}

pub fn mlp_anchor(seed: u64) -> LinearizationAnchor {
    let params = init_params(&Architecture::mlp(4, 2, 3, &[5]), seed).unwrap();
    anchor_for(&params, 3, seed)
}

/// A point near the anchor with `q` drawn around the simplex.
pub fn point_near(r: &mut Rng, a: &LinearizationAnchor, scale: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let theta = a
        .theta_bar
        .iter()
        .map(|v| v + scale * r.random_range(-1.0..1.0))
        .collect();
    let q = uniform_vec(r, a.n_groups(), -0.5, 1.5);
    let delta = a
        .delta_bar
        .iter()
        .map(|v| v + scale * r.random_range(-1.0..1.0))
        .collect();
    (theta, q, delta)
}

/// Rejection-sample a point with `h <= eps`: draw `(theta, delta)`, put
/// `q` in a cube around `phi(theta, delta)`, keep it if feasible.
pub fn feasible_point(r: &mut Rng, a: &LinearizationAnchor, scale: f64, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    loop {
        let (theta, _, delta) = point_near(r, a, scale);
        let phi = a.phi(&theta, &delta).unwrap();
        let half = 1.5 * eps / (a.n_groups() as f64).sqrt();
        let q: Vec<f64> = phi.iter().map(|v| v + r.random_range(-half..half)).collect();
        if a.h(&theta, &q, &delta).unwrap() <= eps {
            return (theta, q, delta);
        }
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Euclidean projection onto the simplex by enumerating supports: on a
/// support `S` the KKT point is `v_S - (sum v_S - 1) / |S|`; the nearest
/// feasible candidate is the projection.
pub fn simplex_oracle(v: &[f64]) -> Vec<f64> {
    let k = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let shift = (idx.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / idx.len() as f64;
        let mut x = vec![0.0; k];
        let mut ok = true;
        for &i in &idx {
            x[i] = v[i] - shift;
            ok &= x[i] >= -1e-12;
        }
        if !ok {
            continue;
        }
        let d: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, x));
        }
    }
    best.expect("some support is feasible").1
}
