//! Cutting planes for the sublevel set `h <= eps` and the penalized outer
//! objective `F = f1 + sum_i lambda_i max(0, a_i.theta + b_i.q + c_i.delta + d_i)^2`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, TtsoError};
use crate::group::LinearizationAnchor;
use crate::linalg::{axpy, dot};

/// A value split into the three solver blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks {
    pub theta: Vec<f64>,
    pub q: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Blocks {
    pub fn zeros(n: usize, k: usize, d: usize) -> Self {
        Self {
            theta: vec![0.0; n],
            q: vec![0.0; k],
            delta: vec![0.0; d],
        }
    }

    pub fn norm_sq(&self) -> f64 {
        crate::linalg::norm_sq(&self.theta) + crate::linalg::norm_sq(&self.q) + crate::linalg::norm_sq(&self.delta)
    }

    pub fn is_finite(&self) -> bool {
        crate::linalg::all_finite(&self.theta)
            && crate::linalg::all_finite(&self.q)
            && crate::linalg::all_finite(&self.delta)
    }
}

/// `a.theta + b.q + c.delta + d <= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct CuttingPlane {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub lambda: f64,
    pub born_at: usize,
}

impl CuttingPlane {
    /// Signed left-hand side `a.theta + b.q + c.delta + d`.
    pub fn lhs(&self, theta: &[f64], q: &[f64], delta: &[f64]) -> f64 {
        dot(&self.a, theta) + dot(&self.b, q) + dot(&self.c, delta) + self.d
    }
}

/// Linearize `h` at the given point and shift by `eps`. The point must be
/// infeasible (`h > eps`); the returned plane evaluates to `h - eps` there
/// and, by convexity of `h`, is satisfied wherever `h <= eps`.
pub fn generate_plane(
    anchor: &LinearizationAnchor,
    theta: &[f64],
    q: &[f64],
    delta: &[f64],
    eps: f64,
    lambda: f64,
    born_at: usize,
) -> Result<CuttingPlane> {
    if !(lambda > 0.0) {
        return Err(TtsoError::Config(format!(
            "plane weight must be positive, got {lambda}"
        )));
    }
    let hv = anchor.h_value_grads(theta, q, delta)?;
    if hv.h <= eps {
        return Err(TtsoError::Contract(format!(
            "cutting plane requested at a feasible point (h = {} <= eps = {eps})",
            hv.h
        )));
    }
    let d = hv.h - dot(&hv.grad_theta, theta) - dot(&hv.grad_q, q) - dot(&hv.grad_delta, delta) - eps;
    Ok(CuttingPlane {
        a: hv.grad_theta,
        b: hv.grad_q,
        c: hv.grad_delta,
        d,
        lambda,
        born_at,
    })
}

/// `max(0, a.theta + b.q + c.delta + d)`.
pub fn plane_violation(plane: &CuttingPlane, theta: &[f64], q: &[f64], delta: &[f64]) -> f64 {
    plane.lhs(theta, q, delta).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSet {
    pub planes: Vec<CuttingPlane>,
    pub max_planes: usize,
}

impl PlaneSet {
    pub fn new(max_planes: usize) -> Self {
        Self {
            planes: Vec::new(),
            max_planes,
        }
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn push(&mut self, plane: CuttingPlane) {
        self.planes.push(plane);
    }

    /// Smallest slack `-(lhs)` over all planes at a point (positive = strictly inside).
    pub fn min_slack(&self, theta: &[f64], q: &[f64], delta: &[f64]) -> f64 {
        self.planes
            .iter()
            .map(|p| -p.lhs(theta, q, delta))
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes `<stem>.f64` with one record `[a, b, c, d, lambda, born_at]`
    /// per plane and a `<stem>.json` manifest.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (n, k, d) = self
            .planes
            .first()
            .map(|p| (p.a.len(), p.b.len(), p.c.len()))
            .unwrap_or((0, 0, 0));
        let mut flat = Vec::with_capacity(self.planes.len() * (n + k + d + 3));
        for p in &self.planes {
            flat.extend_from_slice(&p.a);
            flat.extend_from_slice(&p.b);
            flat.extend_from_slice(&p.c);
            flat.extend_from_slice(&[p.d, p.lambda, p.born_at as f64]);
        }
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        crate::report::write_atomic(&stem.with_extension("f64"), &bytes)?;
        let manifest = PlaneManifest {
            n_planes: self.planes.len(),
            n_theta: n,
            n_q: k,
            n_delta: d,
            max_planes: self.max_planes,
            record: "a,b,c,d,lambda,born_at".into(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        crate::report::write_atomic(&stem.with_extension("json"), json.as_bytes())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let side = stem.with_extension("json");
        let bin = stem.with_extension("f64");
        let text = fs::read_to_string(&side).map_err(|e| TtsoError::io(&side, e))?;
        let m: PlaneManifest = serde_json::from_str(&text).map_err(|e| TtsoError::Parse {
            file: side.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let bytes = fs::read(&bin).map_err(|e| TtsoError::io(&bin, e))?;
        let rec = m.n_theta + m.n_q + m.n_delta + 3;
        check_len("plane checkpoint bytes", m.n_planes * rec * 8, bytes.len())?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let planes = flat
            .chunks_exact(rec.max(1))
            .take(m.n_planes)
            .map(|r| {
                let (a, rest) = r.split_at(m.n_theta);
                let (b, rest) = rest.split_at(m.n_q);
                let (c, rest) = rest.split_at(m.n_delta);
                CuttingPlane {
                    a: a.to_vec(),
                    b: b.to_vec(),
                    c: c.to_vec(),
                    d: rest[0],
                    lambda: rest[1],
                    born_at: rest[2] as usize,
                }
            })
            .collect();
        Ok(Self {
            planes,
            max_planes: m.max_planes,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PlaneManifest {
    n_planes: usize,
    n_theta: usize,
    n_q: usize,
    n_delta: usize,
    max_planes: usize,
    record: String,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_max_planes() -> usize {
    64
}

/// Penalty weight given to new planes and the cap on the set size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutplaneConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_max_planes")]
    pub max_planes: usize,
}

impl Default for CutplaneConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            max_planes: default_max_planes(),
        }
    }
}

impl CutplaneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(TtsoError::Config(format!(
                "cutplane.lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.max_planes == 0 {
            return Err(TtsoError::Config("cutplane.max_planes must be at least 1".into()));
        }
        Ok(())
    }
}

/// `F = f1 + sum_i lambda_i violation_i^2`.
pub fn f_value(f1_value: f64, set: &PlaneSet, theta: &[f64], q: &[f64], delta: &[f64]) -> f64 {
    let pen: f64 = set
        .planes
        .iter()
        .map(|p| {
            let v = plane_violation(p, theta, q, delta);
            p.lambda * v * v
        })
        .sum();
    f1_value + pen
}

/// `grad F = grad f1 + sum_i 2 lambda_i violation_i (a_i, b_i, c_i)`.
pub fn f_grads(f1_grads: &Blocks, set: &PlaneSet, theta: &[f64], q: &[f64], delta: &[f64]) -> Result<Blocks> {
    check_len("F theta", f1_grads.theta.len(), theta.len())?;
    check_len("F q", f1_grads.q.len(), q.len())?;
    check_len("F delta", f1_grads.delta.len(), delta.len())?;
    let mut g = f1_grads.clone();
    for p in &set.planes {
        let v = plane_violation(p, theta, q, delta);
        if v > 0.0 {
            let w = 2.0 * p.lambda * v;
            axpy(w, &p.a, &mut g.theta);
            axpy(w, &p.b, &mut g.q);
            axpy(w, &p.c, &mut g.delta);
        }
    }
    Ok(g)
}

/// Shrink to `max_planes`: drop the oldest planes that are satisfied at the
/// given point first, then the oldest overall.
pub fn prune_planes(set: &mut PlaneSet, theta: &[f64], q: &[f64], delta: &[f64]) {
    let excess = set.planes.len().saturating_sub(set.max_planes);
    if excess == 0 {
        return;
    }
    let mut drop = vec![false; set.planes.len()];
    let mut dropped = 0;
    for (i, p) in set.planes.iter().enumerate() {
        if dropped == excess {
            break;
        }
        if plane_violation(p, theta, q, delta) == 0.0 {
            drop[i] = true;
            dropped += 1;
        }
    }
    for flag in drop.iter_mut() {
        if dropped == excess {
            break;
        }
        if !*flag {
            *flag = true;
            dropped += 1;
        }
    }
    let mut it = drop.iter();
    set.planes.retain(|_| !*it.next().unwrap());
}
