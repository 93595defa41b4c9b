//! Stratified localization driver.
//!
//! Each iteration takes one simultaneous gradient step on the penalized
//! objective `F` for all three blocks `(theta, q, delta)`. Every `k`
//! iterations the bundle refreshes its linearization anchor (running the
//! perturbation ascent on the way), `h` is evaluated at the new iterate and,
//! when `h > eps`, a cutting plane is added to the set that `F` penalizes.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cutplane::{f_grads, f_value, generate_plane, prune_planes, Blocks, CutplaneConfig, PlaneSet};
use crate::error::{Result, TtsoError};
use crate::group::LinearizationAnchor;
use crate::linalg::{axpy, norm_sq};
use crate::perturb::DeltaState;

/// `|grad_theta|^2 + |grad_q|^2 + |grad_delta|^2`.
pub fn grad_norm_sq(grad_theta: &[f64], grad_q: &[f64], grad_delta: &[f64]) -> f64 {
    norm_sq(grad_theta) + norm_sq(grad_q) + norm_sq(grad_delta)
}

/// Constant step `1/sqrt(T1 - t1)` from `t1` on; `warmup` (or the same
/// constant when `None`) before it.
pub fn schedule_step(t: usize, total: usize, warmup_until: usize, warmup: Option<f64>) -> Result<f64> {
    if total <= warmup_until {
        return Err(TtsoError::Config(format!(
            "sla.iterations ({total}) must exceed sla.warmup ({warmup_until})"
        )));
    }
    let eta = 1.0 / ((total - warmup_until) as f64).sqrt();
    Ok(match warmup {
        Some(w) if t < warmup_until => w,
        _ => eta,
    })
}

/// Step size of one block: the schedule or a fixed override.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum StepSize {
    #[default]
    Schedule,
    Fixed(f64),
}

impl Serialize for StepSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSize::Schedule => s.serialize_str("schedule"),
            StepSize::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for StepSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(StepSize::Fixed(v)),
            Raw::Int(v) => Ok(StepSize::Fixed(v as f64)),
            Raw::Text(s) if s == "schedule" => Ok(StepSize::Schedule),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"schedule\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// All blocks use gradients from the same iterate.
    #[default]
    Jacobi,
    /// theta, then q, then delta, each seeing the blocks already updated.
    GaussSeidel,
}

fn default_warmup() -> usize {
    1
}
fn default_plane_every() -> usize {
    5
}
fn default_inner_steps() -> usize {
    5
}
fn default_eta_delta_inner() -> f64 {
    0.05
}
fn default_eta_q_inner() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaConfig {
    /// Total iterations `T1`.
    pub iterations: usize,
    /// Warm-up index `t1`; stationarity is only tested after it.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Plane-check cadence `k`.
    #[serde(default = "default_plane_every")]
    pub plane_every: usize,
    /// Feasibility tolerance on `h`.
    pub eps_h: f64,
    /// Stationarity tolerance on `|grad G|`.
    pub eps_stat: f64,
    #[serde(default)]
    pub eta_theta: StepSize,
    #[serde(default)]
    pub eta_q: StepSize,
    #[serde(default)]
    pub eta_delta: StepSize,
    /// Step used for `t < warmup`; defaults to the schedule value.
    #[serde(default)]
    pub warmup_eta: Option<f64>,
    #[serde(default)]
    pub update: UpdateOrder,
    /// Perturbation ascent steps `T3` per plane check.
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_eta_delta_inner")]
    pub eta_delta_inner: f64,
    /// Step of the linearized middle-level update inside `phi`.
    #[serde(default = "default_eta_q_inner")]
    pub eta_q_inner: f64,
    /// Per-domain minibatch size.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl SlaConfig {
    pub fn new(iterations: usize, eps_h: f64, eps_stat: f64) -> Self {
        Self {
            iterations,
            warmup: default_warmup(),
            plane_every: default_plane_every(),
            eps_h,
            eps_stat,
            eta_theta: StepSize::Schedule,
            eta_q: StepSize::Schedule,
            eta_delta: StepSize::Schedule,
            warmup_eta: None,
            update: UpdateOrder::Jacobi,
            inner_steps: default_inner_steps(),
            eta_delta_inner: default_eta_delta_inner(),
            eta_q_inner: default_eta_q_inner(),
            batch_size: default_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TtsoError::Config(m));
        if self.iterations > 0 && self.warmup >= self.iterations {
            return bad(format!(
                "sla.warmup ({}) must be below sla.iterations ({})",
                self.warmup, self.iterations
            ));
        }
        if self.plane_every == 0 {
            return bad("sla.plane_every must be at least 1".into());
        }
        if !(self.eps_h > 0.0) || !(self.eps_stat > 0.0) {
            return bad("sla.eps_h and sla.eps_stat must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("sla.batch_size must be at least 1".into());
        }
        if !(self.eta_delta_inner > 0.0) || !(self.eta_q_inner > 0.0) {
            return bad("sla.eta_delta_inner and sla.eta_q_inner must be positive".into());
        }
        for (name, s) in [
            ("eta_theta", self.eta_theta),
            ("eta_q", self.eta_q),
            ("eta_delta", self.eta_delta),
        ] {
            if let StepSize::Fixed(v) = s {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("sla.{name} must be positive, got {v}"));
                }
            }
        }
        Ok(())
    }

    /// Step sizes `(theta, q, delta)` at iteration `t`.
    pub fn steps_at(&self, t: usize) -> Result<[f64; 3]> {
        let sched = schedule_step(t, self.iterations, self.warmup, self.warmup_eta)?;
        let pick = |s: StepSize| match s {
            StepSize::Schedule => sched,
            StepSize::Fixed(v) => v,
        };
        Ok([pick(self.eta_theta), pick(self.eta_q), pick(self.eta_delta)])
    }
}

/// Solver iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct SlaState {
    pub theta: Vec<f64>,
    pub q: Vec<f64>,
    pub delta: DeltaState,
}

/// The objective the driver minimizes. `f1` must return gradients with
/// respect to `theta`, `q` and the realized `delta`.
pub trait ObjectiveBundle {
    /// `(N, K, D)`.
    fn dims(&self) -> (usize, usize, usize);

    fn f1(&mut self, t: usize, theta: &[f64], q: &[f64], delta: &[f64]) -> Result<(f64, Blocks)>;

    /// Called at plane-check iterations with the freshly updated iterate.
    /// May move the perturbation block. Returns the anchor for `h`, or
    /// `None` when the bundle has no group-level constraint.
    fn refresh(&mut self, t: usize, state: &mut SlaState) -> Result<Option<LinearizationAnchor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    MaxIters,
    Stationary,
    NumericalError,
}

/// One iteration of the trace, measured at the pre-update iterate except
/// for `h`, which is evaluated after the update at plane checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: usize,
    pub f: f64,
    pub f1: f64,
    pub h: Option<f64>,
    pub grad_norm_sq: f64,
    pub n_planes: usize,
    pub eta_theta: f64,
    pub eta_q: f64,
    pub eta_delta: f64,
    pub plane_added: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverTrace {
    pub records: Vec<TraceRecord>,
    pub status: SolverStatus,
    /// Iteration at which the stationarity test fired.
    pub stopped_at: Option<usize>,
    pub message: Option<String>,
}

impl SolverTrace {
    pub const CSV_HEADER: &'static str = "t,F,f1,h,grad_norm_sq,n_planes,eta_theta,eta_q,eta_delta,plane_added\n";

    pub fn min_grad_norm(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.grad_norm_sq.sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        for r in &self.records {
            let h = r.h.map(|v| format!("{v:e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:e},{:e},{},{:e},{},{:e},{:e},{:e},{}\n",
                r.t,
                r.f,
                r.f1,
                h,
                r.grad_norm_sq,
                r.n_planes,
                r.eta_theta,
                r.eta_q,
                r.eta_delta,
                u8::from(r.plane_added)
            ));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct SlaOutcome {
    pub state: SlaState,
    pub trace: SolverTrace,
    pub planes: PlaneSet,
    /// The final iterate `theta^(T)` of the loop even when stationarity
    /// stopped it early (then it equals `state.theta`).
    pub last_theta: Vec<f64>,
}

/// What one step measured.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub f: f64,
    pub f1: f64,
    pub grads: Blocks,
    pub grad_norm_sq: f64,
}

fn numerical(t: usize, what: &str) -> TtsoError {
    TtsoError::Numerical {
        iteration: t,
        what: what.to_string(),
    }
}

/// Value and gradient of `F` at a state.
pub fn evaluate_f<B: ObjectiveBundle + ?Sized>(
    bundle: &mut B,
    t: usize,
    state: &SlaState,
    planes: &PlaneSet,
) -> Result<StepInfo> {
    let delta = state.delta.delta();
    let (f1, g1) = bundle.f1(t, &state.theta, &state.q, &delta)?;
    if !f1.is_finite() || !g1.is_finite() {
        return Err(numerical(t, "non-finite objective or gradient"));
    }
    let f = f_value(f1, planes, &state.theta, &state.q, &delta);
    let grads = f_grads(&g1, planes, &state.theta, &state.q, &delta)?;
    let grad_norm_sq = norm_sq(&grads.theta) + norm_sq(&grads.q) + state.delta.free_grad_norm_sq(&grads.delta);
    Ok(StepInfo {
        f,
        f1,
        grads,
        grad_norm_sq,
    })
}

/// One update `x <- x - eta grad_x F` of every block. Gradients come from
/// `info` (the pre-update iterate) except in Gauss-Seidel order, where the
/// `q` and `delta` gradients are re-evaluated after the earlier blocks move.
pub fn sla_step<B: ObjectiveBundle + ?Sized>(
    state: &mut SlaState,
    bundle: &mut B,
    planes: &PlaneSet,
    info: &StepInfo,
    t: usize,
    steps: [f64; 3],
    order: UpdateOrder,
) -> Result<()> {
    let [eta_t, eta_q, eta_d] = steps;
    axpy(-eta_t, &info.grads.theta, &mut state.theta);
    match order {
        UpdateOrder::Jacobi => {
            axpy(-eta_q, &info.grads.q, &mut state.q);
            state.delta.apply(&info.grads.delta, -eta_d);
        }
        UpdateOrder::GaussSeidel => {
            let g = evaluate_f(bundle, t, state, planes)?;
            axpy(-eta_q, &g.grads.q, &mut state.q);
            let g = evaluate_f(bundle, t, state, planes)?;
            state.delta.apply(&g.grads.delta, -eta_d);
        }
    }
    let delta = state.delta.delta();
    if !crate::linalg::all_finite(&state.theta)
        || !crate::linalg::all_finite(&state.q)
        || !crate::linalg::all_finite(&delta)
    {
        return Err(numerical(t, "iterate became non-finite"));
    }
    Ok(())
}

/// Run the full solver loop from `init`.
pub fn sla_run<B: ObjectiveBundle + ?Sized>(
    config: &SlaConfig,
    planes_cfg: &CutplaneConfig,
    bundle: &mut B,
    init: SlaState,
) -> Result<SlaOutcome> {
    config.validate()?;
    planes_cfg.validate()?;
    let (n, k, d) = bundle.dims();
    crate::error::check_len("initial theta", n, init.theta.len())?;
    crate::error::check_len("initial q", k, init.q.len())?;
    crate::error::check_len("initial delta", d, init.delta.dim())?;

    let mut state = init;
    let mut planes = PlaneSet::new(planes_cfg.max_planes);
    let mut trace = SolverTrace {
        records: Vec::with_capacity(config.iterations),
        status: SolverStatus::MaxIters,
        stopped_at: None,
        message: None,
    };
    let mut stationary_state: Option<SlaState> = None;

    for t in 0..config.iterations {
        let steps = config.steps_at(t)?;
        let info = match evaluate_f(bundle, t, &state, &planes) {
            Ok(i) => i,
            Err(e @ TtsoError::Numerical { .. }) => {
                trace.status = SolverStatus::NumericalError;
                trace.message = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let mut rec = TraceRecord {
            t,
            f: info.f,
            f1: info.f1,
            h: None,
            grad_norm_sq: info.grad_norm_sq,
            n_planes: planes.len(),
            eta_theta: steps[0],
            eta_q: steps[1],
            eta_delta: steps[2],
            plane_added: false,
        };
        if t > config.warmup && info.grad_norm_sq.sqrt() <= config.eps_stat {
            trace.records.push(rec);
            trace.status = SolverStatus::Stationary;
            trace.stopped_at = Some(t);
            stationary_state = Some(state.clone());
            break;
        }
        if let Err(e) = sla_step(&mut state, bundle, &planes, &info, t, steps, config.update) {
            trace.records.push(rec);
            trace.status = SolverStatus::NumericalError;
            trace.message = Some(e.to_string());
            break;
        }
        if t % config.plane_every == 0 {
            if let Some(anchor) = bundle.refresh(t, &mut state)? {
                let delta = state.delta.delta();
                let h = anchor.h(&state.theta, &state.q, &delta)?;
                rec.h = Some(h);
                if h > config.eps_h {
                    let plane = generate_plane(
                        &anchor,
                        &state.theta,
                        &state.q,
                        &delta,
                        config.eps_h,
                        planes_cfg.lambda,
                        t,
                    )?;
                    planes.push(plane);
                    prune_planes(&mut planes, &state.theta, &state.q, &delta);
                    rec.plane_added = true;
                }
                rec.n_planes = planes.len();
            }
        }
        trace.records.push(rec);
    }
    let last_theta = state.theta.clone();
    let state = stationary_state.unwrap_or(state);
    Ok(SlaOutcome {
        state,
        trace,
        planes,
        last_theta,
    })
}
