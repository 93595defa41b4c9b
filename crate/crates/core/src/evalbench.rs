//! Downstream evaluation: linear probes on frozen representations,
//! norm-ball constrained fine-tuning, the reweighting baseline, and the
//! leave-one-domain-out harness.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bundle::{TtsoBundle, TtsoSettings};
use crate::config::{Method, RunConfig};
use crate::data::DomainDataset;
use crate::diffmodel::{init_params, EncoderParams};
use crate::error::{check_len, Result, TtsoError};
use crate::group::{uniform, AnchorSpec};
use crate::linalg::{all_finite, axpy, norm, sub};
use crate::losses::cross_entropy_loss;
use crate::perturb::{AscentConfig, DeltaState, GmmParams, PerturbMode};
use crate::report::write_atomic;
use crate::rng;
use crate::sla::{sla_run, SlaState, SolverTrace};

/// Linear classifier `W r + b` on representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub n_classes: usize,
    pub repr_dim: usize,
    /// Row-major `n_classes x repr_dim`.
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeHead {
    /// Small uniform weights in `[-0.01, 0.01)`, zero bias.
    pub fn init(n_classes: usize, repr_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "probe-init", &[]);
        Self {
            n_classes,
            repr_dim,
            w: (0..n_classes * repr_dim).map(|_| r.random_range(-0.01..0.01)).collect(),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn logits(&self, r: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (c, o) in out.iter_mut().enumerate() {
            *o += crate::linalg::dot(&self.w[c * self.repr_dim..(c + 1) * self.repr_dim], r);
        }
        out
    }

    /// Argmax with ties to the lowest class.
    pub fn predict(&self, r: &[f64]) -> usize {
        let l = self.logits(r);
        let mut best = 0;
        for (c, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = c;
            }
        }
        best
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| TtsoError::Input(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TtsoError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TtsoError::Input(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub head: ProbeHead,
    /// Mean cross-entropy before each epoch's update.
    pub losses: Vec<f64>,
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= n_classes) {
        Some(l) => Err(TtsoError::Input(format!("label {l} outside [0, {n_classes})"))),
        None => Ok(()),
    }
}

/// Accumulate mean cross-entropy and head gradients; returns the per-sample
/// logit gradients so callers can backpropagate further.
fn head_pass(head: &ProbeHead, features: &[Vec<f64>], labels: &[usize]) -> Result<(f64, ProbeHead, Vec<Vec<f64>>)> {
    let n = features.len() as f64;
    let mut grad = ProbeHead {
        n_classes: head.n_classes,
        repr_dim: head.repr_dim,
        w: vec![0.0; head.w.len()],
        bias: vec![0.0; head.n_classes],
    };
    let mut loss = 0.0;
    let mut g_logits = Vec::with_capacity(features.len());
    for (r, &y) in features.iter().zip(labels) {
        let (l, g) = cross_entropy_loss(&head.logits(r), y)?;
        loss += l / n;
        for c in 0..head.n_classes {
            let gc = g[c] / n;
            grad.bias[c] += gc;
            axpy(gc, r, &mut grad.w[c * head.repr_dim..(c + 1) * head.repr_dim]);
        }
        g_logits.push(g.iter().map(|v| v / n).collect());
    }
    Ok((loss, grad, g_logits))
}

fn step_head(head: &mut ProbeHead, grad: &ProbeHead, lr: f64) {
    axpy(-lr, &grad.w, &mut head.w);
    axpy(-lr, &grad.bias, &mut head.bias);
}

/// Full-batch gradient descent on mean cross-entropy over fixed features.
pub fn fit_softmax(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeFit> {
    if features.is_empty() {
        return Err(TtsoError::Input("probe training set is empty".into()));
    }
    check_len("probe labels", features.len(), labels.len())?;
    check_labels(labels, n_classes)?;
    let m = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != m) {
        return Err(TtsoError::dim("probe feature", m, f.len()));
    }
    let mut head = ProbeHead::init(n_classes, m, seed);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (loss, grad, _) = head_pass(&head, features, labels)?;
        if !loss.is_finite() {
            return Err(TtsoError::Numerical {
                iteration: epoch,
                what: "probe loss is not finite".into(),
            });
        }
        losses.push(loss);
        step_head(&mut head, &grad, lr);
    }
    Ok(ProbeFit { head, losses })
}

pub fn representations(params: &EncoderParams, windows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    windows.iter().map(|w| params.forward(w)).collect()
}

/// Fit a probe on frozen representations of `windows`.
pub fn train_probe(
    params: &EncoderParams,
    windows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeFit> {
    if windows.is_empty() {
        return Err(TtsoError::Input("probe training set is empty".into()));
    }
    fit_softmax(&representations(params, windows)?, labels, n_classes, epochs, lr, seed)
}

pub fn accuracy_of(head: &ProbeHead, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.is_empty() {
        return Err(TtsoError::Input("test set is empty".into()));
    }
    check_len("test labels", features.len(), labels.len())?;
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(r, &y)| head.predict(r) == y)
        .count();
    Ok(correct as f64 / features.len() as f64)
}

/// Fraction of windows whose argmax prediction equals the label.
pub fn evaluate_accuracy(
    params: &EncoderParams,
    head: &ProbeHead,
    windows: &[Vec<f64>],
    labels: &[usize],
) -> Result<f64> {
    if windows.is_empty() {
        return Err(TtsoError::Input("test set is empty".into()));
    }
    accuracy_of(head, &representations(params, windows)?, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub params: EncoderParams,
    pub head: ProbeHead,
    /// `|theta - theta0|` after every step.
    pub distances: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Joint full-batch descent on encoder and head, projecting the encoder
/// back onto `|theta - theta0| <= gamma` after each step. Points already in
/// the ball are left untouched.
pub fn constrained_finetune(
    params0: &EncoderParams,
    head0: &ProbeHead,
    windows: &[Vec<f64>],
    labels: &[usize],
    gamma: f64,
    epochs: usize,
    lr: f64,
) -> Result<FinetuneResult> {
    if !(gamma >= 0.0) {
        return Err(TtsoError::Config(format!(
            "fine-tuning radius must be nonnegative, got {gamma}"
        )));
    }
    if windows.is_empty() {
        return Err(TtsoError::Input("fine-tuning set is empty".into()));
    }
    check_len("fine-tuning labels", windows.len(), labels.len())?;
    check_labels(labels, head0.n_classes)?;
    let theta0 = params0.theta.clone();
    let mut params = params0.clone();
    let mut head = head0.clone();
    let mut out = FinetuneResult {
        params: params0.clone(),
        head: head0.clone(),
        distances: Vec::with_capacity(epochs),
        losses: Vec::with_capacity(epochs),
    };
    for epoch in 0..epochs {
        let mut feats = Vec::with_capacity(windows.len());
        let mut caches = Vec::with_capacity(windows.len());
        for w in windows {
            let (r, c) = params.forward_cached(w);
            feats.push(r);
            caches.push(c);
        }
        let (loss, g_head, g_logits) = head_pass(&head, &feats, labels)?;
        let mut g_theta = vec![0.0; params.n_params()];
        for ((w, c), gl) in windows.iter().zip(&caches).zip(&g_logits) {
            let mut up = vec![0.0; head.repr_dim];
            for (k, g) in gl.iter().enumerate() {
                axpy(*g, &head.w[k * head.repr_dim..(k + 1) * head.repr_dim], &mut up);
            }
            params.backward_cached(w, c, &up, &mut g_theta, None);
        }
        if !loss.is_finite() || !all_finite(&g_theta) {
            return Err(TtsoError::Numerical {
                iteration: epoch,
                what: "fine-tuning gradient is not finite".into(),
            });
        }
        out.losses.push(loss);
        step_head(&mut head, &g_head, lr);
        axpy(-lr, &g_theta, &mut params.theta);
        let diff = sub(&params.theta, &theta0);
        let dist = norm(&diff);
        if dist > gamma {
            let s = gamma / dist;
            for (t, (t0, d)) in params.theta.iter_mut().zip(theta0.iter().zip(&diff)) {
                *t = t0 + s * d;
            }
        }
        out.distances.push(norm(&sub(&params.theta, &theta0)));
    }
    out.params = params;
    out.head = head;
    Ok(out)
}

/// Exponentiated-gradient reweighting `q'_i ~ q_i exp(eta loss_i)`.
pub fn groupdro_step(losses: &[f64], q: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_len("group weights", losses.len(), q.len())?;
    if q.is_empty() {
        return Err(TtsoError::Input("no groups to reweight".into()));
    }
    if q.iter().any(|v| !(*v >= 0.0)) || !all_finite(losses) {
        return Err(TtsoError::Input(
            "group weights must be nonnegative and losses finite".into(),
        ));
    }
    let logits: Vec<f64> = q.iter().zip(losses).map(|(qi, li)| qi.ln() + eta * li).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(TtsoError::Input("group weights are all zero".into()));
    }
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.iter().map(|v| v / z).collect())
}

// ---------------------------------------------------------------------------
// Representation training

/// Output of one pre-training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: EncoderParams,
    pub q: Vec<f64>,
    pub trace: Option<SolverTrace>,
}

/// Seeds of one (replicate, fold) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FoldSeeds {
    pub init: u64,
    pub train: u64,
    pub probe: u64,
    pub perturb: u64,
}

impl FoldSeeds {
    pub fn new(run_seed: u64, replicate: u64, fold: usize) -> Self {
        let base = rng::derive_seed(run_seed, "replicate", &[replicate]);
        let f = [fold as u64];
        Self {
            init: rng::derive_seed(base, "init", &f),
            train: rng::derive_seed(base, "train", &f),
            probe: rng::derive_seed(base, "probe", &f),
            perturb: rng::derive_seed(base, "perturb", &f),
        }
    }
}

/// Bundle settings for `k` source domains drawn from a run config.
pub fn ttso_settings(cfg: &RunConfig, k: usize, seed: u64) -> TtsoSettings {
    TtsoSettings {
        lambda_con: cfg.loss.lambda_con,
        f1_mode: cfg.loss.f1_mode,
        aug_pool: cfg.loss.augmentations.clone(),
        ascent: AscentConfig {
            steps: cfg.sla.inner_steps,
            eta: cfg.sla.eta_delta_inner,
            p3: cfg.perturb.p3(),
        },
        anchor: AnchorSpec {
            q0: uniform(k),
            eta_q: cfg.sla.eta_q_inner,
            sign: cfg.group.sign,
            prior: uniform(k),
            p2: cfg.group.p2(),
            lambda_con: cfg.loss.lambda_con,
        },
        batch_size: cfg.sla.batch_size,
        seed,
    }
}

fn finite_or(t: usize, theta: &[f64]) -> Result<()> {
    if all_finite(theta) {
        Ok(())
    } else {
        Err(TtsoError::Numerical {
            iteration: t,
            what: "encoder parameters became non-finite".into(),
        })
    }
}

/// Pre-train an encoder on the source domains with the given method.
/// All methods share initialization, minibatches, augmentation draws and
/// the step schedule.
pub fn train_representation(
    method: Method,
    cfg: &RunConfig,
    sources: &[&[Vec<f64>]],
    seeds: FoldSeeds,
) -> Result<Trained> {
    let k = sources.len();
    let template = init_params(&cfg.architecture, seeds.init)?;
    let mut bundle = TtsoBundle::new(template.clone(), sources.to_vec(), ttso_settings(cfg, k, seeds.train))?;
    let d = cfg.architecture.input_len();
    match method {
        Method::Erm | Method::GroupDro => {
            let mut theta = template.theta.clone();
            let mut q = uniform(k);
            let zero = vec![0.0; d];
            for t in 0..cfg.sla.iterations {
                let eta = cfg.sla.steps_at(t)?[0];
                let ls = bundle.per_domain(t, &theta, &zero)?;
                if method == Method::GroupDro {
                    let values: Vec<f64> = ls.iter().map(|l| l.value).collect();
                    q = groupdro_step(&values, &q, cfg.group.groupdro_eta)?;
                }
                for (qi, l) in q.iter().zip(&ls) {
                    axpy(-eta * qi, &l.grad_theta, &mut theta);
                }
                finite_or(t, &theta)?;
            }
            Ok(Trained {
                params: template.with_theta(&theta),
                q,
                trace: None,
            })
        }
        Method::Ttso => {
            let delta = match cfg.perturb.mode {
                PerturbMode::GmmReparam => DeltaState::Gmm(GmmParams::init(
                    cfg.perturb.n_components,
                    d,
                    cfg.perturb.init_sigma,
                    seeds.perturb,
                )?),
                PerturbMode::Direct => DeltaState::Direct(vec![0.0; d]),
            };
            let init = SlaState {
                theta: template.theta.clone(),
                q: uniform(k),
                delta,
            };
            let out = sla_run(&cfg.sla, &cfg.cutplane, &mut bundle, init)?;
            if out.trace.status == crate::sla::SolverStatus::NumericalError {
                return Err(TtsoError::Numerical {
                    iteration: out.trace.records.len(),
                    what: out.trace.message.clone().unwrap_or_else(|| "solver failed".into()),
                });
            }
            Ok(Trained {
                params: template.with_theta(&out.state.theta),
                q: crate::group::simplex_project(&out.state.q),
                trace: Some(out.trace),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    /// One accuracy per held-out domain, in dataset order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoReport {
    pub method: Method,
    pub config_hash: String,
    pub domains: Vec<String>,
    pub rows: Vec<SeedRow>,
    pub mean_per_domain: Vec<f64>,
    pub std_per_domain: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl LodoReport {
    pub fn csv_header(&self) -> String {
        format!("method,seed,{},AVG\n", self.domains.join(","))
    }

    /// Per-seed rows then `mean` and `std` rows, without the header.
    pub fn csv_rows(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        let name = self.method.name();
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&format!("{name},{},{},{:.6}\n", r.seed, fmt(&r.accuracies), r.mean));
        }
        s.push_str(&format!(
            "{name},mean,{},{:.6}\n",
            fmt(&self.mean_per_domain),
            self.mean
        ));
        s.push_str(&format!("{name},std,{},{:.6}\n", fmt(&self.std_per_domain), self.std));
        s
    }

    pub fn to_csv(&self) -> String {
        self.csv_header() + &self.csv_rows()
    }
}

/// Everything one fold produced.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub trained: Trained,
    pub head: ProbeHead,
    pub accuracy: f64,
}

/// Train on every domain but `target`, probe on the sources, score on the target.
pub fn run_fold(
    ds: &DomainDataset,
    method: Method,
    cfg: &RunConfig,
    target: usize,
    seeds: FoldSeeds,
) -> Result<FoldOutcome> {
    if target >= ds.n_domains() {
        return Err(TtsoError::Input(format!("target domain {target} out of range")));
    }
    let sources: Vec<&[Vec<f64>]> = ds
        .domains
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(_, d)| d.windows.as_slice())
        .collect();
    let trained = train_representation(method, cfg, &sources, seeds)?;
    let (mut windows, mut labels) = (Vec::new(), Vec::new());
    for (i, d) in ds.domains.iter().enumerate() {
        if i != target {
            windows.extend(d.windows.iter().cloned());
            labels.extend(d.labels.iter().copied());
        }
    }
    let fit = train_probe(
        &trained.params,
        &windows,
        &labels,
        ds.n_classes,
        cfg.eval.probe_epochs,
        cfg.eval.probe_lr,
        seeds.probe,
    )?;
    let (params, head) = match cfg.eval.finetune_gamma {
        Some(gamma) => {
            let ft = constrained_finetune(
                &trained.params,
                &fit.head,
                &windows,
                &labels,
                gamma,
                cfg.eval.finetune_epochs,
                cfg.eval.finetune_lr,
            )?;
            (ft.params, ft.head)
        }
        None => (trained.params.clone(), fit.head),
    };
    let t = &ds.domains[target];
    let accuracy = evaluate_accuracy(&params, &head, &t.windows, &t.labels)?;
    Ok(FoldOutcome {
        trained: Trained { params, ..trained },
        head,
        accuracy,
    })
}

/// Directory of one fold's checkpoint.
pub fn fold_dir(root: &Path, method: Method, seed: u64, domain: &str) -> std::path::PathBuf {
    root.join(method.name())
        .join(format!("seed_{seed}"))
        .join(format!("fold_{domain}"))
}

/// A report plus the solver trace of every fold that produced one, labelled
/// `method/seed_S/fold_D`.
#[derive(Clone, Debug)]
pub struct LodoRun {
    pub report: LodoReport,
    pub traces: Vec<(String, SolverTrace)>,
}

/// Leave-one-domain-out over `seeds`. When `checkpoints` is set, each fold
/// writes `encoder.f64`/`encoder.json`, `probe.json` and, for the cutting
/// plane method, `trace.csv` under [`fold_dir`].
pub fn run_lodo(
    ds: &DomainDataset,
    method: Method,
    cfg: &RunConfig,
    seeds: &[u64],
    checkpoints: Option<&Path>,
) -> Result<LodoRun> {
    ds.validate()?;
    if ds.n_domains() < 2 {
        return Err(TtsoError::Input("leave-one-domain-out needs at least 2 domains".into()));
    }
    if seeds.is_empty() {
        return Err(TtsoError::Config("eval.seeds must not be empty".into()));
    }
    let mut rows = Vec::with_capacity(seeds.len());
    let mut traces = Vec::new();
    for &s in seeds {
        let mut accs = Vec::with_capacity(ds.n_domains());
        for (j, dom) in ds.domains.iter().enumerate() {
            let fold = run_fold(ds, method, cfg, j, FoldSeeds::new(cfg.seed, s, j))?;
            if let Some(root) = checkpoints {
                let dir = fold_dir(root, method, s, &dom.id);
                std::fs::create_dir_all(&dir).map_err(|e| TtsoError::io(&dir, e))?;
                fold.trained.params.save(&dir.join("encoder"))?;
                fold.head.save(&dir.join("probe.json"))?;
                if let Some(tr) = &fold.trained.trace {
                    write_atomic(&dir.join("trace.csv"), tr.to_csv().as_bytes())?;
                }
            }
            accs.push(fold.accuracy);
            if let Some(tr) = fold.trained.trace {
                traces.push((format!("{}/seed_{s}/fold_{}", method.name(), dom.id), tr));
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        rows.push(SeedRow {
            seed: s,
            accuracies: accs,
            mean,
        });
    }
    let k = ds.n_domains();
    let (mut mean_per_domain, mut std_per_domain) = (Vec::with_capacity(k), Vec::with_capacity(k));
    for j in 0..k {
        let col: Vec<f64> = rows.iter().map(|r| r.accuracies[j]).collect();
        let (m, s) = mean_std(&col);
        mean_per_domain.push(m);
        std_per_domain.push(s);
    }
    let (mean, std) = mean_std(&rows.iter().map(|r| r.mean).collect::<Vec<_>>());
    let report = LodoReport {
        method,
        config_hash: cfg.experiment_hash(),
        domains: ds.domains.iter().map(|d| d.id.clone()).collect(),
        rows,
        mean_per_domain,
        std_per_domain,
        mean,
        std,
    };
    Ok(LodoRun { report, traces })
}
