//! Multi-domain time-series datasets: a seeded synthetic generator, the
//! sliding-window and per-domain standardization protocol, and CSV ingestion.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtsoError};
use crate::report::write_atomic;
use crate::rng;

pub const STD_FLOOR: f64 = 1e-8;

/// One source of windows. Each window is a row-major `window_len x n_features`
/// buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub id: String,
    pub windows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domains: Vec<Domain>,
    pub n_classes: usize,
    pub window_len: usize,
    pub n_features: usize,
    /// Where the data came from (generator settings or manifest path).
    pub meta: String,
}

impl DomainDataset {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(TtsoError::Input("dataset has no classes".into()));
        }
        let len = self.window_len * self.n_features;
        for d in &self.domains {
            if d.windows.is_empty() {
                return Err(TtsoError::Input(format!("domain {} is empty", d.id)));
            }
            if d.windows.len() != d.labels.len() {
                return Err(TtsoError::Input(format!(
                    "domain {}: {} windows but {} labels",
                    d.id,
                    d.windows.len(),
                    d.labels.len()
                )));
            }
            if let Some(w) = d.windows.iter().find(|w| w.len() != len) {
                return Err(TtsoError::Input(format!(
                    "domain {}: window of length {} where {} was expected",
                    d.id,
                    w.len(),
                    len
                )));
            }
            if let Some(&l) = d.labels.iter().find(|&&l| l >= self.n_classes) {
                return Err(TtsoError::Input(format!(
                    "domain {}: label {} outside [0, {})",
                    d.id, l, self.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }
}

// ---------------------------------------------------------------------------
// Protocol

/// Sliding windows over a row-major `len x n_features` series, starting at
/// `0, step, 2 step, ...` while the window fits.
pub fn window_series(series: &[f64], n_features: usize, win: usize, step: usize) -> Result<Vec<Vec<f64>>> {
    if n_features == 0 || !series.len().is_multiple_of(n_features) {
        return Err(TtsoError::Input(format!(
            "series of {} values is not a whole number of {}-feature rows",
            series.len(),
            n_features
        )));
    }
    if win == 0 || step == 0 {
        return Err(TtsoError::Input("window and step must be positive".into()));
    }
    let len = series.len() / n_features;
    if len < win {
        return Err(TtsoError::Input(format!(
            "series length {len} is shorter than the window {win}"
        )));
    }
    let count = (len - win) / step + 1;
    Ok((0..count)
        .map(|i| series[i * step * n_features..(i * step + win) * n_features].to_vec())
        .collect())
}

/// Per-feature mean and standard deviation over every time step of every
/// window of one domain.
pub fn domain_stats(windows: &[Vec<f64>], n_features: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; n_features];
    let mut count = 0usize;
    for w in windows {
        for row in w.chunks_exact(n_features) {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut var = vec![0.0; n_features];
    for w in windows {
        for row in w.chunks_exact(n_features) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    (mean, std)
}

/// `(x - mean) / max(std, 1e-8)` with statistics from this domain only.
pub fn standardize_domain(windows: &[Vec<f64>], n_features: usize) -> Vec<Vec<f64>> {
    let (mean, std) = domain_stats(windows, n_features);
    windows
        .iter()
        .map(|w| {
            let mut out = w.clone();
            for row in out.chunks_exact_mut(n_features) {
                for ((x, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                    *x = (*x - m) / s.max(STD_FLOOR);
                }
            }
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Distribution shift applied to one domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Multiplier on the class signal (1 = none).
    pub amplitude_scale: f64,
    /// Added to every class frequency, in cycles per window.
    pub freq_offset: f64,
    /// Std of noise shared across channels plus an equal independent part.
    pub noise_level: f64,
    /// Amplitude of a slow domain-specific baseline wander.
    pub baseline_offset: f64,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift {
        amplitude_scale: 1.0,
        freq_offset: 0.0,
        noise_level: 0.0,
        baseline_offset: 0.0,
    };
}

fn default_components() -> usize {
    3
}
fn default_noise() -> f64 {
    0.3
}
fn default_jitter() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_features: usize,
    /// Series per domain; classes are assigned round-robin.
    pub samples_per_domain: usize,
    pub series_len: usize,
    pub window_len: usize,
    pub step: usize,
    /// One entry per domain.
    pub shifts: Vec<DomainShift>,
    /// Seeds of each class's base waveform; derived from `seed` when empty.
    #[serde(default)]
    pub class_seeds: Vec<u64>,
    #[serde(default = "default_components")]
    pub n_components: usize,
    /// Std of independent per-sample noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Std of the per-sample phase jitter in radians.
    #[serde(default = "default_jitter")]
    pub phase_jitter: f64,
    /// Set by the caller; run configs derive it from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl SynthConfig {
    /// Four domains with moderate shifts of every kind.
    pub fn moderate(seed: u64) -> Self {
        let s = |a, f, n, b| DomainShift {
            amplitude_scale: a,
            freq_offset: f,
            noise_level: n,
            baseline_offset: b,
        };
        Self {
            n_classes: 3,
            n_features: 3,
            samples_per_domain: 60,
            series_len: 24,
            window_len: 24,
            step: 24,
            shifts: vec![
                s(1.0, 0.0, 0.2, 0.3),
                s(0.7, 0.15, 0.5, 0.8),
                s(1.3, -0.15, 0.3, 1.2),
                s(0.9, 0.3, 0.6, 0.5),
            ],
            class_seeds: Vec::new(),
            n_components: default_components(),
            noise: default_noise(),
            phase_jitter: default_jitter(),
            seed,
        }
    }

    pub fn n_domains(&self) -> usize {
        self.shifts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TtsoError::Config(m));
        if self.shifts.len() < 2 {
            return bad(format!(
                "data.shifts must list at least 2 domains, got {}",
                self.shifts.len()
            ));
        }
        if self.n_classes < 2 {
            return bad(format!("data.n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.n_features == 0 || self.window_len == 0 || self.step == 0 || self.n_components == 0 {
            return bad("data.n_features, data.window_len, data.step and data.n_components must be positive".into());
        }
        if self.samples_per_domain == 0 {
            return bad("data.samples_per_domain must be positive".into());
        }
        if self.series_len < self.window_len {
            return bad(format!(
                "data.series_len ({}) must be at least data.window_len ({})",
                self.series_len, self.window_len
            ));
        }
        if !self.class_seeds.is_empty() && self.class_seeds.len() != self.n_classes {
            return bad(format!(
                "data.class_seeds must be empty or list {} seeds, got {}",
                self.n_classes,
                self.class_seeds.len()
            ));
        }
        if !(self.noise >= 0.0) || !(self.phase_jitter >= 0.0) {
            return bad("data.noise and data.phase_jitter must be nonnegative".into());
        }
        for (i, s) in self.shifts.iter().enumerate() {
            if !(s.amplitude_scale >= 0.0)
                || !(s.noise_level >= 0.0)
                || !(s.baseline_offset >= 0.0)
                || !s.freq_offset.is_finite()
            {
                return bad(format!("data.shifts[{i}]: magnitudes must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    fn class_seed(&self, c: usize) -> u64 {
        self.class_seeds
            .get(c)
            .copied()
            .unwrap_or_else(|| rng::derive_seed(self.seed, "class-wave", &[c as u64]))
    }
}

struct ClassWave {
    freq: Vec<f64>,
    /// `n_components x n_features`.
    amp: Vec<f64>,
    phase: Vec<f64>,
    env_freq: f64,
    env_phase: f64,
}

impl ClassWave {
    fn new(seed: u64, n_comp: usize, n_features: usize) -> Self {
        let mut r = rng::stream(seed, "wave", &[]);
        let freq = (0..n_comp).map(|_| r.random_range(0.5..4.0)).collect();
        let amp = (0..n_comp * n_features)
            .map(|_| {
                let a: f64 = r.random_range(0.5..1.5);
                if r.random::<bool>() {
                    a
                } else {
                    -a
                }
            })
            .collect();
        let phase = (0..n_comp * n_features)
            .map(|_| r.random_range(0.0..2.0 * PI))
            .collect();
        Self {
            freq,
            amp,
            phase,
            env_freq: r.random_range(0.2..1.0),
            env_phase: r.random_range(0.0..2.0 * PI),
        }
    }
}

/// Generate every domain, window it, and standardize per domain.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<DomainDataset> {
    cfg.validate()?;
    let (nf, len, wl) = (cfg.n_features, cfg.series_len, cfg.window_len as f64);
    let waves: Vec<ClassWave> = (0..cfg.n_classes)
        .map(|c| ClassWave::new(cfg.class_seed(c), cfg.n_components, nf))
        .collect();
    let mut domains = Vec::with_capacity(cfg.n_domains());
    for (di, shift) in cfg.shifts.iter().enumerate() {
        let mut dr = rng::stream(cfg.seed, "domain-baseline", &[di as u64]);
        let base_freq: f64 = dr.random_range(0.05..0.25);
        let base_phase: Vec<f64> = (0..nf).map(|_| dr.random_range(0.0..2.0 * PI)).collect();
        let mut windows = Vec::new();
        let mut labels = Vec::new();
        for j in 0..cfg.samples_per_domain {
            let c = j % cfg.n_classes;
            let w = &waves[c];
            let mut r = rng::stream(cfg.seed, "sample", &[di as u64, j as u64]);
            let mut gauss = || -> f64 { StandardNormal.sample(&mut r) };
            let jitter = cfg.phase_jitter * gauss();
            let gain = 1.0 + 0.1 * gauss();
            let mut series = vec![0.0; len * nf];
            for t in 0..len {
                let tt = t as f64 / wl;
                let env = 1.0 + 0.5 * (2.0 * PI * w.env_freq * tt + w.env_phase).sin();
                let common = gauss();
                for f in 0..nf {
                    let mut s = 0.0;
                    for m in 0..cfg.n_components {
                        let fr = w.freq[m] + shift.freq_offset;
                        s += w.amp[m * nf + f] * (2.0 * PI * fr * tt + w.phase[m * nf + f] + jitter).sin();
                    }
                    let baseline = shift.baseline_offset * (2.0 * PI * base_freq * tt + base_phase[f]).sin();
                    let corr = shift.noise_level * (common + gauss()) / 2f64.sqrt();
                    series[t * nf + f] = shift.amplitude_scale * gain * env * s + baseline + corr + cfg.noise * gauss();
                }
            }
            for win in window_series(&series, nf, cfg.window_len, cfg.step)? {
                windows.push(win);
                labels.push(c);
            }
        }
        domains.push(Domain {
            id: domain_name(di),
            windows: standardize_domain(&windows, nf),
            labels,
        });
    }
    let meta = serde_json::to_string(cfg).map_err(|e| TtsoError::Input(e.to_string()))?;
    Ok(DomainDataset {
        domains,
        n_classes: cfg.n_classes,
        window_len: cfg.window_len,
        n_features: nf,
        meta: format!("synthetic seed={} {meta}", cfg.seed),
    })
}

/// `A`, `B`, ..., `Z`, `D26`, ...
pub fn domain_name(i: usize) -> String {
    if i < 26 {
        ((b'A' + i as u8) as char).to_string()
    } else {
        format!("D{i}")
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub domain: String,
    pub label_column: String,
    pub feature_columns: Vec<String>,
}

/// TOML manifest mapping series files to domains and columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub window: usize,
    pub step: usize,
    /// Inferred as `max label + 1` when absent.
    #[serde(default)]
    pub n_classes: Option<usize>,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TtsoError::io(path, e))?;
        toml::from_str(&text).map_err(|e| TtsoError::Manifest(format!("{}: {}", path.display(), e.message())))
    }
}

struct Parsed {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn parse_csv(path: &Path, spec: &ManifestFile) -> Result<Parsed> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => TtsoError::io(path, io),
            other => TtsoError::Manifest(format!("{file}: {other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| TtsoError::Manifest(format!("{file}: unreadable header row: {e}")))?
        .clone();
    if header.is_empty() {
        return Err(TtsoError::Manifest(format!(
            "{file}: empty file, expected a header row"
        )));
    }
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TtsoError::Manifest(format!("{file}: missing column '{name}'")))
    };
    let label_idx = col(&spec.label_column)?;
    let feat_idx: Vec<usize> = spec.feature_columns.iter().map(|c| col(c)).collect::<Result<_>>()?;
    if feat_idx.is_empty() {
        return Err(TtsoError::Manifest(format!("{file}: no feature columns listed")));
    }
    let mut out = Parsed {
        rows: Vec::new(),
        labels: Vec::new(),
    };
    for rec in reader.records() {
        let rec = rec.map_err(|e| TtsoError::Parse {
            file: file.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line_no = rec.position().map_or(0, |p| p.line() as usize);
        let num = |j: usize| -> Result<f64> {
            let cell = rec.get(j).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(TtsoError::Parse {
                    file: file.clone(),
                    line: line_no,
                    msg: format!("non-numeric value '{cell}' in column '{}'", &header[j]),
                }),
            }
        };
        let lab = num(label_idx)?;
        if lab < 0.0 || lab.fract() != 0.0 {
            return Err(TtsoError::Parse {
                file: file.clone(),
                line: line_no,
                msg: format!(
                    "label '{}' is not a nonnegative integer",
                    rec.get(label_idx).unwrap_or("")
                ),
            });
        }
        out.labels.push(lab as usize);
        out.rows.push(feat_idx.iter().map(|&j| num(j)).collect::<Result<_>>()?);
    }
    Ok(out)
}

/// Majority label of a window, ties to the lowest class.
fn majority(labels: &[usize]) -> usize {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    labels.iter().for_each(|&l| counts[l] += 1);
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Read every file of the manifest, window it, and standardize per domain.
/// Domains appear in order of first mention in the manifest.
pub fn load_csv_dataset(manifest_path: &Path) -> Result<DomainDataset> {
    let manifest = Manifest::from_path(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.files.is_empty() {
        return Err(TtsoError::Manifest("manifest lists no files".into()));
    }
    let nf = manifest.files[0].feature_columns.len();
    let mut order: Vec<String> = Vec::new();
    let mut raw: Vec<(Vec<Vec<f64>>, Vec<usize>)> = Vec::new();
    for spec in &manifest.files {
        if spec.feature_columns.len() != nf {
            return Err(TtsoError::Manifest(format!(
                "{}: {} feature columns, other files have {}",
                spec.path.display(),
                spec.feature_columns.len(),
                nf
            )));
        }
        let path = dir.join(&spec.path);
        let parsed = parse_csv(&path, spec)?;
        let flat: Vec<f64> = parsed.rows.concat();
        let label_series: Vec<f64> = parsed.labels.iter().map(|&l| l as f64).collect();
        let windows = window_series(&flat, nf, manifest.window, manifest.step)
            .map_err(|e| TtsoError::Manifest(format!("{}: {e}", path.display())))?;
        let label_windows = window_series(&label_series, 1, manifest.window, manifest.step)?;
        let slot = match order.iter().position(|d| *d == spec.domain) {
            Some(p) => p,
            None => {
                order.push(spec.domain.clone());
                raw.push((Vec::new(), Vec::new()));
                order.len() - 1
            }
        };
        raw[slot].0.extend(windows);
        raw[slot].1.extend(
            label_windows
                .iter()
                .map(|w| majority(&w.iter().map(|&v| v as usize).collect::<Vec<_>>())),
        );
    }
    let max_label = raw.iter().flat_map(|(_, l)| l.iter().copied()).max().unwrap_or(0);
    let n_classes = manifest.n_classes.unwrap_or(max_label + 1);
    let ds = DomainDataset {
        domains: order
            .into_iter()
            .zip(raw)
            .map(|(id, (w, labels))| Domain {
                id,
                windows: standardize_domain(&w, nf),
                labels,
            })
            .collect(),
        n_classes,
        window_len: manifest.window,
        n_features: nf,
        meta: format!("csv {}", manifest_path.display()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Write one CSV per domain (windows back to back, `label` column first)
/// plus `manifest.toml` that reloads them with `window = step = window_len`.
/// Returns the manifest path.
pub fn export_csv(ds: &DomainDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| TtsoError::io(dir, e))?;
    let features: Vec<String> = (0..ds.n_features).map(|f| format!("x{f}")).collect();
    let mut files = Vec::new();
    for d in &ds.domains {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string()];
        header.extend(features.iter().cloned());
        let csv_err = |e: csv::Error| TtsoError::Input(format!("csv encoding failed: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for (win, &l) in d.windows.iter().zip(&d.labels) {
            for row in win.chunks_exact(ds.n_features) {
                let mut rec = vec![l.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        let text = w
            .into_inner()
            .map_err(|e| TtsoError::Input(format!("csv encoding failed: {e}")))?;
        let name = format!("domain_{}.csv", d.id);
        write_atomic(&dir.join(&name), &text)?;
        files.push(ManifestFile {
            path: PathBuf::from(name),
            domain: d.id.clone(),
            label_column: "label".into(),
            feature_columns: features.clone(),
        });
    }
    let manifest = Manifest {
        window: ds.window_len,
        step: ds.window_len,
        n_classes: Some(ds.n_classes),
        files,
    };
    let text = toml::to_string(&manifest).map_err(|e| TtsoError::Manifest(e.to_string()))?;
    let path = dir.join("manifest.toml");
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts_and_starts() {
        let series: Vec<f64> = (0..256).map(|v| v as f64).collect();
        let w = window_series(&series, 1, 128, 64).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.iter().map(|x| x[0]).collect::<Vec<_>>(), vec![0.0, 64.0, 128.0]);
        assert_eq!(window_series(&series, 1, 256, 64).unwrap().len(), 1);
        assert_eq!(window_series(&series, 1, 64, 64).unwrap().len(), 4);
        assert!(matches!(window_series(&series, 1, 300, 64), Err(TtsoError::Input(_))));
    }

    #[test]
    fn multi_feature_windows_keep_rows_together() {
        let series: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let w = window_series(&series, 2, 4, 3).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1], (6..14).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn standardize_moments_and_guard() {
        let w = vec![vec![1.0, 5.0, 2.0, 5.0], vec![3.0, 5.0, 10.0, 5.0]];
        let s = standardize_domain(&w, 2);
        let (m, sd) = domain_stats(&s, 2);
        assert!(m[0].abs() < 1e-12 && (sd[0] - 1.0).abs() < 1e-12);
        assert!(s.iter().all(|x| x[1] == 0.0 && x[3] == 0.0));
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig::moderate(3);
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_domains(), 4);
        a.validate().unwrap();
    }

    #[test]
    fn majority_prefers_lowest_on_ties() {
        assert_eq!(majority(&[2, 1, 2, 1]), 1);
        assert_eq!(majority(&[0, 3, 3]), 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = SynthConfig::moderate(0);
        c.shifts.truncate(1);
        assert!(c.validate().is_err());
        let mut c = SynthConfig::moderate(0);
        c.shifts[0].noise_level = -1.0;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::moderate(0);
        c.n_classes = 1;
        assert!(c.validate().is_err());
    }
}
