//! Run configuration: one TOML file with a section per module plus the run
//! seed and output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{AugChoice, F1Mode};
use crate::cutplane::CutplaneConfig;
use crate::data::{gen_synthetic, load_csv_dataset, DomainDataset, SynthConfig};
use crate::diffmodel::Architecture;
use crate::error::{Result, TtsoError};
use crate::group::{InnerStepSign, P2Config};
use crate::losses::AugmentationKind;
use crate::perturb::{P3Config, PerturbMode};
use crate::sla::SlaConfig;

fn default_lambda_con() -> f64 {
    0.5
}

fn default_augmentations() -> Vec<AugChoice> {
    vec![
        AugChoice {
            kind: AugmentationKind::Jitter,
            magnitude: 0.2,
        },
        AugChoice {
            kind: AugmentationKind::Scale,
            magnitude: 0.3,
        },
        AugChoice {
            kind: AugmentationKind::Shift,
            magnitude: 0.3,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_lambda_con")]
    pub lambda_con: f64,
    #[serde(default)]
    pub f1_mode: F1Mode,
    #[serde(default = "default_augmentations")]
    pub augmentations: Vec<AugChoice>,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lambda_con: default_lambda_con(),
            f1_mode: F1Mode::default(),
            augmentations: default_augmentations(),
        }
    }
}

fn default_mode() -> PerturbMode {
    PerturbMode::GmmReparam
}
fn default_components() -> usize {
    2
}
fn default_init_sigma() -> f64 {
    0.05
}
fn default_c() -> f64 {
    1.0
}
fn default_rho() -> [f64; 4] {
    [1.0; 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    #[serde(default = "default_mode")]
    pub mode: PerturbMode,
    #[serde(default = "default_components")]
    pub n_components: usize,
    #[serde(default = "default_init_sigma")]
    pub init_sigma: f64,
    #[serde(default = "default_c")]
    pub c1: f64,
    #[serde(default = "default_c")]
    pub c2: f64,
    #[serde(default = "default_rho")]
    pub rho: [f64; 4],
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            n_components: default_components(),
            init_sigma: default_init_sigma(),
            c1: default_c(),
            c2: default_c(),
            rho: default_rho(),
        }
    }
}

impl PerturbSection {
    pub fn p3(&self) -> P3Config {
        P3Config {
            c1: self.c1,
            c2: self.c2,
            rho: self.rho,
        }
    }
}

fn default_lambdas() -> [f64; 4] {
    P2Config::default().lambdas
}
fn default_tau() -> f64 {
    P2Config::default().tau
}
fn default_true() -> bool {
    true
}
fn default_sign() -> InnerStepSign {
    InnerStepSign::Ascent
}
fn default_groupdro_eta() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSection {
    #[serde(default = "default_lambdas")]
    pub lambdas: [f64; 4],
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_true")]
    pub tau_term: bool,
    #[serde(default)]
    pub squared_hinge: bool,
    #[serde(default = "default_sign")]
    pub sign: InnerStepSign,
    /// Exponentiated-gradient step of the reweighting baseline.
    #[serde(default = "default_groupdro_eta")]
    pub groupdro_eta: f64,
}

impl Default for GroupSection {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
            tau: default_tau(),
            tau_term: true,
            squared_hinge: false,
            sign: default_sign(),
            groupdro_eta: default_groupdro_eta(),
        }
    }
}

impl GroupSection {
    pub fn p2(&self) -> P2Config {
        P2Config {
            lambdas: self.lambdas,
            tau: self.tau,
            tau_term: self.tau_term,
            squared_hinge: self.squared_hinge,
        }
    }
}

/// Exactly one of `synthetic` or `manifest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthConfig>,
    /// CSV manifest, relative to the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    GroupDro,
    Ttso,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::GroupDro => "group_dro",
            Method::Ttso => "ttso",
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_methods() -> Vec<Method> {
    vec![Method::Erm, Method::Ttso]
}
fn default_probe_epochs() -> usize {
    300
}
fn default_probe_lr() -> f64 {
    0.5
}
fn default_finetune_epochs() -> usize {
    20
}
fn default_finetune_lr() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Replicate indices; each is combined with the run seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub probe_lr: f64,
    /// Radius of the fine-tuning ball; no fine-tuning when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_gamma: Option<f64>,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            methods: default_methods(),
            probe_epochs: default_probe_epochs(),
            probe_lr: default_probe_lr(),
            finetune_gamma: None,
            finetune_epochs: default_finetune_epochs(),
            finetune_lr: default_finetune_lr(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub architecture: Architecture,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub perturb: PerturbSection,
    #[serde(default)]
    pub group: GroupSection,
    #[serde(default)]
    pub cutplane: CutplaneConfig,
    pub sla: SlaConfig,
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(TtsoError::Config(format!(
            "{path} must be positive and finite, got {v}"
        )))
    }
}

fn nonneg(path: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(TtsoError::Config(format!(
            "{path} must be nonnegative and finite, got {v}"
        )))
    }
}

impl RunConfig {
    /// Parse TOML. Unknown keys and type errors are reported with their
    /// dotted path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| TtsoError::Config(e.message().to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            TtsoError::Config(format!("{path}: {}", inner.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config; a relative `data.manifest` is resolved against the
    /// config's directory and stored as an absolute path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TtsoError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(m) = &cfg.data.manifest {
            let joined = match path.parent() {
                Some(dir) if m.is_relative() => dir.join(m),
                _ => m.clone(),
            };
            cfg.data.manifest = Some(std::path::absolute(&joined).map_err(|e| TtsoError::io(&joined, e))?);
        }
        Ok(cfg)
    }

    /// The dataset this config describes. Synthetic data is generated from
    /// a stream derived from the run seed.
    pub fn dataset(&self) -> Result<DomainDataset> {
        match (&self.data.synthetic, &self.data.manifest) {
            (Some(s), None) => {
                let mut s = s.clone();
                s.seed = crate::rng::derive_seed(self.seed, "data", &[]);
                gen_synthetic(&s)
            }
            (None, Some(m)) => {
                let ds = load_csv_dataset(m)?;
                if ds.window_len != self.architecture.window_len || ds.n_features != self.architecture.n_features {
                    return Err(TtsoError::Config(format!(
                        "data.manifest windows are {}x{} but the architecture expects {}x{}",
                        ds.window_len, ds.n_features, self.architecture.window_len, self.architecture.n_features
                    )));
                }
                Ok(ds)
            }
            _ => Err(TtsoError::Config(
                "data: set exactly one of data.synthetic or data.manifest".into(),
            )),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TtsoError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.sla.validate()?;
        self.cutplane.validate()?;

        nonneg("loss.lambda_con", self.loss.lambda_con)?;
        if self.loss.augmentations.is_empty() {
            return Err(TtsoError::Config(
                "loss.augmentations must list at least one augmentation".into(),
            ));
        }
        for (i, a) in self.loss.augmentations.iter().enumerate() {
            nonneg(&format!("loss.augmentations[{i}].magnitude"), a.magnitude)?;
        }

        let p = &self.perturb;
        if p.n_components == 0 {
            return Err(TtsoError::Config("perturb.n_components must be at least 1".into()));
        }
        positive("perturb.init_sigma", p.init_sigma)?;
        nonneg("perturb.c1", p.c1)?;
        nonneg("perturb.c2", p.c2)?;
        for (i, r) in p.rho.iter().enumerate() {
            nonneg(&format!("perturb.rho[{i}]"), *r)?;
        }

        let g = &self.group;
        for (i, l) in g.lambdas.iter().enumerate() {
            nonneg(&format!("group.lambdas[{i}]"), *l)?;
        }
        nonneg("group.tau", g.tau)?;
        positive("group.groupdro_eta", g.groupdro_eta)?;

        match (&self.data.synthetic, &self.data.manifest) {
            (Some(s), None) => {
                s.validate()?;
                if s.window_len != self.architecture.window_len || s.n_features != self.architecture.n_features {
                    return Err(TtsoError::Config(format!(
                        "data.synthetic window {}x{} does not match architecture {}x{}",
                        s.window_len, s.n_features, self.architecture.window_len, self.architecture.n_features
                    )));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(TtsoError::Config(
                    "data: set exactly one of data.synthetic or data.manifest".into(),
                ))
            }
        }

        let e = &self.eval;
        if e.seeds.is_empty() {
            return Err(TtsoError::Config("eval.seeds must not be empty".into()));
        }
        if e.methods.is_empty() {
            return Err(TtsoError::Config("eval.methods must not be empty".into()));
        }
        positive("eval.probe_lr", e.probe_lr)?;
        positive("eval.finetune_lr", e.finetune_lr)?;
        if let Some(gm) = e.finetune_gamma {
            nonneg("eval.finetune_gamma", gm)?;
        }
        Ok(())
    }

    /// Hash of everything that determines data, splits and training except
    /// the method list and the output location, so reports of different
    /// methods from one config share it.
    pub fn experiment_hash(&self) -> String {
        let mut c = self.clone();
        c.eval.methods.clear();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// A small but complete configuration on the moderate synthetic preset.
    pub fn example() -> Self {
        let synth = SynthConfig::moderate(0);
        let mut sla = SlaConfig::new(300, 1e-3, 1e-4);
        sla.plane_every = 10;
        Self {
            seed: 7,
            output_dir: default_output_dir(),
            architecture: Architecture::mlp(synth.window_len, synth.n_features, 16, &[32]),
            loss: LossSection::default(),
            perturb: PerturbSection::default(),
            group: GroupSection::default(),
            cutplane: CutplaneConfig::default(),
            sla,
            data: DataSection {
                synthetic: Some(synth),
                manifest: None,
            },
            eval: EvalSection::default(),
        }
    }
}
