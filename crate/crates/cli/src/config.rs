//! Run configuration: a TOML document whose every field has a default.
//!
//! ```toml
//! seed = 0
//!
//! [problem]
//! geometry = "full-view"      # full-view | limited-view | experimental
//! grid = 32                   # inversion grid (pixels per side)
//! data_grid = 33              # grid used to simulate data
//! sigma_amp = 0.05
//! sigma_phase = 0.001
//!
//! [diffusion]
//! covariance = "identity"     # identity | ou
//! sigma = 1.0                 # OU only
//! ell_mm = 10.0               # OU only
//!
//! [dataset]
//! size = 10000
//! min_inclusions = 1
//! max_inclusions = 3
//! max_radius_mm = 10.0
//!
//! [network]
//! profile = "default"         # default | reduced
//! activation = "silu"         # silu | gelu | tanh
//!
//! [training]
//! mode = "ucos"               # ucos | unconditional
//! epochs = 20
//! batch_size = 32
//! t_truncation = 0.001
//! lr_start = 0.002
//! lr_end = 0.0005
//! weight_decay = 1e-4
//! weighting = "uniform"       # uniform | lambda2
//!
//! [sampling]
//! method = "ucos"             # ucos | ucos-reg | dps | gaussian
//! alpha = 0.5                 # ucos-reg only
//! samples = 100
//! steps = 500
//! t_min = 0.005
//! t_max = 1.0
//! beta_min = 0.05
//! beta_max = 10.0
//!
//! [prior]                     # model-based OU prior on the rescaled field
//! mean = 0.035
//! sigma = 0.15
//! ell_mm = 10.0
//!
//! [dps]
//! rho = 1.0
//! normalize = true
//!
//! [target]
//! kind = "disk"               # disk | phantom | ellipse | triangle | file
//! center_mm = [18.0, 30.0]
//! radius_mm = 7.0
//! contrast = [0.7, 0.5]       # absorption, scattering
//! phantom_seed = 0
//! noise_seed = 1
//! data_file = "measured.f64"  # kind = "file": physical difference data
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::PipelineError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub problem: ProblemConfig,
    pub diffusion: DiffusionConfig,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub training: TrainingSection,
    pub sampling: SamplingConfig,
    pub prior: PriorConfig,
    pub dps: DpsSection,
    pub target: TargetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub geometry: String,
    pub grid: usize,
    pub data_grid: usize,
    pub sigma_amp: f64,
    pub sigma_phase: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            geometry: "full-view".into(),
            grid: 32,
            data_grid: 33,
            sigma_amp: 0.05,
            sigma_phase: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub covariance: String,
    pub sigma: f64,
    pub ell_mm: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            covariance: "identity".into(),
            sigma: 1.0,
            ell_mm: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    pub min_inclusions: usize,
    pub max_inclusions: usize,
    pub max_radius_mm: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 10_000,
            min_inclusions: 1,
            max_inclusions: 3,
            max_radius_mm: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub profile: String,
    pub activation: String,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            profile: "default".into(),
            activation: "silu".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub t_truncation: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub weighting: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            mode: "ucos".into(),
            epochs: 20,
            batch_size: 32,
            t_truncation: 0.001,
            lr_start: 0.002,
            lr_end: 0.0005,
            weight_decay: 1e-4,
            weighting: "uniform".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub method: String,
    pub alpha: f64,
    pub samples: usize,
    pub steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            method: "ucos".into(),
            alpha: 0.5,
            samples: 100,
            steps: 500,
            t_min: 0.005,
            t_max: 1.0,
            beta_min: 0.05,
            beta_max: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub mean: f64,
    pub sigma: f64,
    pub ell_mm: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mean: 0.035,
            sigma: 0.15,
            ell_mm: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpsSection {
    pub rho: f64,
    pub normalize: bool,
}

impl Default for DpsSection {
    fn default() -> Self {
        Self {
            rho: 1.0,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: String,
    pub center_mm: [f64; 2],
    pub radius_mm: f64,
    pub contrast: [f64; 2],
    pub phantom_seed: u64,
    pub noise_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_file: Option<PathBuf>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            kind: "disk".into(),
            center_mm: [18.0, 30.0],
            radius_mm: 7.0,
            contrast: [0.7, 0.5],
            phantom_seed: 0,
            noise_seed: 1,
            data_file: None,
        }
    }
}

fn usage(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn one_of(path: &str, value: &str, allowed: &[&str]) -> Result<(), PipelineError> {
    if allowed.contains(&value) {
        Ok(())
    } else {
        Err(usage(format!(
            "{path}: expected one of {allowed:?}, got {value:?}"
        )))
    }
}

fn positive(path: &str, v: f64) -> Result<(), PipelineError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("{path}: must be positive, got {v}")))
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Config = toml::from_str(text).map_err(|e| usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let p = &self.problem;
        one_of(
            "problem.geometry",
            &p.geometry,
            &["full-view", "limited-view", "experimental"],
        )?;
        if p.grid < 2 || p.data_grid < 2 {
            return Err(usage(
                "problem.grid and problem.data_grid must be at least 2",
            ));
        }
        positive("problem.sigma_amp", p.sigma_amp)?;
        positive("problem.sigma_phase", p.sigma_phase)?;

        one_of(
            "diffusion.covariance",
            &self.diffusion.covariance,
            &["identity", "ou"],
        )?;
        positive("diffusion.sigma", self.diffusion.sigma)?;
        positive("diffusion.ell_mm", self.diffusion.ell_mm)?;

        let d = &self.dataset;
        if d.size == 0 {
            return Err(usage("dataset.size must be at least 1"));
        }
        if d.min_inclusions > d.max_inclusions {
            return Err(usage(
                "dataset.min_inclusions exceeds dataset.max_inclusions",
            ));
        }
        positive("dataset.max_radius_mm", d.max_radius_mm)?;

        one_of(
            "network.profile",
            &self.network.profile,
            &["default", "reduced"],
        )?;
        one_of(
            "network.activation",
            &self.network.activation,
            &["silu", "gelu", "tanh"],
        )?;

        let t = &self.training;
        one_of("training.mode", &t.mode, &["ucos", "unconditional"])?;
        one_of("training.weighting", &t.weighting, &["uniform", "lambda2"])?;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(usage(
                "training.epochs and training.batch_size must be positive",
            ));
        }
        if !(t.t_truncation > 0.0 && t.t_truncation < 1.0) {
            return Err(usage("training.t_truncation must lie in (0, 1)"));
        }
        positive("training.lr_start", t.lr_start)?;
        positive("training.lr_end", t.lr_end)?;
        if !(t.weight_decay >= 0.0) {
            return Err(usage("training.weight_decay must be nonnegative"));
        }

        let s = &self.sampling;
        one_of(
            "sampling.method",
            &s.method,
            &["ucos", "ucos-reg", "dps", "gaussian"],
        )?;
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(usage(format!(
                "sampling.alpha must lie in [0, 1], got {}",
                s.alpha
            )));
        }
        if s.samples == 0 || s.steps == 0 {
            return Err(usage(
                "sampling.samples and sampling.steps must be positive",
            ));
        }
        if !(s.t_min > 0.0 && s.t_min < s.t_max && s.t_max <= 1.0) {
            return Err(usage("sampling: need 0 < t_min < t_max <= 1"));
        }
        positive("sampling.beta_min", s.beta_min)?;
        positive("sampling.beta_max", s.beta_max)?;

        positive("prior.sigma", self.prior.sigma)?;
        positive("prior.ell_mm", self.prior.ell_mm)?;
        if !(self.dps.rho >= 0.0) {
            return Err(usage("dps.rho must be nonnegative"));
        }

        let tg = &self.target;
        one_of(
            "target.kind",
            &tg.kind,
            &["disk", "phantom", "ellipse", "triangle", "file"],
        )?;
        if tg.kind == "file" && tg.data_file.is_none() {
            return Err(usage(
                "target.data_file is required when target.kind = \"file\"",
            ));
        }
        if tg.kind == "disk" {
            positive("target.radius_mm", tg.radius_mm)?;
        }
        Ok(())
    }

    /// Deterministic serialisation that every digest is taken over.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    /// Seed for one pipeline stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}
