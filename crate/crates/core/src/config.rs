//! Versioned TOML experiment configuration and construction of the runtime
//! objects it describes (schedule, prior, denoiser, operator, observation).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::baselines::{BlendedConfig, DpsConfig, RedDiffConfig, RepaintConfig};
use crate::denoiser::gmm::GmmDenoiser;
use crate::denoiser::mlp::MlpDenoiser;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::gmm::GmmPrior;
use crate::operators::{LinearOp, MeasurementOp, ObsModel};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::vipaint::VipaintConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    Ve { sigma_min: f64, sigma_max: f64 },
    Vp { sigma2_min: f64, sigma2_max: f64, t_max: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorSpec {
    /// Gaussian mixture with diagonal covariances, given literally.
    Gmm {
        #[serde(default)]
        weights: Option<Vec<f64>>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<f64>>,
    },
    /// Trained network denoiser loaded from a weights file (path is
    /// resolved relative to the config file).
    Mlp { weights_path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Mask,
    Blur,
    Downsample,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    /// Mask operator: which coordinates are observed.
    #[serde(default)]
    pub mask: Option<Vec<bool>>,
    /// Blur operator: odd kernel length and kernel std.
    #[serde(default)]
    pub len: Option<usize>,
    #[serde(default)]
    pub std: Option<f64>,
    /// Downsample operator: block size.
    #[serde(default)]
    pub factor: Option<usize>,
    pub sigma_v: f64,
    #[serde(default = "default_noise")]
    pub noise: ObsModel,
    #[serde(default)]
    pub laplace_scale: Option<f64>,
}

fn default_noise() -> ObsModel {
    ObsModel::Gaussian
}

impl OperatorSpec {
    fn linear(&self) -> Result<LinearOp> {
        let need = |field: &str| {
            Error::Config(format!(
                "operator: kind {:?} requires field {field}",
                self.kind
            ))
        };
        match self.kind {
            OperatorKind::Mask => {
                LinearOp::mask(self.mask.clone().ok_or_else(|| need("mask"))?)
            }
            OperatorKind::Blur => LinearOp::gaussian_blur(
                self.len.ok_or_else(|| need("len"))?,
                self.std.ok_or_else(|| need("std"))?,
            ),
            OperatorKind::Downsample => {
                LinearOp::downsample(self.factor.ok_or_else(|| need("factor"))?)
            }
        }
    }
}

/// Either a literal observation vector or a ground-truth point to observe
/// through the operator with seed-derived noise.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    #[serde(default)]
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Vipaint,
    Blended,
    Repaint,
    Dps,
    Reddiff,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Vipaint => "vipaint",
            MethodKind::Blended => "blended",
            MethodKind::Repaint => "repaint",
            MethodKind::Dps => "dps",
            MethodKind::Reddiff => "reddiff",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub method: MethodKind,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_samples() -> usize {
    20
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodsSpec {
    #[serde(default)]
    pub vipaint: Option<VipaintConfig>,
    #[serde(default)]
    pub blended: Option<BlendedConfig>,
    #[serde(default)]
    pub repaint: Option<RepaintConfig>,
    #[serde(default)]
    pub dps: Option<DpsConfig>,
    #[serde(default)]
    pub reddiff: Option<RedDiffConfig>,
}

/// Settings for the `train-denoiser` verb: network width, optimization
/// budget, and how many prior samples to train on.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_train_lr")]
    pub lr: f64,
    #[serde(default = "default_train_batch")]
    pub batch: usize,
    #[serde(default = "default_train_data")]
    pub data: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_train_steps() -> usize {
    5000
}
fn default_train_lr() -> f64 {
    1e-3
}
fn default_train_batch() -> usize {
    64
}
fn default_train_data() -> usize {
    4096
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            hidden: default_hidden(),
            steps: default_train_steps(),
            lr: default_train_lr(),
            batch: default_train_batch(),
            data: default_train_data(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub schedule: ScheduleSpec,
    pub prior: PriorSpec,
    pub operator: OperatorSpec,
    pub observation: ObservationSpec,
    pub run: RunSpec,
    #[serde(default)]
    pub methods: MethodsSpec,
    #[serde(default)]
    pub train: Option<TrainSpec>,
}

/// A parsed config plus the SHA-256 of the file it came from and the
/// directory used to resolve relative paths.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: [u8; 32],
    pub dir: PathBuf,
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Read, parse, and validate a config file. Parse errors keep the TOML
/// diagnostics, which include line/column positions.
pub fn load(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path).map_err(|e| {
        Error::FileFormat(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hash: [u8; 32] = hasher.finalize().into();
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{}: not valid UTF-8", path.display())))?;
    let config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let loaded = LoadedConfig { config, hash, dir };
    loaded.validate()?;
    Ok(loaded)
}

impl LoadedConfig {
    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        match (&c.observation.y, &c.observation.truth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "observation: give either y or truth, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "observation: one of y or truth is required".into(),
                ))
            }
            _ => {}
        }
        if let PriorSpec::Mlp { weights_path } = &c.prior {
            let resolved = self.resolve(weights_path);
            if !resolved.is_file() {
                return Err(Error::Config(format!(
                    "prior.weights_path: {} does not exist",
                    resolved.display()
                )));
            }
        }
        match c.run.method {
            MethodKind::Vipaint if c.methods.vipaint.is_none() => Err(Error::Config(
                "run.method = \"vipaint\" requires a [methods.vipaint] table (times at minimum)"
                    .into(),
            )),
            _ => Ok(()),
        }
    }

    /// Resolve a path from the config relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.config.schedule {
            ScheduleSpec::Ve {
                sigma_min,
                sigma_max,
            } => NoiseSchedule::ve(sigma_min, sigma_max),
            ScheduleSpec::Vp {
                sigma2_min,
                sigma2_max,
                t_max,
            } => NoiseSchedule::vp(sigma2_min, sigma2_max, t_max),
        }
    }

    /// The closed-form mixture prior, when the config specifies one.
    pub fn gmm_prior(&self) -> Result<Option<GmmPrior>> {
        match &self.config.prior {
            PriorSpec::Gmm {
                weights,
                means,
                covs,
            } => {
                let prior = match weights {
                    Some(w) => GmmPrior::new(w.clone(), means.clone(), covs.clone())?,
                    None => GmmPrior::uniform(means.clone(), covs.clone())?,
                };
                Ok(Some(prior))
            }
            PriorSpec::Mlp { .. } => Ok(None),
        }
    }

    /// The denoiser the method will call: exact for mixture priors, loaded
    /// from disk for network priors.
    pub fn denoiser(&self) -> Result<Box<dyn Denoiser + Send + Sync>> {
        match &self.config.prior {
            PriorSpec::Gmm { .. } => {
                let prior = self.gmm_prior()?.expect("gmm branch");
                Ok(Box::new(GmmDenoiser::new(prior, self.schedule()?)))
            }
            PriorSpec::Mlp { weights_path } => {
                let net = MlpDenoiser::load(&self.resolve(weights_path))?;
                let want = self.schedule()?;
                if net.schedule() != &want {
                    return Err(Error::Config(
                        "prior.weights_path: stored schedule differs from [schedule]".into(),
                    ));
                }
                Ok(Box::new(net))
            }
        }
    }

    pub fn operator(&self) -> Result<MeasurementOp> {
        let spec = &self.config.operator;
        let scale = spec.laplace_scale.unwrap_or(1.0);
        MeasurementOp::new(spec.linear()?, spec.sigma_v, spec.noise, scale)
    }

    /// The problem dimension: mixture dimension, or the stored network's.
    pub fn dim(&self) -> Result<usize> {
        match &self.config.prior {
            PriorSpec::Gmm { means, .. } => {
                if means.is_empty() {
                    Err(Error::Config("prior.means must be nonempty".into()))
                } else {
                    Ok(means[0].len())
                }
            }
            PriorSpec::Mlp { weights_path } => {
                Ok(MlpDenoiser::load(&self.resolve(weights_path))?.dim())
            }
        }
    }

    /// The observation vector: the literal y, or the configured truth
    /// pushed through the operator with noise from the seed's "obs" stream.
    pub fn observation(&self, op: &MeasurementOp, seed: u64) -> Result<Vec<f64>> {
        let dim = self.dim()?;
        if let Some(y) = &self.config.observation.y {
            let want = op.obs_dim(dim)?;
            if y.len() != want {
                return Err(Error::Config(format!(
                    "observation.y has length {}, operator expects {want}",
                    y.len()
                )));
            }
            return Ok(y.clone());
        }
        let truth = self.config.observation.truth.as_ref().expect("validated");
        if truth.len() != dim {
            return Err(Error::Config(format!(
                "observation.truth has length {}, problem dimension is {dim}",
                truth.len()
            )));
        }
        let mut r = rng::stream(seed, "obs");
        op.observe(truth, &mut r)
    }
}
