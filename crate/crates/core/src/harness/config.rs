use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugmentSpec;
use crate::error::{Error, Result};
use crate::losses::{FocalSpec, JointLossSpec, ReweightSpec, SmoothingMode, SmoothingSpec, VicRegSpec};
use crate::optim::{SamMode, SamSpec, TrainConfig};

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// CSV files with a label column. Without a test file the training file
    /// is also used for evaluation.
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
    /// Balanced isotropic Gaussian mixture, generated per trial seed unless
    /// `data_seed` pins it.
    Gaussian {
        n_classes: usize,
        n_train_per_class: usize,
        n_test_per_class: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        mean_radius: f64,
        sigma: f64,
        #[serde(default)]
        data_seed: Option<u64>,
    },
}

fn default_label_column() -> String {
    "label".into()
}

fn default_dim() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Ce,
    Smoothed,
    Focal,
    Reweighted,
}

/// Keeps one class at `n_minority` samples and every other class at
/// `n_majority`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MajorityGrowth {
    pub minority_class: usize,
    pub n_minority: usize,
    pub n_majority: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub loss: LossKind,
    pub smoothing: SmoothingSpec,
    pub focal: FocalSpec,
    pub reweight: ReweightSpec,
    pub sam: SamSpec,
    pub joint_ssl: bool,
    pub vicreg: VicRegSpec,
    pub joint: JointLossSpec,
    pub augment: AugmentSpec,
    /// Class-balanced resampling of every epoch.
    pub resample: bool,
}

impl MethodConfig {
    /// Applies a `+`-separated list of method tokens, e.g.
    /// `sam_a_one_minus+smooth`. `erm` resets to plain cross-entropy while
    /// keeping hyperparameters such as `rho` and `epsilon`.
    pub fn apply_preset(&self, preset: &str) -> Result<Self> {
        let mut m = self.clone();
        for token in preset.split('+').map(str::trim) {
            match token {
                "erm" => {
                    m.loss = LossKind::Ce;
                    m.sam.mode = SamMode::Off;
                    m.joint_ssl = false;
                    m.resample = false;
                }
                "ce" => m.loss = LossKind::Ce,
                "sam" => m.sam.mode = SamMode::Sam,
                "sam_a_one_minus" => m.sam.mode = SamMode::SamAOneMinus,
                "sam_a_inverse" => m.sam.mode = SamMode::SamAInverse,
                "smooth" | "smooth_one_minus" => {
                    m.loss = LossKind::Smoothed;
                    m.smoothing.mode = SmoothingMode::OneMinusProportion;
                }
                "smooth_inverse" => {
                    m.loss = LossKind::Smoothed;
                    m.smoothing.mode = SmoothingMode::InverseProportion;
                }
                "focal" => m.loss = LossKind::Focal,
                "reweighted" => m.loss = LossKind::Reweighted,
                "ssl" => m.joint_ssl = true,
                "resample" => m.resample = true,
                other => return Err(Error::Config(format!("unknown method token `{other}`"))),
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Exponential curation ratio of the training split; `None` keeps it as is.
    #[serde(default)]
    pub r_train: Option<f64>,
    /// Exponential curation ratio of the evaluation split.
    #[serde(default)]
    pub r_test: Option<f64>,
    #[serde(default)]
    pub majority_growth: Option<MajorityGrowth>,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Record training accuracy every this many epochs (and after the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Projector widths after the penultimate layer, used with `joint_ssl`.
    #[serde(default = "default_projector")]
    pub projector: Vec<usize>,
}

fn default_eval_every() -> usize {
    1
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_projector() -> Vec<usize> {
    vec![32, 32]
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn check_ratio(name: &str, r: Option<f64>) -> Result<()> {
    match r {
        Some(r) if !(r > 0.0 && r <= 1.0) => Err(Error::Config(format!("{name} must be in (0, 1], got {r}"))),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be non-empty and positive".into()));
        }
        if self.method.joint_ssl && (self.projector.is_empty() || self.projector.contains(&0)) {
            return Err(Error::Config("projector sizes must be non-empty and positive".into()));
        }
        check_ratio("r_train", self.r_train)?;
        check_ratio("r_test", self.r_test)?;
        if self.r_train.is_some() && self.majority_growth.is_some() {
            return Err(Error::Config("r_train and majority_growth are mutually exclusive".into()));
        }
        if let DatasetSource::Gaussian {
            n_classes,
            n_train_per_class,
            n_test_per_class,
            dim,
            mean_radius,
            sigma,
            ..
        } = &self.dataset
        {
            if *n_classes < 2 || *n_train_per_class == 0 || *n_test_per_class == 0 || *dim < 2 {
                return Err(Error::Config(
                    "gaussian data needs n_classes >= 2, dim >= 2 and positive sample counts".into(),
                ));
            }
            if !(*sigma > 0.0) || !(*mean_radius >= 0.0) {
                return Err(Error::Config("gaussian data needs sigma > 0 and mean_radius >= 0".into()));
            }
        }
        self.train.validate()?;
        let m = &self.method;
        m.smoothing.validate().map_err(config_err)?;
        m.vicreg.validate().map_err(config_err)?;
        m.augment.validate().map_err(config_err)?;
        if !(m.sam.rho >= 0.0) || !m.sam.rho.is_finite() {
            return Err(Error::Config(format!("rho must be >= 0, got {}", m.sam.rho)));
        }
        if !(m.focal.gamma_focal >= 0.0) || !m.focal.gamma_focal.is_finite() {
            return Err(Error::Config(format!("gamma_focal must be >= 0, got {}", m.focal.gamma_focal)));
        }
        if !m.joint.lambda.is_finite() || m.joint.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", m.joint.lambda)));
        }
        if m.resample && m.loss == LossKind::Reweighted {
            log::warn!("resampling combined with reweighted loss compensates for imbalance twice");
        }
        Ok(())
    }

    /// Hex prefix of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}
