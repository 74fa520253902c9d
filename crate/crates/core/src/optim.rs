//! SGD with momentum and coupled weight decay, warmup + cosine learning-rate
//! schedule, weight EMA, and sharpness-aware updates (plain and
//! class-conditional).

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::ClassProfile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// EMA decay; `None` disables the EMA and evaluation uses raw weights.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            epochs: 200,
            warmup_epochs: 5,
            batch_size: 32,
            ema_decay: Some(0.999),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "need warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return bad(format!("ema_decay must be in [0, 1], got {d}"));
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr0` over `warmup_epochs`, then half-cosine decay.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} out of range for {} epochs",
            config.epochs
        )));
    }
    let w = config.warmup_epochs;
    if epoch < w {
        return Ok(config.lr0 * (epoch + 1) as f64 / w as f64);
    }
    let progress = (epoch - w) as f64 / (config.epochs - w) as f64;
    Ok(config.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    pub ema_decay: f64,
}

impl OptimState {
    /// Zero velocity; EMA starts at the initial parameters.
    pub fn new(params: &[Tensor], ema_decay: f64) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            ema: params.to_vec(),
            ema_decay,
        }
    }
}

fn check_same_shapes(what: &str, a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::shape("optimizer", format!("{what} shapes do not match parameters")));
    }
    Ok(())
}

/// `g = grad + wd * theta; v = momentum * v + g; theta = theta - lr * v`.
pub fn sgd_update(
    params: &[Tensor],
    grads: &[Tensor],
    names: &[String],
    lr: f64,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<Vec<Tensor>> {
    check_same_shapes("gradient", params, grads)?;
    check_same_shapes("velocity", params, &state.velocity)?;
    let mut out = Vec::with_capacity(params.len());
    for (i, (theta, grad)) in params.iter().zip(grads).enumerate() {
        let non_finite = |_| Error::NonFiniteGradient(names.get(i).cloned().unwrap_or_else(|| format!("param{i}")));
        let g = grad
            .zip_map(theta, |g, t| g + config.weight_decay * t)
            .map_err(non_finite)?;
        let v = state.velocity[i]
            .zip_map(&g, |v, g| config.momentum * v + g)
            .map_err(non_finite)?;
        out.push(theta.zip_map(&v, |t, v| t - lr * v).map_err(non_finite)?);
        state.velocity[i] = v;
    }
    Ok(out)
}

/// `ema = decay * ema + (1 - decay) * theta`.
pub fn ema_update(state: &mut OptimState, params: &[Tensor], decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("ema decay must be in [0, 1], got {decay}")));
    }
    check_same_shapes("ema", params, &state.ema)?;
    for (e, p) in state.ema.iter_mut().zip(params) {
        *e = e.zip_map(p, |e, p| decay * e + (1.0 - decay) * p)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamMode {
    #[default]
    Off,
    Sam,
    /// Per-class radius `rho / (1 - p_c)`; grows with the class proportion.
    SamAOneMinus,
    /// Per-class radius `rho * (1/K) / p_c`, capped at `10 * rho`.
    SamAInverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamSpec {
    pub rho: f64,
    #[serde(default)]
    pub mode: SamMode,
}

impl Default for SamSpec {
    fn default() -> Self {
        Self {
            rho: 0.05,
            mode: SamMode::Off,
        }
    }
}

const INVERSE_RHO_CAP: f64 = 10.0;

/// Per-class radius multipliers `rho_c / rho`.
pub fn class_rho_factors(profile: &ClassProfile, mode: SamMode) -> Result<Vec<f64>> {
    let k = profile.n_classes as f64;
    profile
        .proportions
        .iter()
        .enumerate()
        .map(|(c, &p)| match mode {
            SamMode::Off | SamMode::Sam => Ok(1.0),
            SamMode::SamAOneMinus => {
                if p >= 1.0 {
                    Err(Error::invalid(format!(
                        "class {c} has proportion 1; rho / (1 - p) is undefined"
                    )))
                } else {
                    Ok(1.0 / (1.0 - p))
                }
            }
            SamMode::SamAInverse => Ok(((1.0 / k) / p).min(INVERSE_RHO_CAP)),
        })
        .collect()
}

/// Per-class radii `rho_c`.
pub fn class_rhos(profile: &ClassProfile, spec: &SamSpec) -> Result<Vec<f64>> {
    Ok(class_rho_factors(profile, spec.mode)?
        .into_iter()
        .map(|f| spec.rho * f)
        .collect())
}

/// How the ascent step of one batch is formed.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentPlan {
    /// Per-example ascent-loss weights `rho_{y_i} / rho`, or `None` when they
    /// are all equal and the ascent loss is the plain batch loss.
    pub weights: Option<Vec<f64>>,
    /// Norm of the perturbation.
    pub rho_eff: f64,
}

pub fn ascent_plan(labels: &[usize], profile: &ClassProfile, spec: &SamSpec) -> Result<AscentPlan> {
    if let Some(&l) = labels.iter().find(|&&l| l >= profile.n_classes) {
        return Err(Error::invalid(format!("batch class {l} missing from the class profile")));
    }
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if matches!(spec.mode, SamMode::Off | SamMode::Sam) {
        return Ok(AscentPlan {
            weights: None,
            rho_eff: spec.rho,
        });
    }
    let factors = class_rho_factors(profile, spec.mode)?;
    let weights: Vec<f64> = labels.iter().map(|&y| factors[y]).collect();
    if weights.iter().all(|&w| w == weights[0]) {
        return Ok(AscentPlan {
            weights: None,
            rho_eff: spec.rho * weights[0],
        });
    }
    let rho_eff = weights.iter().map(|w| spec.rho * w).sum::<f64>() / weights.len() as f64;
    Ok(AscentPlan {
        weights: Some(weights),
        rho_eff,
    })
}

#[derive(Debug, Clone)]
pub struct Perturbation {
    pub params: Vec<Tensor>,
    pub rho_eff: f64,
    /// Set when the ascent gradient was zero and no step was taken.
    pub skipped: bool,
}

/// `theta' = theta + rho_eff * g / ||g||_2` over the flattened parameter vector.
pub fn sam_perturb(params: &[Tensor], ascent_grads: &[Tensor], rho_eff: f64) -> Result<Perturbation> {
    check_same_shapes("ascent gradient", params, ascent_grads)?;
    let norm = ascent_grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::invalid("non-finite ascent gradient norm"));
    }
    if norm == 0.0 || rho_eff == 0.0 {
        return Ok(Perturbation {
            params: params.to_vec(),
            rho_eff,
            skipped: norm == 0.0,
        });
    }
    let scale = rho_eff / norm;
    let params = params
        .iter()
        .zip(ascent_grads)
        .map(|(p, g)| p.zip_map(g, |p, g| p + scale * g))
        .collect::<Result<Vec<_>>>()?;
    Ok(Perturbation {
        params,
        rho_eff,
        skipped: false,
    })
}

/// Loss value and parameter gradients at a point. `weights`, when given, are
/// per-example weights of the supervised term for the ascent loss.
pub trait Objective {
    fn eval(&mut self, params: &[Tensor], weights: Option<&[f64]>) -> Result<(f64, Vec<Tensor>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[Tensor], Option<&[f64]>) -> Result<(f64, Vec<Tensor>)>,
{
    fn eval(&mut self, params: &[Tensor], weights: Option<&[f64]>) -> Result<(f64, Vec<Tensor>)> {
        self(params, weights)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub params: Vec<Tensor>,
    /// Loss at the starting parameters.
    pub loss: f64,
    pub perturbation_skipped: bool,
}

/// One plain SGD step followed by the EMA update.
pub fn sgd_step(
    params: &[Tensor],
    names: &[String],
    objective: &mut impl Objective,
    lr: f64,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<StepOutput> {
    let (loss, grads) = objective.eval(params, None)?;
    let params = sgd_update(params, &grads, names, lr, config, state)?;
    let decay = state.ema_decay;
    ema_update(state, &params, decay)?;
    Ok(StepOutput {
        params,
        loss,
        perturbation_skipped: false,
    })
}

/// Sharpness-aware step: gradient of the (possibly class-weighted) ascent
/// loss at `theta`, perturb to `theta'`, gradient of the training loss at
/// `theta'`, SGD update applied at `theta`, then EMA.
#[allow(clippy::too_many_arguments)]
pub fn sam_step(
    params: &[Tensor],
    names: &[String],
    objective: &mut impl Objective,
    plan: &AscentPlan,
    lr: f64,
    config: &TrainConfig,
    state: &mut OptimState,
) -> Result<StepOutput> {
    let (loss, ascent_grads) = objective.eval(params, plan.weights.as_deref())?;
    let perturbed = sam_perturb(params, &ascent_grads, plan.rho_eff)?;
    let (_, descent_grads) = objective.eval(&perturbed.params, None)?;
    let params = sgd_update(params, &descent_grads, names, lr, config, state)?;
    let decay = state.ema_decay;
    ema_update(state, &params, decay)?;
    Ok(StepOutput {
        params,
        loss,
        perturbation_skipped: perturbed.skipped,
    })
}
