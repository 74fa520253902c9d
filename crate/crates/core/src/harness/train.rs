use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, ExperimentConfig, LossKind, MethodConfig};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{
    augment_two_views, class_profile, curate_exponential, gen_gaussian_mixture, grow_majority, load_csv,
    make_balanced_sampler, ClassProfile, Dataset,
};
use crate::diagnostics::{collapse_report, metrics_report, minority_majority_classes, CollapseReport, MetricsReport};
use crate::error::{Error, Result};
use crate::losses::{
    focal_per_example, joint_loss, one_hot, reweighted_per_example, smoothed_targets, soft_cross_entropy_per_example,
    vicreg_loss,
};
use crate::models::{mlp_forward, projector_forward, DenseStack, Init, Model, StackNodes};
use crate::optim::{ascent_plan, cosine_lr, sam_step, sgd_step, OptimState, SamMode};

const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_TEST_DATA: u64 = 2;
const STREAM_CURATE_TRAIN: u64 = 3;
const STREAM_CURATE_TEST: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_SHUFFLE: u64 = 6;
const STREAM_AUGMENT: u64 = 7;
const STREAM_PROJECTOR: u64 = 8;

/// Independent sub-seed for one use of a trial seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    /// Evaluation split before test-ratio curation.
    pub test_pool: Dataset,
    pub test: Dataset,
}

/// Test split curated to ratio `r` with the trial's test-curation stream, so
/// every run with the same seed sees the same test set for a given `r`.
pub fn curate_test(pool: &Dataset, r: Option<f64>, seed: u64) -> Result<Dataset> {
    match r {
        Some(r) => curate_exponential(pool, r, derive_seed(seed, STREAM_CURATE_TEST)),
        None => Ok(pool.clone()),
    }
}

pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (train, test_pool) = match &config.dataset {
        DatasetSource::Csv {
            train,
            test,
            label_column,
        } => {
            let tr = load_csv(train, label_column)?;
            let te = match test {
                Some(p) => load_csv(p, label_column)?,
                None => tr.clone(),
            };
            if tr.class_names() != te.class_names() || tr.dim() != te.dim() {
                return Err(Error::Data("train and test CSV files disagree on classes or features".into()));
            }
            (tr, te)
        }
        DatasetSource::Gaussian {
            n_classes,
            n_train_per_class,
            n_test_per_class,
            dim,
            mean_radius,
            sigma,
            data_seed,
        } => {
            let ds = data_seed.unwrap_or(seed);
            let tr = gen_gaussian_mixture(
                *n_classes,
                *n_train_per_class,
                *dim,
                *mean_radius,
                *sigma,
                derive_seed(ds, STREAM_TRAIN_DATA),
            )?;
            let te = gen_gaussian_mixture(
                *n_classes,
                *n_test_per_class,
                *dim,
                *mean_radius,
                *sigma,
                derive_seed(ds, STREAM_TEST_DATA),
            )?;
            (tr, te)
        }
    };
    let train = match (config.r_train, config.majority_growth) {
        (Some(r), _) => curate_exponential(&train, r, derive_seed(seed, STREAM_CURATE_TRAIN))?,
        (None, Some(g)) => grow_majority(
            &train,
            g.minority_class,
            g.n_minority,
            g.n_majority,
            derive_seed(seed, STREAM_CURATE_TRAIN),
        )?,
        (None, None) => train,
    };
    let test = curate_test(&test_pool, config.r_test, seed)?;
    Ok(PreparedData { train, test_pool, test })
}

/// Freshly initialised model for `config` on data of the given shape.
pub fn init_model(config: &ExperimentConfig, input_dim: usize, n_classes: usize, seed: u64) -> Result<Model> {
    let mut sizes = vec![input_dim];
    sizes.extend(&config.hidden);
    sizes.push(n_classes);
    let mlp = DenseStack::init(&sizes, derive_seed(seed, STREAM_INIT), Init::HeNormal)?;
    let projector = if config.method.joint_ssl {
        let mut p = vec![*config.hidden.last().expect("validated non-empty")];
        p.extend(&config.projector);
        Some(DenseStack::init(&p, derive_seed(seed, STREAM_PROJECTOR), Init::HeNormal)?)
    } else {
        None
    };
    Model::new(mlp, projector)
}

/// Everything needed to evaluate the training objective on one batch.
pub struct BatchContext<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    /// Two augmented views of `x`, required when `method.joint_ssl` is set.
    pub views: Option<(&'a Tensor, &'a Tensor)>,
    pub method: &'a MethodConfig,
    pub profile: &'a ClassProfile,
    pub epoch: usize,
    /// Number of classifier tensors at the front of the parameter list.
    pub n_mlp_tensors: usize,
}

fn stack_nodes(ids: &[NodeId]) -> StackNodes {
    StackNodes {
        weights: ids.iter().step_by(2).copied().collect(),
        biases: ids.iter().skip(1).step_by(2).copied().collect(),
    }
}

impl BatchContext<'_> {
    /// Builds the scalar training loss on `tape` from registered parameter
    /// nodes. `ascent_weights` scale the per-example supervised losses.
    pub fn build(&self, tape: &mut Tape, params: &[NodeId], ascent_weights: Option<&[f64]>) -> Result<NodeId> {
        let mlp = stack_nodes(&params[..self.n_mlp_tensors]);
        let k = self.profile.n_classes;
        let x = tape.constant(self.x.clone());
        let out = mlp_forward(&mlp, tape, x)?;
        let m = self.method;
        let per = match m.loss {
            LossKind::Ce => soft_cross_entropy_per_example(tape, out.logits, &one_hot(self.labels, k)?)?,
            LossKind::Smoothed => {
                let targets = smoothed_targets(self.labels, self.profile, &m.smoothing)?;
                soft_cross_entropy_per_example(tape, out.logits, &targets)?
            }
            LossKind::Focal => focal_per_example(tape, out.logits, self.labels, &m.focal)?,
            LossKind::Reweighted => {
                reweighted_per_example(tape, out.logits, self.labels, self.profile, &m.reweight, self.epoch)?
            }
        };
        let per = match ascent_weights {
            Some(w) => {
                let w = tape.constant(Tensor::vector(w.to_vec())?);
                tape.mul(per, w)?
            }
            None => per,
        };
        let supervised = tape.reduce_mean(per)?;
        if !m.joint_ssl {
            return Ok(supervised);
        }
        let (v1, v2) = self
            .views
            .ok_or_else(|| Error::invalid("joint SSL needs two augmented views"))?;
        let proj_ids = &params[self.n_mlp_tensors..];
        if proj_ids.is_empty() {
            return Err(Error::invalid("joint SSL needs projector parameters"));
        }
        let proj = stack_nodes(proj_ids);
        let mut embed = |v: &Tensor| -> Result<NodeId> {
            let input = tape.constant(v.clone());
            let h = mlp_forward(&mlp, tape, input)?;
            projector_forward(&proj, tape, h.penultimate)
        };
        let z1 = embed(v1)?;
        let z2 = embed(v2)?;
        let ssl = vicreg_loss(tape, z1, z2, &m.vicreg)?;
        joint_loss(tape, supervised, ssl, &m.joint)
    }

    pub fn loss_and_grads(&self, params: &[Tensor], ascent_weights: Option<&[f64]>) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = self.build(&mut tape, &ids, ascent_weights)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| grads.take(id).expect("every leaf has a gradient"))
            .collect();
        Ok((value, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochAccuracy {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub config_hash: String,
    pub seed: u64,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    /// Evaluation-split metrics of the evaluation weights.
    pub metrics: MetricsReport,
    /// Collapse metrics of the evaluation weights on the training split;
    /// absent when class means coincide.
    pub collapse: Option<CollapseReport>,
    /// Training accuracy of the raw weights after the recorded epochs.
    pub train_accuracy: Vec<EpochAccuracy>,
    pub final_train_accuracy: f64,
    /// First recorded epoch (1-based) with 100% training accuracy.
    pub first_fit_epoch: Option<usize>,
    /// Mean batch loss of the last epoch.
    pub final_loss: f64,
    /// Whether evaluation used EMA weights.
    pub ema_evaluation: bool,
    pub perturbations_skipped: usize,
}

pub struct TrainedTrial {
    pub report: TrialReport,
    /// Final raw weights.
    pub model: Model,
    /// Weights used for evaluation: the EMA when enabled, else `model`.
    pub eval_model: Model,
    pub data: PreparedData,
}

fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let pred = model.predict(data.x())?;
    Ok(pred.iter().zip(data.y()).filter(|(p, y)| p == y).count() as f64 / data.len() as f64)
}

fn as_loss_error(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteTensor { .. } => Error::NonFiniteLoss { epoch, step },
        other => other,
    }
}

/// Trains one seed of `config` and evaluates it.
pub fn run_training(config: &ExperimentConfig, seed: u64) -> Result<TrainedTrial> {
    config.validate()?;
    let data = prepare_data(config, seed)?;
    let train = &data.train;
    let profile = class_profile(train)?;
    let k = profile.n_classes;
    let mut model = init_model(config, train.dim(), k, seed)?;
    let n_mlp_tensors = 2 * model.mlp.weights().len();
    let names = model.parameter_names();
    let mut params = model.parameters();
    let tc = &config.train;
    let method = &config.method;
    let mut state = OptimState::new(&params, tc.ema_decay.unwrap_or(0.0));

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE));
    let mut sampler = if method.resample {
        Some(make_balanced_sampler(train, derive_seed(seed, STREAM_SHUFFLE))?)
    } else {
        None
    };
    let augment_seed = derive_seed(seed, STREAM_AUGMENT);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut trajectory = Vec::new();
    let mut final_loss = f64::NAN;
    let mut skipped = 0usize;

    for epoch in 0..tc.epochs {
        let lr = cosine_lr(epoch, tc)?;
        match sampler.as_mut() {
            Some(s) => order = s.by_ref().take(n).collect(),
            None => order.shuffle(&mut shuffle_rng),
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let xb = train.x().select_rows(batch)?;
            let yb: Vec<usize> = batch.iter().map(|&i| train.y()[i]).collect();
            let views = if method.joint_ssl {
                Some(augment_two_views(&xb, &method.augment, derive_seed(augment_seed, step as u64))?)
            } else {
                None
            };
            let ctx = BatchContext {
                x: &xb,
                labels: &yb,
                views: views.as_ref().map(|(a, b)| (a, b)),
                method,
                profile: &profile,
                epoch,
                n_mlp_tensors,
            };
            let mut objective = |p: &[Tensor], w: Option<&[f64]>| {
                ctx.loss_and_grads(p, w).map_err(|e| as_loss_error(e, epoch, step))
            };
            let out = if method.sam.mode == SamMode::Off {
                sgd_step(&params, &names, &mut objective, lr, tc, &mut state)?
            } else {
                let plan = ascent_plan(&yb, &profile, &method.sam)?;
                sam_step(&params, &names, &mut objective, &plan, lr, tc, &mut state)?
            };
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            skipped += usize::from(out.perturbation_skipped);
            loss_sum += out.loss;
            batches += 1;
            params = out.params;
            step += 1;
        }
        final_loss = loss_sum / batches as f64;
        if (epoch + 1) % config.eval_every == 0 || epoch + 1 == tc.epochs {
            model = model.with_parameters(params.clone())?;
            trajectory.push(EpochAccuracy {
                epoch: epoch + 1,
                accuracy: accuracy(&model, train)?,
            });
        }
    }

    model = model.with_parameters(params)?;
    let eval_model = if tc.ema_decay.is_some() {
        model.with_parameters(state.ema.clone())?
    } else {
        model.clone()
    };
    let test_pred = eval_model.predict(data.test.x())?;
    let metrics = metrics_report(&test_pred, data.test.y(), &profile)?;
    let (minority, _) = minority_majority_classes(&profile);
    let (train_logits, train_features) = eval_model.mlp.infer(train.x())?;
    let train_pred = crate::models::argmax_rows(&train_logits);
    let collapse = match collapse_report(&train_features, train.y(), k, &train_pred, &minority) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("seed {seed}: collapse metrics unavailable: {e}");
            None
        }
    };
    let first_fit_epoch = trajectory.iter().find(|e| e.accuracy == 1.0).map(|e| e.epoch);
    let final_train_accuracy = trajectory.last().map_or(0.0, |e| e.accuracy);
    let report = TrialReport {
        config_hash: config.hash(),
        seed,
        train_counts: profile.counts.clone(),
        test_counts: data.test.counts(),
        metrics,
        collapse,
        train_accuracy: trajectory,
        final_train_accuracy,
        first_fit_epoch,
        final_loss,
        ema_evaluation: tc.ema_decay.is_some(),
        perturbations_skipped: skipped,
    };
    Ok(TrainedTrial {
        report,
        model,
        eval_model,
        data,
    })
}
