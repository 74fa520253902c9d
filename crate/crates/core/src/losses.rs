//! Training objectives.
//!
//! Supervised losses come in two forms: a per-example vector node of length
//! `B`, and a scalar batch mean built on top of it. The per-example form is
//! what the class-weighted SAM ascent loss reduces with its own weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::ClassProfile;
use crate::error::{Error, Result};

/// One-hot rows for `labels` over `n_classes` classes.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    check_labels(labels, n_classes)?;
    let mut values = vec![0.0; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        values[i * n_classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), n_classes, values)
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("empty label batch"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {l} out of range for {n_classes} classes")));
    }
    Ok(())
}

fn logits_shape(tape: &Tape, logits: NodeId) -> Result<(usize, usize)> {
    match tape.value(logits).shape() {
        [b, k] => Ok((*b, *k)),
        s => Err(Error::shape("loss", format!("logits must be B x K, got {s:?}"))),
    }
}

fn check_targets(targets: &Tensor) -> Result<()> {
    for i in 0..targets.rows() {
        let row = targets.row(i);
        if row.iter().any(|&t| t < 0.0) {
            return Err(Error::invalid(format!("target row {i} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("target row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// Per-row `-sum_k t_k log softmax(z)_k`, shape `[B]`.
pub fn soft_cross_entropy_per_example(tape: &mut Tape, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    let (b, k) = logits_shape(tape, logits)?;
    if targets.shape() != [b, k] {
        return Err(Error::shape(
            "soft_cross_entropy",
            format!("targets {:?} for logits [{b}, {k}]", targets.shape()),
        ));
    }
    check_targets(targets)?;
    let log_probs = tape.log_softmax_rows(logits)?;
    let t = tape.constant(targets.clone());
    let weighted = tape.mul(log_probs, t)?;
    let rows = tape.row_sums(weighted)?;
    tape.scale(rows, -1.0)
}

/// Batch mean of the soft-target cross-entropy.
pub fn soft_cross_entropy(tape: &mut Tape, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    let per = soft_cross_entropy_per_example(tape, logits, targets)?;
    tape.reduce_mean(per)
}

/// Plain cross-entropy against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (_, k) = logits_shape(tape, logits)?;
    soft_cross_entropy(tape, logits, &one_hot(labels, k)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// `eps_i = eps / (1 - p_i)`; grows with the class proportion.
    #[default]
    OneMinusProportion,
    /// `eps_i = eps * (1/K) / p_i`; shrinks with the class proportion.
    InverseProportion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub mode: SmoothingMode,
    #[serde(default = "default_epsilon_max")]
    pub epsilon_max: f64,
}

fn default_epsilon_max() -> f64 {
    0.8
}

impl Default for SmoothingSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            mode: SmoothingMode::default(),
            epsilon_max: default_epsilon_max(),
        }
    }
}

impl SmoothingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!("epsilon must be in [0, 1), got {}", self.epsilon)));
        }
        if !(self.epsilon_max > 0.0 && self.epsilon_max < 1.0) {
            return Err(Error::invalid(format!(
                "epsilon_max must be in (0, 1), got {}",
                self.epsilon_max
            )));
        }
        Ok(())
    }
}

/// Per-class smoothing strengths, each clamped to `[0, epsilon_max]`.
pub fn class_epsilons(profile: &ClassProfile, spec: &SmoothingSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let k = profile.n_classes as f64;
    profile
        .proportions
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let raw = match spec.mode {
                SmoothingMode::OneMinusProportion => {
                    if p >= 1.0 {
                        return Err(Error::invalid(format!(
                            "class {c} has proportion 1; eps / (1 - p) is undefined for a single-class training set"
                        )));
                    }
                    spec.epsilon / (1.0 - p)
                }
                SmoothingMode::InverseProportion => spec.epsilon * (1.0 / k) / p,
            };
            Ok(raw.min(spec.epsilon_max))
        })
        .collect()
}

/// Rows `(1 - eps_y) * onehot(y) + eps_y / K`.
pub fn smoothed_targets(labels: &[usize], profile: &ClassProfile, spec: &SmoothingSpec) -> Result<Tensor> {
    let k = profile.n_classes;
    check_labels(labels, k)?;
    let eps = class_epsilons(profile, spec)?;
    let mut values = Vec::with_capacity(labels.len() * k);
    for &y in labels {
        let e = eps[y];
        values.extend((0..k).map(|j| if j == y { 1.0 - e + e / k as f64 } else { e / k as f64 }));
    }
    Tensor::matrix(labels.len(), k, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalSpec {
    pub gamma_focal: f64,
}

impl Default for FocalSpec {
    fn default() -> Self {
        Self { gamma_focal: 2.0 }
    }
}

/// Per-example `-(1 - p_t)^gamma * log p_t`.
pub fn focal_per_example(tape: &mut Tape, logits: NodeId, labels: &[usize], spec: &FocalSpec) -> Result<NodeId> {
    if !(spec.gamma_focal >= 0.0) || !spec.gamma_focal.is_finite() {
        return Err(Error::invalid(format!("gamma_focal must be finite and >= 0, got {}", spec.gamma_focal)));
    }
    let (_, k) = logits_shape(tape, logits)?;
    let mask = tape.constant(one_hot(labels, k)?);
    let log_probs = tape.log_softmax_rows(logits)?;
    let picked = tape.mul(log_probs, mask)?;
    let log_pt = tape.row_sums(picked)?;
    let nll = tape.scale(log_pt, -1.0)?;
    if spec.gamma_focal == 0.0 {
        return Ok(nll);
    }
    let pt = tape.exp(log_pt)?;
    let neg_pt = tape.scale(pt, -1.0)?;
    let one_minus = tape.add_const(neg_pt, 1.0)?;
    let modulator = tape.pow_const(one_minus, spec.gamma_focal)?;
    tape.mul(modulator, nll)
}

pub fn focal_loss(tape: &mut Tape, logits: NodeId, labels: &[usize], spec: &FocalSpec) -> Result<NodeId> {
    let per = focal_per_example(tape, logits, labels, spec)?;
    tape.reduce_mean(per)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ReweightSpec {
    /// First epoch at which weights apply; 0 reweights from the start.
    pub defer_epoch: usize,
}

/// `w_c = n / (K * n_c)`, so the count-weighted mean of the weights is 1.
pub fn class_weights(profile: &ClassProfile) -> Result<Vec<f64>> {
    if let Some(c) = profile.counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no samples; cannot reweight")));
    }
    let n = profile.total() as f64;
    let k = profile.n_classes as f64;
    Ok(profile.counts.iter().map(|&c| n / (k * c as f64)).collect())
}

/// Per-example cross-entropy scaled by the class weight of its label, or by 1
/// before `defer_epoch`.
pub fn reweighted_per_example(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    profile: &ClassProfile,
    spec: &ReweightSpec,
    current_epoch: usize,
) -> Result<NodeId> {
    let (_, k) = logits_shape(tape, logits)?;
    if k != profile.n_classes {
        return Err(Error::shape("reweighted_ce", format!("{k} logits for {} classes", profile.n_classes)));
    }
    let weights = class_weights(profile)?;
    let per = soft_cross_entropy_per_example(tape, logits, &one_hot(labels, k)?)?;
    if current_epoch < spec.defer_epoch {
        return Ok(per);
    }
    let w = tape.constant(Tensor::vector(labels.iter().map(|&y| weights[y]).collect())?);
    tape.mul(per, w)
}

/// `(1/B) * sum_i w_{y_i} * CE_i`.
pub fn reweighted_ce(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    profile: &ClassProfile,
    spec: &ReweightSpec,
    current_epoch: usize,
) -> Result<NodeId> {
    let per = reweighted_per_example(tape, logits, labels, profile, spec, current_epoch)?;
    tape.reduce_mean(per)
}

/// `sum_i w_i * l_i / sum_i w_i` for a per-example loss vector.
pub fn weighted_mean(tape: &mut Tape, per_example: NodeId, weights: &[f64]) -> Result<NodeId> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("weights must have a positive sum"));
    }
    let w = tape.constant(Tensor::vector(weights.to_vec())?);
    let prod = tape.mul(per_example, w)?;
    let sum = tape.reduce_sum(prod)?;
    tape.scale(sum, 1.0 / total)
}

/// Weights of the variance-invariance-covariance objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VicRegSpec {
    /// Variance hinge weight.
    pub alpha: f64,
    /// Off-diagonal covariance weight.
    pub beta: f64,
    /// Invariance weight.
    pub inv_weight: f64,
    /// Target standard deviation per embedding dimension.
    pub margin: f64,
    pub eps_num: f64,
}

impl Default for VicRegSpec {
    fn default() -> Self {
        Self {
            alpha: 25.0,
            beta: 1.0,
            inv_weight: 25.0,
            margin: 1.0,
            eps_num: 1e-4,
        }
    }
}

impl VicRegSpec {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = [self.alpha, self.beta, self.inv_weight]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if !weights_ok || !(self.margin > 0.0) || !(self.eps_num >= 0.0) {
            return Err(Error::invalid(format!("invalid VICReg weights {self:?}")));
        }
        Ok(())
    }
}

/// ```text
/// L = (1/D) sum_k [ alpha * max(0, margin - sqrt(C_kk + eps)) + beta * sum_{k' != k} C_kk'^2 ]
///     + inv_weight * ||Z - Z'||_F^2 / B
/// ```
/// `C` is the population covariance of the `2B` rows of `[Z; Z']`.
pub fn vicreg_loss(tape: &mut Tape, z: NodeId, z_prime: NodeId, spec: &VicRegSpec) -> Result<NodeId> {
    spec.validate()?;
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 2 || tape.value(z_prime).shape() != shape.as_slice() {
        return Err(Error::shape(
            "vicreg_loss",
            format!("{:?} vs {:?}", shape, tape.value(z_prime).shape()),
        ));
    }
    let (b, d) = (shape[0], shape[1]);
    if b < 2 {
        return Err(Error::invalid("vicreg_loss needs a batch of at least 2 for a covariance"));
    }

    let both = tape.concat_rows(z, z_prime)?;
    let mean = tape.col_means(both)?;
    let neg_mean = tape.scale(mean, -1.0)?;
    let centered = tape.add_row_bias(both, neg_mean)?;
    let centered_t = tape.transpose(centered)?;
    let gram = tape.matmul(centered_t, centered)?;
    let cov = tape.scale(gram, 1.0 / (2 * b) as f64)?;

    let var = tape.diag(cov)?;
    let var = tape.add_const(var, spec.eps_num)?;
    let std = tape.sqrt(var)?;
    let neg_std = tape.scale(std, -1.0)?;
    let gap = tape.add_const(neg_std, spec.margin)?;
    let hinge = tape.relu(gap)?;
    let variance = tape.reduce_sum(hinge)?;
    let variance = tape.scale(variance, spec.alpha / d as f64)?;

    let off_mask = Tensor::new(
        vec![d, d],
        (0..d * d).map(|i| if i / d == i % d { 0.0 } else { 1.0 }).collect(),
    )?;
    let off_mask = tape.constant(off_mask);
    let off = tape.mul(cov, off_mask)?;
    let covariance = tape.frobenius_sq(off)?;
    let covariance = tape.scale(covariance, spec.beta / d as f64)?;

    let diff = tape.sub(z, z_prime)?;
    let invariance = tape.frobenius_sq(diff)?;
    let invariance = tape.scale(invariance, spec.inv_weight / b as f64)?;

    let reg = tape.add(variance, covariance)?;
    tape.add(reg, invariance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLossSpec {
    pub lambda: f64,
}

impl Default for JointLossSpec {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// `ssl + lambda * supervised`.
pub fn joint_loss(tape: &mut Tape, supervised: NodeId, ssl: NodeId, spec: &JointLossSpec) -> Result<NodeId> {
    if !spec.lambda.is_finite() || spec.lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", spec.lambda)));
    }
    for id in [supervised, ssl] {
        if !tape.value(id).is_scalar() {
            return Err(Error::NonScalarLoss(tape.value(id).shape().to_vec()));
        }
    }
    let scaled = tape.scale(supervised, spec.lambda)?;
    tape.add(ssl, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn logits(tape: &mut Tape, rows: &[Vec<f64>]) -> NodeId {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn soft_ce_analytic_cases() {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &[vec![0.0, 0.0]]);
        let l = cross_entropy(&mut tape, z, &[1]).unwrap();
        assert!((tape.value(l).item() - LN2).abs() < 1e-15);

        let mut tape = Tape::new();
        let z = logits(&mut tape, &[vec![0.3; 4]]);
        let l = soft_cross_entropy(&mut tape, z, &Tensor::from_rows(&[vec![0.25; 4]]).unwrap()).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn soft_ce_matches_direct_formula() {
        let z: Vec<Vec<f64>> = vec![vec![0.2, -1.3, 0.7], vec![1.1, 0.4, -0.5]];
        let t = vec![vec![0.1, 0.6, 0.3], vec![0.7, 0.0, 0.3]];
        let direct: f64 = z
            .iter()
            .zip(&t)
            .map(|(z, t)| {
                let norm: f64 = z.iter().map(|v| v.exp()).sum();
                z.iter().zip(t).map(|(z, t)| -t * (z.exp() / norm).ln()).sum::<f64>()
            })
            .sum::<f64>()
            / 2.0;
        let mut tape = Tape::new();
        let zn = logits(&mut tape, &z);
        let l = soft_cross_entropy(&mut tape, zn, &Tensor::from_rows(&t).unwrap()).unwrap();
        assert!((tape.value(l).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_rejects_bad_targets() {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &[vec![0.0, 0.0]]);
        let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(soft_cross_entropy(&mut tape, z, &bad).is_err());
        let neg = Tensor::from_rows(&[vec![1.5, -0.5]]).unwrap();
        assert!(soft_cross_entropy(&mut tape, z, &neg).is_err());
    }

    fn uniform4() -> ClassProfile {
        ClassProfile::from_counts(&[10, 10, 10, 10]).unwrap()
    }

    #[test]
    fn smoothing_zero_is_one_hot() {
        let spec = SmoothingSpec {
            epsilon: 0.0,
            ..Default::default()
        };
        let t = smoothed_targets(&[2, 0], &uniform4(), &spec).unwrap();
        assert_eq!(t, one_hot(&[2, 0], 4).unwrap());
    }

    #[test]
    fn smoothing_one_minus_proportion_hand_case() {
        let spec = SmoothingSpec {
            epsilon: 0.1,
            mode: SmoothingMode::OneMinusProportion,
            epsilon_max: 0.8,
        };
        let eps = class_epsilons(&uniform4(), &spec).unwrap();
        assert!(eps.iter().all(|e| (e - 0.1 / 0.75).abs() < 1e-15));
        let t = smoothed_targets(&[2], &uniform4(), &spec).unwrap();
        let expect = [1.0 / 30.0, 1.0 / 30.0, 0.9, 1.0 / 30.0];
        for (a, b) in t.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn smoothing_inverse_uniform_is_standard() {
        let spec = SmoothingSpec {
            epsilon: 0.1,
            mode: SmoothingMode::InverseProportion,
            epsilon_max: 0.8,
        };
        let eps = class_epsilons(&uniform4(), &spec).unwrap();
        assert!(eps.iter().all(|e| (e - 0.1).abs() < 1e-15));
    }

    #[test]
    fn smoothing_single_class_errors() {
        let p = ClassProfile::from_counts(&[10]).unwrap();
        assert!(class_epsilons(&p, &SmoothingSpec::default()).is_err());
    }

    #[test]
    fn smoothing_clamps() {
        let p = ClassProfile::from_counts(&[1000, 1]).unwrap();
        let spec = SmoothingSpec {
            epsilon: 0.5,
            mode: SmoothingMode::InverseProportion,
            epsilon_max: 0.8,
        };
        assert_eq!(class_epsilons(&p, &spec).unwrap()[1], 0.8);
    }

    #[test]
    fn focal_cases() {
        let z = vec![vec![0.3, -0.2, 1.0], vec![-0.7, 0.1, 0.4]];
        let labels = [2, 0];
        let mut tape = Tape::new();
        let zn = logits(&mut tape, &z);
        let f = focal_loss(&mut tape, zn, &labels, &FocalSpec { gamma_focal: 0.0 }).unwrap();
        let ce = cross_entropy(&mut tape, zn, &labels).unwrap();
        assert!((tape.value(f).item() - tape.value(ce).item()).abs() < 1e-12);

        let mut tape = Tape::new();
        let zn = logits(&mut tape, &[vec![0.0, 0.0]]);
        let f = focal_loss(&mut tape, zn, &[0], &FocalSpec { gamma_focal: 2.0 }).unwrap();
        assert!((tape.value(f).item() - 0.25 * LN2).abs() < 1e-12);

        let mut tape = Tape::new();
        let zn = logits(&mut tape, &[vec![60.0, -60.0]]);
        let f = focal_loss(&mut tape, zn, &[0], &FocalSpec { gamma_focal: 2.0 }).unwrap();
        assert!(tape.value(f).item() < 1e-40);
        tape.backward(f).unwrap();
    }

    #[test]
    fn reweight_cases() {
        let z = vec![vec![0.3, -0.2], vec![-0.7, 0.1], vec![0.5, 0.5]];
        let labels = [1, 0, 1];
        let balanced = ClassProfile::from_counts(&[50, 50]).unwrap();
        let mut tape = Tape::new();
        let zn = logits(&mut tape, &z);
        let ce = cross_entropy(&mut tape, zn, &labels).unwrap();
        let rw = reweighted_ce(&mut tape, zn, &labels, &balanced, &ReweightSpec { defer_epoch: 0 }, 0).unwrap();
        assert!((tape.value(ce).item() - tape.value(rw).item()).abs() < 1e-12);

        let skewed = ClassProfile::from_counts(&[900, 100]).unwrap();
        let w = class_weights(&skewed).unwrap();
        assert!((w[0] - 1000.0 / 1800.0).abs() < 1e-15);
        assert!((w[1] - 5.0).abs() < 1e-15);

        let deferred = reweighted_ce(&mut tape, zn, &labels, &skewed, &ReweightSpec { defer_epoch: 5 }, 4).unwrap();
        assert!((tape.value(ce).item() - tape.value(deferred).item()).abs() < 1e-12);
        let active = reweighted_ce(&mut tape, zn, &labels, &skewed, &ReweightSpec { defer_epoch: 5 }, 5).unwrap();
        assert!((tape.value(ce).item() - tape.value(active).item()).abs() > 1e-3);
    }

    fn vicreg_value(z: &[Vec<f64>], zp: &[Vec<f64>], spec: &VicRegSpec) -> f64 {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(z).unwrap());
        let b = tape.leaf(Tensor::from_rows(zp).unwrap());
        let l = vicreg_loss(&mut tape, a, b, spec).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn vicreg_hand_cases() {
        let spec = VicRegSpec {
            eps_num: 0.0,
            ..Default::default()
        };
        assert_eq!(vicreg_value(&[vec![0.0], vec![2.0]], &[vec![0.0], vec![2.0]], &spec), 0.0);
        let expect = 50.0 + 25.0 * (1.0 - 0.75f64.sqrt());
        let got = vicreg_value(&[vec![0.0], vec![2.0]], &[vec![0.0], vec![0.0]], &spec);
        assert!((got - expect).abs() < 1e-12, "{got}");
        assert!((got - 53.349).abs() < 1e-3);
    }

    #[test]
    fn vicreg_zero_for_spread_decorrelated_views() {
        // Columns +-2 with zero cross-covariance; std 2 >= margin.
        let z = vec![vec![2.0, 2.0], vec![2.0, -2.0], vec![-2.0, 2.0], vec![-2.0, -2.0]];
        let spec = VicRegSpec {
            eps_num: 0.0,
            ..Default::default()
        };
        assert_eq!(vicreg_value(&z, &z, &spec), 0.0);
    }

    #[test]
    fn vicreg_needs_two_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert!(vicreg_loss(&mut tape, a, a, &VicRegSpec::default()).is_err());
        let b = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let c = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap());
        assert!(vicreg_loss(&mut tape, b, c, &VicRegSpec::default()).is_err());
    }

    #[test]
    fn joint_cases() {
        let mut tape = Tape::new();
        let ssl = tape.leaf(Tensor::scalar(3.0).unwrap());
        let sup = tape.leaf(Tensor::scalar(2.0).unwrap());
        let j = joint_loss(&mut tape, sup, ssl, &JointLossSpec { lambda: 0.0 }).unwrap();
        assert_eq!(tape.value(j).item(), 3.0);
        let j = joint_loss(&mut tape, sup, ssl, &JointLossSpec { lambda: 1.0 }).unwrap();
        assert_eq!(tape.value(j).item(), 5.0);
        let one = tape.leaf(Tensor::scalar(1.0).unwrap());
        let j = joint_loss(&mut tape, sup, one, &JointLossSpec { lambda: 0.5 }).unwrap();
        assert_eq!(tape.value(j).item(), 2.0);
    }

    fn counts_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..500, 2..8)
    }

    proptest! {
        #[test]
        fn smoothed_rows_are_distributions(counts in counts_strategy(), eps in 0.0f64..0.99, inverse in any::<bool>()) {
            let profile = ClassProfile::from_counts(&counts).unwrap();
            let spec = SmoothingSpec {
                epsilon: eps,
                mode: if inverse { SmoothingMode::InverseProportion } else { SmoothingMode::OneMinusProportion },
                epsilon_max: 0.8,
            };
            let labels: Vec<usize> = (0..counts.len()).collect();
            let t = smoothed_targets(&labels, &profile, &spec).unwrap();
            for i in 0..t.rows() {
                let s: f64 = t.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(t.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn smoothing_monotonicity(counts in counts_strategy(), eps in 0.0f64..0.99) {
            let profile = ClassProfile::from_counts(&counts).unwrap();
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by(|&a, &b| profile.proportions[a].total_cmp(&profile.proportions[b]));
            for (mode, increasing) in [(SmoothingMode::OneMinusProportion, true), (SmoothingMode::InverseProportion, false)] {
                let e = class_epsilons(&profile, &SmoothingSpec { epsilon: eps, mode, epsilon_max: 0.8 }).unwrap();
                for w in order.windows(2) {
                    let (lo, hi) = (e[w[0]], e[w[1]]);
                    if increasing { prop_assert!(lo <= hi); } else { prop_assert!(lo >= hi); }
                }
            }
        }

        #[test]
        fn vicreg_nonnegative_and_permutation_invariant(
            vals in prop::collection::vec(-3.0f64..3.0, 24),
            shift in 1usize..5,
        ) {
            let rows = |v: &[f64]| -> Vec<Vec<f64>> { v.chunks(3).map(|c| c.to_vec()).collect() };
            let z = rows(&vals[..12]);
            let zp = rows(&vals[12..]);
            let spec = VicRegSpec { eps_num: 0.0, ..Default::default() };
            let base = vicreg_value(&z, &zp, &spec);
            prop_assert!(base >= 0.0);
            let perm = |r: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                (0..r.len()).map(|i| r[(i + shift) % r.len()].clone()).collect()
            };
            let permuted = vicreg_value(&perm(&z), &perm(&zp), &spec);
            prop_assert!((base - permuted).abs() <= 1e-9 * base.max(1.0));
        }
    }
}
