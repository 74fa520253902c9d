//! Accuracy breakdowns, neural-collapse metrics and decision-boundary probes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_raw, Tensor};
use crate::data::ClassProfile;
use crate::error::{Error, Result};
use crate::models::Model;

/// Classes with more than this many training samples are "many-shot".
pub const MANY_SHOT_MIN_EXCLUSIVE: usize = 100;
/// Classes with fewer than this many training samples are "few-shot".
pub const FEW_SHOT_MAX_EXCLUSIVE: usize = 20;
pub const GROUP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    /// `None` for classes with no evaluation samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_support: Vec<usize>,
    pub minority_classes: Vec<usize>,
    pub majority_classes: Vec<usize>,
    pub minority_accuracy: Option<f64>,
    pub majority_accuracy: Option<f64>,
    pub few_accuracy: Option<f64>,
    pub medium_accuracy: Option<f64>,
    pub many_accuracy: Option<f64>,
}

/// The `ceil(0.2 K)` classes with the fewest and the most training samples,
/// ties broken by class id.
pub fn minority_majority_classes(profile: &ClassProfile) -> (Vec<usize>, Vec<usize>) {
    let k = profile.n_classes;
    let m = ((GROUP_FRACTION * k as f64).ceil() as usize).clamp(1, k);
    let mut ascending: Vec<usize> = (0..k).collect();
    ascending.sort_by_key(|&c| (profile.counts[c], c));
    let mut descending: Vec<usize> = (0..k).collect();
    descending.sort_by_key(|&c| (std::cmp::Reverse(profile.counts[c]), c));
    let mut minority = ascending[..m].to_vec();
    let mut majority = descending[..m].to_vec();
    minority.sort_unstable();
    majority.sort_unstable();
    (minority, majority)
}

/// Few (< 20), medium (20..=100) and many (> 100) shot classes.
pub fn shot_groups(profile: &ClassProfile) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut few = Vec::new();
    let mut med = Vec::new();
    let mut many = Vec::new();
    for (c, &n) in profile.counts.iter().enumerate() {
        if n > MANY_SHOT_MIN_EXCLUSIVE {
            many.push(c);
        } else if n < FEW_SHOT_MAX_EXCLUSIVE {
            few.push(c);
        } else {
            med.push(c);
        }
    }
    (few, med, many)
}

/// Accuracy overall, per class and per group. Groups are defined by the
/// training counts in `profile`; group accuracy pools the evaluation samples
/// of the group's classes.
pub fn metrics_report(predictions: &[usize], labels: &[usize], profile: &ClassProfile) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let k = profile.n_classes;
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
    }
    let mut correct = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let group = |classes: &[usize]| -> Option<f64> {
        let n: usize = classes.iter().map(|&c| support[c]).sum();
        let hit: usize = classes.iter().map(|&c| correct[c]).sum();
        (n > 0).then(|| hit as f64 / n as f64)
    };
    let (minority, majority) = minority_majority_classes(profile);
    let (few, med, many) = shot_groups(profile);
    Ok(MetricsReport {
        overall_accuracy: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        per_class_accuracy: (0..k)
            .map(|c| (support[c] > 0).then(|| correct[c] as f64 / support[c] as f64))
            .collect(),
        per_class_support: support.clone(),
        minority_accuracy: group(&minority),
        majority_accuracy: group(&majority),
        few_accuracy: group(&few),
        medium_accuracy: group(&med),
        many_accuracy: group(&many),
        minority_classes: minority,
        majority_classes: majority,
    })
}

fn check_features(features: &Tensor, labels: &[usize]) -> Result<()> {
    if features.shape().len() != 2 || features.rows() != labels.len() {
        return Err(Error::shape(
            "collapse",
            format!("features {:?} for {} labels", features.shape(), labels.len()),
        ));
    }
    Ok(())
}

/// Mean feature vector of each class; errors on an empty class.
pub fn class_means(features: &Tensor, labels: &[usize], n_classes: usize) -> Result<Vec<Vec<f64>>> {
    check_features(features, labels)?;
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        counts[y] += 1;
        sums[y].iter_mut().zip(features.row(i)).for_each(|(s, v)| *s += v);
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no samples")));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean squared distance of a class's features to its mean.
fn class_variance(features: &Tensor, labels: &[usize], class: usize, mean: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y == class {
            total += squared_distance(features.row(i), mean);
            n += 1;
        }
    }
    total / n as f64
}

fn class_mean(features: &Tensor, labels: &[usize], class: usize) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; features.cols()];
    let mut n = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y == class {
            sum.iter_mut().zip(features.row(i)).for_each(|(s, v)| *s += v);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data(format!("class {class} has no samples")));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

fn cdnv_from_parts(var_a: f64, var_b: f64, mean_a: &[f64], mean_b: &[f64]) -> Result<f64> {
    let dist = squared_distance(mean_a, mean_b);
    if dist == 0.0 {
        return Err(Error::Data("degenerate class means".into()));
    }
    Ok((var_a + var_b) / (2.0 * dist))
}

/// Class-distance normalized variance
/// `(Var(S_a) + Var(S_b)) / (2 ||mu_a - mu_b||^2)`.
pub fn cdnv(features: &Tensor, labels: &[usize], class_a: usize, class_b: usize) -> Result<f64> {
    check_features(features, labels)?;
    let mean_a = class_mean(features, labels, class_a)?;
    let mean_b = class_mean(features, labels, class_b)?;
    let var_a = class_variance(features, labels, class_a, &mean_a);
    let var_b = class_variance(features, labels, class_b, &mean_b);
    cdnv_from_parts(var_a, var_b, &mean_a, &mean_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NccReport {
    pub predictions: Vec<usize>,
    /// Fraction of samples where the model and the nearest-center rule agree.
    pub agreement: f64,
    /// Fraction of samples where the nearest-center rule matches the label.
    pub accuracy: f64,
}

/// Index of the nearest mean; the lowest index wins exact ties.
pub fn nearest_center(x: &[f64], means: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in means.iter().enumerate() {
        let d = squared_distance(x, m);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

pub fn ncc_report(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    model_predictions: &[usize],
) -> Result<NccReport> {
    if model_predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("predictions and labels must be non-empty and equally long"));
    }
    let means = class_means(features, labels, n_classes)?;
    let predictions: Vec<usize> = (0..labels.len())
        .map(|i| nearest_center(features.row(i), &means))
        .collect();
    let n = labels.len() as f64;
    let agreement = predictions.iter().zip(model_predictions).filter(|(a, b)| a == b).count() as f64 / n;
    let accuracy = predictions.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / n;
    Ok(NccReport {
        predictions,
        agreement,
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Symmetric `K x K` matrix of pairwise CDNV with zeros on the diagonal.
    pub cdnv_pairs: Vec<Vec<f64>>,
    /// Mean CDNV over pairs with at least one minority-group class.
    pub minority_mean_cdnv: f64,
    pub minority_classes: Vec<usize>,
    /// Model vs nearest-center agreement over all samples.
    pub ncc_agreement: f64,
    /// Same agreement restricted to samples of minority-group classes.
    pub minority_ncc_agreement: f64,
    /// Nearest-center accuracy against labels over all samples.
    pub ncc_accuracy: f64,
    pub class_means: Vec<Vec<f64>>,
}

/// Collapse metrics of penultimate `features` of a labelled (training) set.
pub fn collapse_report(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    model_predictions: &[usize],
    minority_classes: &[usize],
) -> Result<CollapseReport> {
    let means = class_means(features, labels, n_classes)?;
    let vars: Vec<f64> = (0..n_classes)
        .map(|c| class_variance(features, labels, c, &means[c]))
        .collect();
    let mut pairs = vec![vec![0.0; n_classes]; n_classes];
    for a in 0..n_classes {
        for b in (a + 1)..n_classes {
            let v = cdnv_from_parts(vars[a], vars[b], &means[a], &means[b])?;
            pairs[a][b] = v;
            pairs[b][a] = v;
        }
    }
    let mut minority_sum = 0.0;
    let mut minority_pairs = 0usize;
    for a in 0..n_classes {
        for b in (a + 1)..n_classes {
            if minority_classes.contains(&a) || minority_classes.contains(&b) {
                minority_sum += pairs[a][b];
                minority_pairs += 1;
            }
        }
    }
    let ncc = ncc_report(features, labels, n_classes, model_predictions)?;
    let minority_idx: Vec<usize> = (0..labels.len())
        .filter(|&i| minority_classes.contains(&labels[i]))
        .collect();
    let minority_ncc_agreement = if minority_idx.is_empty() {
        0.0
    } else {
        minority_idx
            .iter()
            .filter(|&&i| ncc.predictions[i] == model_predictions[i])
            .count() as f64
            / minority_idx.len() as f64
    };
    Ok(CollapseReport {
        cdnv_pairs: pairs,
        minority_mean_cdnv: if minority_pairs > 0 {
            minority_sum / minority_pairs as f64
        } else {
            0.0
        },
        minority_classes: minority_classes.to_vec(),
        ncc_agreement: ncc.agreement,
        minority_ncc_agreement,
        ncc_accuracy: ncc.accuracy,
        class_means: means,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!("invalid bounds {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x_min..=self.x_max).contains(&p[0]) && (self.y_min..=self.y_max).contains(&p[1])
    }

    /// Bounding box of the first two columns, padded by `pad` on every side.
    pub fn around(x: &Tensor, pad: f64) -> Result<Self> {
        if x.shape().len() != 2 || x.cols() < 2 {
            return Err(Error::shape("bounds", "need a matrix with at least two columns"));
        }
        let mut b = Bounds {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for i in 0..x.rows() {
            let r = x.row(i);
            b.x_min = b.x_min.min(r[0]);
            b.x_max = b.x_max.max(r[0]);
            b.y_min = b.y_min.min(r[1]);
            b.y_max = b.y_max.max(r[1]);
        }
        b.x_min -= pad;
        b.x_max += pad;
        b.y_min -= pad;
        b.y_max += pad;
        b.validate()?;
        Ok(b)
    }
}

/// Predicted label and confidence on a regular `R x R` grid of cell centres.
/// Cells are stored row-major with `x0` varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub bounds: Bounds,
    pub resolution: usize,
    pub labels: Vec<usize>,
    pub max_prob: Vec<f64>,
}

impl BoundaryGrid {
    pub fn cell_width(&self) -> f64 {
        (self.bounds.x_max - self.bounds.x_min) / self.resolution as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.bounds.y_max - self.bounds.y_min) / self.resolution as f64
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.cell_width().hypot(self.cell_height())
    }

    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.bounds.x_min + (ix as f64 + 0.5) * self.cell_width(),
            self.bounds.y_min + (iy as f64 + 0.5) * self.cell_height(),
        ]
    }

    /// Cell containing `p`; points on the upper edges map to the last cell.
    pub fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let r = self.resolution;
        let ix = ((p[0] - self.bounds.x_min) / self.cell_width()).floor() as usize;
        let iy = ((p[1] - self.bounds.y_min) / self.cell_height()).floor() as usize;
        (ix.min(r - 1), iy.min(r - 1))
    }

    pub fn label_at(&self, ix: usize, iy: usize) -> usize {
        self.labels[iy * self.resolution + ix]
    }

    /// CSV with columns `x0, x1, pred_label, max_prob`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x0", "x1", "pred_label", "max_prob"])?;
        for iy in 0..self.resolution {
            for ix in 0..self.resolution {
                let [x0, x1] = self.center(ix, iy);
                let i = iy * self.resolution + ix;
                w.write_record(&[
                    x0.to_string(),
                    x1.to_string(),
                    self.labels[i].to_string(),
                    self.max_prob[i].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates a two-input classifier on every grid cell centre.
pub fn boundary_grid(model: &Model, bounds: Bounds, resolution: usize) -> Result<BoundaryGrid> {
    if model.mlp.input_dim() != 2 {
        return Err(Error::invalid(format!(
            "decision-boundary grids need a 2-D input, model takes {}",
            model.mlp.input_dim()
        )));
    }
    if resolution == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    bounds.validate()?;
    let mut grid = BoundaryGrid {
        bounds,
        resolution,
        labels: Vec::new(),
        max_prob: Vec::new(),
    };
    let mut points = Vec::with_capacity(2 * resolution * resolution);
    for iy in 0..resolution {
        for ix in 0..resolution {
            points.extend(grid.center(ix, iy));
        }
    }
    let x = Tensor::matrix(resolution * resolution, 2, points)?;
    let (logits, _) = model.mlp.infer(&x)?;
    let k = logits.cols();
    let probs = softmax_raw(logits.values(), logits.rows(), k);
    grid.labels = crate::models::argmax_rows(&logits);
    grid.max_prob = probs
        .chunks(k)
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub margins: Vec<f64>,
    /// True where no differently-labelled cell exists and the margin is the
    /// distance to the nearest bound (a lower bound).
    pub flagged: Vec<bool>,
    pub median: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Distance from each point to the nearest cell centre whose predicted label
/// differs from the label of the point's own cell. Accurate to within one
/// cell diagonal.
pub fn minority_margin(grid: &BoundaryGrid, points: &[[f64; 2]]) -> Result<MarginReport> {
    if points.is_empty() {
        return Err(Error::invalid("no minority points"));
    }
    let r = grid.resolution;
    let mut margins = Vec::with_capacity(points.len());
    let mut flagged = Vec::with_capacity(points.len());
    for &p in points {
        if !grid.bounds.contains(p) {
            return Err(Error::invalid(format!("point {p:?} outside grid bounds")));
        }
        let (px, py) = grid.cell_of(p);
        let own = grid.label_at(px, py);
        let mut best = f64::INFINITY;
        for iy in 0..r {
            for ix in 0..r {
                if grid.label_at(ix, iy) != own {
                    let c = grid.center(ix, iy);
                    best = best.min((c[0] - p[0]).hypot(c[1] - p[1]));
                }
            }
        }
        if best.is_finite() {
            margins.push(best);
            flagged.push(false);
        } else {
            let b = grid.bounds;
            margins.push(
                (p[0] - b.x_min)
                    .min(b.x_max - p[0])
                    .min(p[1] - b.y_min)
                    .min(b.y_max - p[1]),
            );
            flagged.push(true);
        }
    }
    let median = median(&margins).expect("non-empty");
    Ok(MarginReport {
        margins,
        flagged,
        median,
    })
}
