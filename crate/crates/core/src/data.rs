//! Datasets, imbalance curation, class profiles, balanced sampling and
//! two-view augmentation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Feature matrix with integer labels in `0..class_names.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    class_names: Vec<String>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, class_names: Vec<String>, feature_names: Vec<String>) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(Error::Data(format!(
                "feature matrix {:?} does not match {} labels",
                x.shape(),
                y.len()
            )));
        }
        if feature_names.len() != x.cols() {
            return Err(Error::Data(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.cols()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            x,
            y,
            class_names,
            feature_names,
        })
    }

    /// Dataset with generated names `class_0..` and `x0..`.
    pub fn unnamed(x: Tensor, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        let class_names = (0..n_classes).map(|c| format!("class_{c}")).collect();
        let feature_names = (0..x.cols()).map(|j| format!("x{j}")).collect();
        Self::new(x, y, class_names, feature_names)
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of the samples of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.y.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.x.select_rows(indices)?,
            indices.iter().map(|&i| self.y[i]).collect(),
            self.class_names.clone(),
            self.feature_names.clone(),
        )
    }

    /// Writes the dataset with the label column last.
    pub fn write_csv(&self, path: &Path, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(label_column);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            record.push(self.class_names[self.y[i]].clone());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a headered CSV. Labels are mapped to `0..K` in sorted order of the
/// distinct label strings; every other column must be numeric.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Data(format!("label column `{label_column}` not found in header")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: headers[j].to_string(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[j].to_string(),
                    value: cell.to_string(),
                });
            }
            values.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    if feature_names.is_empty() {
        return Err(Error::Data(format!("{}: no feature columns", path.display())));
    }
    let class_names: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let y = raw_labels
        .iter()
        .map(|l| class_names.binary_search(l).expect("label in its own set"))
        .collect();
    let x = Tensor::matrix(raw_labels.len(), feature_names.len(), values)?;
    Dataset::new(x, y, class_names, feature_names)
}

/// Isotropic Gaussian classes with means evenly spaced on a circle of radius
/// `mean_radius` in the first two coordinates.
pub fn gen_gaussian_mixture(
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    mean_radius: f64,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || dim < 2 || n_per_class == 0 || !(sigma > 0.0) || !(mean_radius >= 0.0) {
        return Err(Error::invalid(format!(
            "gaussian mixture needs K >= 2, d >= 2, n > 0, sigma > 0, radius >= 0; got K={n_classes}, d={dim}, n={n_per_class}, sigma={sigma}, radius={mean_radius}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let means = mixture_means(n_classes, dim, mean_radius);
    let mut values = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut y = Vec::with_capacity(n_classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            values.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
            y.push(c);
        }
    }
    let x = Tensor::matrix(y.len(), dim, values)?;
    Dataset::unnamed(x, y, n_classes)
}

/// Class means used by [`gen_gaussian_mixture`].
pub fn mixture_means(n_classes: usize, dim: usize, mean_radius: f64) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
            let mut m = vec![0.0; dim];
            m[0] = mean_radius * angle.cos();
            m[1] = mean_radius * angle.sin();
            m
        })
        .collect()
}

/// Target counts `round(n_max * r^(k / (K - 1)))` for classes `k = 0..K`.
pub fn exponential_counts(n_max: usize, n_classes: usize, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("imbalance ratio must be in (0, 1], got {ratio}")));
    }
    if n_classes < 2 {
        return Err(Error::invalid("exponential curation needs at least two classes"));
    }
    Ok((0..n_classes)
        .map(|k| {
            let n = (n_max as f64 * ratio.powf(k as f64 / (n_classes - 1) as f64)).round() as usize;
            n.max(1)
        })
        .collect())
}

/// Subsamples each class to an exponentially decaying size: class `k` keeps
/// `round(n_0 * r^(k / (K - 1)))` samples where `n_0` is the largest original
/// class size. Selected rows keep their original relative order.
pub fn curate_exponential(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    let counts = dataset.counts();
    let n_max = counts.iter().copied().max().unwrap_or(0);
    let targets = exponential_counts(n_max, dataset.n_classes(), ratio)?;
    curate_to_counts(dataset, &targets, seed)
}

/// Seeded uniform subsample without replacement to the given per-class counts.
pub fn curate_to_counts(dataset: &Dataset, targets: &[usize], seed: u64) -> Result<Dataset> {
    if targets.len() != dataset.n_classes() {
        return Err(Error::invalid(format!(
            "{} target counts for {} classes",
            targets.len(),
            dataset.n_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (c, (members, &want)) in dataset.class_indices().iter().zip(targets).enumerate() {
        if members.len() < want {
            return Err(Error::Data(format!(
                "class {} ({}) has {} samples, needs {want}",
                c,
                dataset.class_names[c],
                members.len()
            )));
        }
        keep.extend(index::sample(&mut rng, members.len(), want).into_iter().map(|i| members[i]));
    }
    keep.sort_unstable();
    dataset.subset(&keep)
}

/// Per-class counts and proportions of a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    /// `min(n_c) / max(n_c)`.
    pub ratio: f64,
    pub n_classes: usize,
}

impl ClassProfile {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Data("class profile of zero classes".into()));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("class {c} has no samples")));
        }
        let n: usize = counts.iter().sum();
        let min = *counts.iter().min().expect("non-empty");
        let max = *counts.iter().max().expect("non-empty");
        Ok(Self {
            counts: counts.to_vec(),
            proportions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
            ratio: min as f64 / max as f64,
            n_classes: counts.len(),
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn class_profile(dataset: &Dataset) -> Result<ClassProfile> {
    if dataset.is_empty() {
        return Err(Error::Data("class profile of an empty dataset".into()));
    }
    let counts = dataset.counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "class {c} ({}) has no samples",
            dataset.class_names[c]
        )));
    }
    ClassProfile::from_counts(&counts)
}

/// Infinite stream of sample indices: a uniformly random class, then a
/// uniformly random sample from it.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    classes: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let c = self.rng.random_range(0..self.classes.len());
        let members = &self.classes[c];
        Some(members[self.rng.random_range(0..members.len())])
    }
}

pub fn make_balanced_sampler(dataset: &Dataset, seed: u64) -> Result<BalancedSampler> {
    let classes = dataset.class_indices();
    if classes.len() < 2 {
        return Err(Error::invalid("balanced sampling needs at least two classes"));
    }
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {c} has no samples to sample from")));
    }
    Ok(BalancedSampler {
        classes,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

/// Perturbation used to build the two SSL views of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub noise_sigma: f64,
    pub feature_dropout_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            feature_dropout_prob: 0.1,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.feature_dropout_prob) {
            return Err(Error::invalid(format!(
                "feature_dropout_prob must be in [0, 1), got {}",
                self.feature_dropout_prob
            )));
        }
        Ok(())
    }
}

/// One augmented view: Gaussian jitter, then each feature zeroed with the
/// dropout probability.
fn augment_view(x: &Tensor, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let values = x
        .values()
        .iter()
        .map(|&v| {
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
            } else {
                0.0
            };
            let dropped = spec.feature_dropout_prob > 0.0 && rng.random::<f64>() < spec.feature_dropout_prob;
            if dropped {
                0.0
            } else {
                v + noise
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), values)
}

/// Two independently perturbed copies of `x`.
pub fn augment_two_views(x: &Tensor, spec: &AugmentSpec, seed: u64) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = augment_view(x, spec, &mut rng)?;
    let b = augment_view(x, spec, &mut rng)?;
    Ok((a, b))
}

/// Fixed minority, growing majority: `n_minority` samples of
/// `minority_class` plus `n_majority` samples of every other class.
pub fn grow_majority(
    pool: &Dataset,
    minority_class: usize,
    n_minority: usize,
    n_majority: usize,
    seed: u64,
) -> Result<Dataset> {
    if minority_class >= pool.n_classes() {
        return Err(Error::invalid(format!("minority class {minority_class} out of range")));
    }
    let counts = pool.counts();
    let targets: Vec<usize> = (0..pool.n_classes())
        .map(|c| if c == minority_class { n_minority } else { n_majority })
        .collect();
    if counts.iter().zip(&targets).any(|(have, want)| have < want) {
        return Err(Error::Data(format!(
            "pool too small: available counts {counts:?}, requested {targets:?}"
        )));
    }
    curate_to_counts(pool, &targets, seed)
}
