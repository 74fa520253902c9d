use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MajorityGrowth};
use super::stats::{
    misalignment, misalignment_steps, percent_improvement, sample_variance, AccuracyGrid, ImprovementMode,
    TrialAggregate,
};
use super::train::{curate_test, run_training, TrainedTrial, TrialReport};
use crate::error::{Error, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

pub fn trial_file_name(config_hash: &str, seed: u64) -> String {
    format!("trial-{config_hash}-seed{seed}.json")
}

pub fn checkpoint_file_name(config_hash: &str, seed: u64) -> String {
    format!("model-{config_hash}-seed{seed}.json")
}

pub fn aggregate_file_name(config_hash: &str) -> String {
    format!("aggregate-{config_hash}.json")
}

/// Which test metric a sweep compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    #[default]
    Overall,
    Minority,
    Majority,
}

impl FromStr for SweepMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// Aggregates of one configuration over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub overall_accuracy: TrialAggregate,
    pub minority_accuracy: TrialAggregate,
    pub majority_accuracy: TrialAggregate,
    pub final_train_accuracy: TrialAggregate,
}

impl ExperimentSummary {
    pub fn from_reports(config: &ExperimentConfig, reports: &[TrialReport]) -> Result<Self> {
        let seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
        let group = |name: &str, f: &dyn Fn(&TrialReport) -> Option<f64>| -> Result<TrialAggregate> {
            let values = reports
                .iter()
                .map(|r| f(r).ok_or_else(|| Error::Data(format!("seed {}: {name} accuracy undefined", r.seed))))
                .collect::<Result<Vec<f64>>>()?;
            TrialAggregate::new(&seeds, &values)
        };
        Ok(Self {
            config_hash: config.hash(),
            config: config.clone(),
            overall_accuracy: group("overall", &|r| Some(r.metrics.overall_accuracy))?,
            minority_accuracy: group("minority", &|r| r.metrics.minority_accuracy)?,
            majority_accuracy: group("majority", &|r| r.metrics.majority_accuracy)?,
            final_train_accuracy: group("train", &|r| Some(r.final_train_accuracy))?,
        })
    }

    pub fn metric(&self, metric: SweepMetric) -> &TrialAggregate {
        match metric {
            SweepMetric::Overall => &self.overall_accuracy,
            SweepMetric::Minority => &self.minority_accuracy,
            SweepMetric::Majority => &self.majority_accuracy,
        }
    }
}

/// Trains every seed of `config` (in parallel), sorted by seed. With `out`,
/// writes one report and one evaluation checkpoint per seed, then the
/// aggregate.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<(ExperimentSummary, Vec<TrainedTrial>)> {
    config.validate()?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    let trials = seeds
        .par_iter()
        .map(|&s| run_training(config, s))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<TrialReport> = trials.iter().map(|t| t.report.clone()).collect();
    let summary = ExperimentSummary::from_reports(config, &reports)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let hash = &summary.config_hash;
        for t in &trials {
            write_json(&dir.join(trial_file_name(hash, t.report.seed)), &t.report)?;
            t.eval_model
                .save_checkpoint(&dir.join(checkpoint_file_name(hash, t.report.seed)))?;
        }
        write_json(&dir.join(aggregate_file_name(hash)), &summary)?;
    }
    Ok((summary, trials))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchSize,
    RTrain,
    RTest,
    NMajority,
    Method,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown sweep axis `{s}`")))
    }
}

fn parse_value<T: FromStr>(axis: SweepAxis, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for axis {axis:?}")))
}

/// `config` with one axis set to `value`.
pub fn apply_axis(config: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    match axis {
        SweepAxis::BatchSize => c.train.batch_size = parse_value(axis, value)?,
        SweepAxis::RTrain => c.r_train = Some(parse_value(axis, value)?),
        SweepAxis::RTest => c.r_test = Some(parse_value(axis, value)?),
        SweepAxis::NMajority => {
            let n = parse_value(axis, value)?;
            c.majority_growth = Some(match c.majority_growth {
                Some(g) => MajorityGrowth { n_majority: n, ..g },
                None => {
                    return Err(Error::Config(
                        "the n_majority axis needs majority_growth in the base config".into(),
                    ))
                }
            });
        }
        SweepAxis::Method => c.method = c.method.apply_preset(value)?,
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub summary: ExperimentSummary,
    pub percent_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub metric: SweepMetric,
    pub baseline: Option<String>,
    pub improvement_mode: ImprovementMode,
    pub rows: Vec<SweepRow>,
    /// Sample variance of the percent improvements across rows.
    pub improvement_variance: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub metric: SweepMetric,
    /// Axis value whose row is the reference for percent improvement.
    pub baseline: Option<String>,
    /// Defaults to dividing by the candidate for batch-size sweeps and by
    /// the baseline otherwise.
    pub improvement_mode: Option<ImprovementMode>,
}

impl SweepResult {
    /// Recomputes percent improvements and their variance from the row
    /// aggregates.
    pub fn recompute_derived(&mut self) -> Result<()> {
        let Some(base) = &self.baseline else {
            self.rows.iter_mut().for_each(|r| r.percent_improvement = None);
            self.improvement_variance = None;
            return Ok(());
        };
        let base_row = self
            .rows
            .iter()
            .find(|r| &r.value == base)
            .ok_or_else(|| Error::Config(format!("baseline `{base}` is not a sweep value")))?;
        let base_mean = base_row.summary.metric(self.metric).mean;
        let mut improvements = Vec::with_capacity(self.rows.len());
        for row in &mut self.rows {
            let acc = row.summary.metric(self.metric).mean;
            let p = percent_improvement(acc, base_mean, self.improvement_mode)?;
            row.percent_improvement = Some(p);
            improvements.push(p);
        }
        self.improvement_variance = sample_variance(&improvements);
        Ok(())
    }

    /// One row per axis value with the compared metric, the group
    /// accuracies and the per-seed values of the compared metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let seeds = self.rows.first().map(|r| r.summary.metric(self.metric).seeds.clone()).unwrap_or_default();
        let mut header: Vec<String> = [
            "value",
            "metric_mean",
            "metric_stderr",
            "n_seeds",
            "overall_mean",
            "overall_stderr",
            "minority_mean",
            "minority_stderr",
            "majority_mean",
            "majority_stderr",
            "percent_improvement",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(seeds.iter().map(|s| format!("seed_{s}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let s = &row.summary;
            let m = s.metric(self.metric);
            let mut rec = vec![
                row.value.clone(),
                m.mean.to_string(),
                m.stderr.to_string(),
                m.values.len().to_string(),
                s.overall_accuracy.mean.to_string(),
                s.overall_accuracy.stderr.to_string(),
                s.minority_accuracy.mean.to_string(),
                s.minority_accuracy.stderr.to_string(),
                s.majority_accuracy.mean.to_string(),
                s.majority_accuracy.stderr.to_string(),
                row.percent_improvement.map(|p| p.to_string()).unwrap_or_default(),
            ];
            rec.extend(m.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every seed of `config` at each axis value. With `out`, per-trial
/// files go to one subdirectory per value and the table is written as
/// `sweep.json` and `sweep.csv`.
pub fn run_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    options: &SweepOptions,
    out: Option<&Path>,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| apply_axis(config, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        let dir = out.map(|d| d.join(format!("{axis:?}-{value}").to_lowercase().replace([' ', '/'], "_")));
        let (summary, _) = run_experiment(cfg, dir.as_deref())?;
        rows.push(SweepRow {
            value: value.clone(),
            summary,
            percent_improvement: None,
        });
    }
    let default_mode = if axis == SweepAxis::BatchSize {
        ImprovementMode::DivideByCandidate
    } else {
        ImprovementMode::DivideByBaseline
    };
    let mut result = SweepResult {
        axis,
        values: values.to_vec(),
        metric: options.metric,
        baseline: options.baseline.clone(),
        improvement_mode: options.improvement_mode.unwrap_or(default_mode),
        rows,
        improvement_variance: None,
    };
    result.recompute_derived()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("sweep.json"), &result)?;
        result.write_csv(&dir.join("sweep.csv"))?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedGrid {
    pub seed: u64,
    pub grid: AccuracyGrid,
    pub misalignment: f64,
    /// `None` when some test ratio is not among the train ratios.
    pub misalignment_steps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioGridResult {
    pub config_hash: String,
    pub per_seed: Vec<SeedGrid>,
    /// Seed-averaged accuracies.
    pub mean_grid: AccuracyGrid,
    pub misalignment: TrialAggregate,
    pub misalignment_steps: Option<TrialAggregate>,
    pub mean_grid_misalignment: f64,
    pub tie_break: String,
}

/// Overall test accuracy for every `(r_train, r_test)` pair. Each seed trains
/// once per train ratio and is evaluated on the test split curated to every
/// test ratio.
pub fn run_ratio_grid(config: &ExperimentConfig, train_ratios: &[f64], test_ratios: &[f64]) -> Result<RatioGridResult> {
    config.validate()?;
    if train_ratios.is_empty() || test_ratios.is_empty() {
        return Err(Error::Config("ratio grid needs train and test ratios".into()));
    }
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&s| (0..train_ratios.len()).map(move |i| (s, i)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, i)| -> Result<Vec<f64>> {
            let mut c = config.clone();
            c.r_train = Some(train_ratios[i]);
            c.r_test = None;
            let trial = run_training(&c, seed)?;
            test_ratios
                .iter()
                .map(|&r| {
                    let test = curate_test(&trial.data.test_pool, Some(r), seed)?;
                    let pred = trial.eval_model.predict(test.x())?;
                    Ok(pred.iter().zip(test.y()).filter(|(p, y)| p == y).count() as f64 / test.len() as f64)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let n_train = train_ratios.len();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for (si, &seed) in seeds.iter().enumerate() {
        let grid = AccuracyGrid {
            train_ratios: train_ratios.to_vec(),
            test_ratios: test_ratios.to_vec(),
            accuracy: rows[si * n_train..(si + 1) * n_train].to_vec(),
        };
        per_seed.push(SeedGrid {
            seed,
            misalignment: misalignment(&grid)?,
            misalignment_steps: misalignment_steps(&grid).ok(),
            grid,
        });
    }
    let n = seeds.len() as f64;
    let mean_grid = AccuracyGrid {
        train_ratios: train_ratios.to_vec(),
        test_ratios: test_ratios.to_vec(),
        accuracy: (0..n_train)
            .map(|i| {
                (0..test_ratios.len())
                    .map(|j| per_seed.iter().map(|s| s.grid.accuracy[i][j]).sum::<f64>() / n)
                    .collect()
            })
            .collect(),
    };
    let values: Vec<f64> = per_seed.iter().map(|s| s.misalignment).collect();
    let steps: Option<Vec<f64>> = per_seed.iter().map(|s| s.misalignment_steps).collect();
    Ok(RatioGridResult {
        config_hash: config.hash(),
        misalignment: TrialAggregate::new(&seeds, &values)?,
        misalignment_steps: steps.map(|v| TrialAggregate::new(&seeds, &v)).transpose()?,
        mean_grid_misalignment: misalignment(&mean_grid)?,
        mean_grid,
        per_seed,
        tie_break: "highest accuracy; ties go to the train ratio closest to the test ratio".into(),
    })
}
