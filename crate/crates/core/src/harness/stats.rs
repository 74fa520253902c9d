use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and standard error of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAggregate {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 for a single trial.
    pub stderr: f64,
    pub single_trial: bool,
}

impl TrialAggregate {
    /// Values are reordered by ascending seed before aggregation.
    pub fn new(seeds: &[u64], values: &[f64]) -> Result<Self> {
        if seeds.is_empty() || seeds.len() != values.len() {
            return Err(Error::invalid("aggregate needs one value per seed and at least one seed"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("aggregate values must be finite"));
        }
        let mut pairs: Vec<(u64, f64)> = seeds.iter().copied().zip(values.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        let (seeds, values): (Vec<u64>, Vec<f64>) = pairs.into_iter().unzip();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let single_trial = values.len() == 1;
        let stderr = if single_trial {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        };
        Ok(Self {
            seeds,
            values,
            mean,
            stderr,
            single_trial,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImprovementMode {
    /// `(acc - baseline) / acc`.
    DivideByCandidate,
    /// `(acc - baseline) / baseline`.
    #[default]
    DivideByBaseline,
}

pub fn percent_improvement(acc: f64, baseline_acc: f64, mode: ImprovementMode) -> Result<f64> {
    let denom = match mode {
        ImprovementMode::DivideByCandidate => acc,
        ImprovementMode::DivideByBaseline => baseline_acc,
    };
    if denom == 0.0 {
        return Err(Error::invalid(format!("zero denominator in percent improvement ({mode:?})")));
    }
    Ok((acc - baseline_acc) / denom)
}

/// Sample variance; `None` with fewer than two values.
pub fn sample_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Test accuracy indexed `accuracy[i][j]` for train ratio `i` and test ratio `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub train_ratios: Vec<f64>,
    pub test_ratios: Vec<f64>,
    pub accuracy: Vec<Vec<f64>>,
}

impl AccuracyGrid {
    fn validate(&self) -> Result<()> {
        if self.train_ratios.is_empty() || self.test_ratios.is_empty() {
            return Err(Error::invalid("empty accuracy grid"));
        }
        if self.accuracy.len() != self.train_ratios.len()
            || self.accuracy.iter().any(|row| row.len() != self.test_ratios.len())
        {
            return Err(Error::invalid("accuracy grid is incomplete"));
        }
        Ok(())
    }

    /// For each test ratio, the index of the train ratio with the highest
    /// accuracy; ties go to the train ratio closest to the test ratio, then
    /// to the lower index.
    pub fn best_train_indices(&self) -> Result<Vec<usize>> {
        self.validate()?;
        Ok((0..self.test_ratios.len())
            .map(|j| {
                let target = self.test_ratios[j];
                let mut best = 0;
                for i in 1..self.train_ratios.len() {
                    let (a, b) = (self.accuracy[i][j], self.accuracy[best][j]);
                    let closer = (self.train_ratios[i] - target).abs() < (self.train_ratios[best] - target).abs();
                    if a > b || (a == b && closer) {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

/// Mean over test ratios of `|best train ratio - test ratio|`.
pub fn misalignment(grid: &AccuracyGrid) -> Result<f64> {
    let best = grid.best_train_indices()?;
    let total: f64 = best
        .iter()
        .zip(&grid.test_ratios)
        .map(|(&i, &t)| (grid.train_ratios[i] - t).abs())
        .sum();
    Ok(total / grid.test_ratios.len() as f64)
}

/// Misalignment in grid steps: mean over test ratios of the index distance
/// between the best train ratio and the train ratio equal to the test ratio.
/// Requires every test ratio to appear among the train ratios.
pub fn misalignment_steps(grid: &AccuracyGrid) -> Result<f64> {
    let best = grid.best_train_indices()?;
    let mut total = 0.0;
    for (&i, &t) in best.iter().zip(&grid.test_ratios) {
        let own = grid
            .train_ratios
            .iter()
            .position(|&r| r == t)
            .ok_or_else(|| Error::invalid(format!("test ratio {t} is not a train ratio")))?;
        total += (i as f64 - own as f64).abs();
    }
    Ok(total / grid.test_ratios.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn aggregate_hand_case() {
        let a = TrialAggregate::new(&[0, 1, 2, 3, 4], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(a.mean, 3.0);
        assert!((a.stderr - 2.5f64.sqrt() / 5f64.sqrt()).abs() < 1e-12);
        assert!((a.stderr - 0.7071).abs() < 1e-4);
        assert!(!a.single_trial);
    }

    #[test]
    fn single_trial() {
        let a = TrialAggregate::new(&[7], &[0.4]).unwrap();
        assert_eq!((a.mean, a.stderr, a.single_trial), (0.4, 0.0, true));
        assert!(TrialAggregate::new(&[], &[]).is_err());
    }

    #[test]
    fn aggregate_sorts_by_seed() {
        let a = TrialAggregate::new(&[3, 1, 2], &[30.0, 10.0, 20.0]).unwrap();
        assert_eq!(a.seeds, vec![1, 2, 3]);
        assert_eq!(a.values, vec![10.0, 20.0, 30.0]);
    }

    #[test]
    fn improvement_modes() {
        for mode in [ImprovementMode::DivideByCandidate, ImprovementMode::DivideByBaseline] {
            assert_eq!(percent_improvement(0.7, 0.7, mode).unwrap(), 0.0);
        }
        let a = percent_improvement(0.80, 0.72, ImprovementMode::DivideByCandidate).unwrap();
        assert!((a - 0.1).abs() < 1e-12);
        let b = percent_improvement(0.80, 0.72, ImprovementMode::DivideByBaseline).unwrap();
        assert!((b - 0.08 / 0.72).abs() < 1e-12);
        assert!(percent_improvement(0.0, 0.5, ImprovementMode::DivideByCandidate).is_err());
        assert!(percent_improvement(0.5, 0.0, ImprovementMode::DivideByBaseline).is_err());
    }

    #[test]
    fn misalignment_cases() {
        let aligned = AccuracyGrid {
            train_ratios: vec![1.0, 0.1],
            test_ratios: vec![1.0, 0.1],
            accuracy: vec![vec![0.9, 0.5], vec![0.6, 0.95]],
        };
        assert_eq!(misalignment(&aligned).unwrap(), 0.0);
        assert_eq!(misalignment_steps(&aligned).unwrap(), 0.0);

        let off = AccuracyGrid {
            train_ratios: vec![1.0, 0.2, 0.1],
            test_ratios: vec![0.2, 1.0],
            accuracy: vec![vec![0.5, 0.9], vec![0.6, 0.7], vec![0.8, 0.6]],
        };
        assert!((misalignment(&off).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(misalignment_steps(&off).unwrap(), 0.5);

        let empty = AccuracyGrid {
            train_ratios: vec![],
            test_ratios: vec![],
            accuracy: vec![],
        };
        assert!(misalignment(&empty).is_err());
    }

    #[test]
    fn ties_prefer_closest_train_ratio() {
        let g = AccuracyGrid {
            train_ratios: vec![1.0, 0.5, 0.2],
            test_ratios: vec![0.5],
            accuracy: vec![vec![0.8], vec![0.8], vec![0.8]],
        };
        assert_eq!(g.best_train_indices().unwrap(), vec![1]);
        assert_eq!(misalignment(&g).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn aggregate_matches_recomputation(values in prop::collection::vec(-10.0f64..10.0, 1..12)) {
            let seeds: Vec<u64> = (0..values.len() as u64).collect();
            let a = TrialAggregate::new(&seeds, &values).unwrap();
            let again = TrialAggregate::new(&a.seeds, &a.values).unwrap();
            prop_assert_eq!(&a, &again);
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            prop_assert!((a.mean - mean).abs() < 1e-12);
            if values.len() > 1 {
                let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
                prop_assert!((a.stderr - sd / n.sqrt()).abs() < 1e-12);
            }
        }
    }
}
