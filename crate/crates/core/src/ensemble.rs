//! Replica orchestration and Monte Carlo reductions.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seeding::{substream_rng, substream_seed};

/// Size and master seed of a Monte Carlo ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ensemble {
    pub replicas: usize,
    pub seed: u64,
}

impl Ensemble {
    pub fn new(replicas: usize, seed: u64) -> Self {
        Self { replicas, seed }
    }

    /// Seed of replica `r` within the substream `label`.
    pub fn replica_seed(&self, label: &str, r: usize) -> u64 {
        substream_seed(self.seed, label, r as u64)
    }

    /// Runs `f` on every replica index in parallel; the output is ordered by
    /// replica index regardless of scheduling.
    pub fn map<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..self.replicas).into_par_iter().map(f).collect()
    }
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

pub fn mean_and_stderr(samples: &[f64]) -> MeanEstimate {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return MeanEstimate { mean: f64::NAN, stderr: f64::NAN };
    }
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return MeanEstimate { mean, stderr: f64::NAN };
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    MeanEstimate { mean, stderr: (var / n).sqrt() }
}

/// Sample variance with the standard error of the variance estimator
/// (computed from the fourth central moment).
pub fn variance_and_stderr(samples: &[f64]) -> MeanEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    MeanEstimate {
        mean: var,
        stderr: ((m4 - m2 * m2) / n).max(0.0).sqrt(),
    }
}

/// Bootstrap standard deviation of each component of `stat`, from
/// `resamples` draws with replacement of `n` indices on the `"bootstrap"`
/// substream of `seed`.
pub fn bootstrap_stderr<F>(n: usize, resamples: usize, seed: u64, stat: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> Vec<f64>,
{
    let mut rng = substream_rng(seed, "bootstrap", 0);
    let draws: Vec<Vec<f64>> = (0..resamples)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&idx)
        })
        .collect();
    let dims = draws.first().map_or(0, Vec::len);
    (0..dims)
        .map(|d| {
            let xs: Vec<f64> = draws.iter().map(|v| v[d]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
        })
        .collect()
}
