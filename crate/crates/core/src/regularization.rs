//! Stopping rules, the bisection step policy, iteration logs and noise.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VoltageSeries;

/// `true` iff `residual ≥ τ δ` (the iteration should continue).
pub fn discrepancy_flag(residual: f64, delta: f64, tau: f64) -> bool {
    residual >= tau * delta
}

/// First index `k` whose flags `k−n+1..=k` are all `false` while flag `k−n`
/// is `true`. Indices before the start count as `true`.
pub fn cycle_stop(flags: &[bool], n: usize) -> Option<usize> {
    if n == 0 {
        return None;
    }
    let mut zeros = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            zeros = 0;
            continue;
        }
        zeros += 1;
        if zeros == n {
            return Some(k);
        }
    }
    None
}

/// Accepts the trial step iff the residual strictly decreased; otherwise
/// halves the step size.
pub fn adapt_step(prev_residual: f64, new_residual: f64, mu: f64) -> (bool, f64) {
    if new_residual < prev_residual {
        (true, mu)
    } else {
        (false, 0.5 * mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub mu: f64,
    /// Bisection on non-decrease; a fixed step otherwise.
    pub adaptive: bool,
    /// Terminate once `μ < mu_min_factor · μ_initial`.
    pub mu_min_factor: f64,
}

impl StepPolicy {
    pub fn fixed(mu: f64) -> Self {
        StepPolicy {
            mu,
            adaptive: false,
            mu_min_factor: 1e-6,
        }
    }

    pub fn adaptive(mu: f64) -> Self {
        StepPolicy {
            mu,
            adaptive: true,
            mu_min_factor: 1e-6,
        }
    }

    pub fn mu_min(&self) -> f64 {
        self.mu * self.mu_min_factor
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {}", self.mu)));
        }
        if !(self.mu_min_factor > 0.0 && self.mu_min_factor < 1.0) {
            return Err(Error::InvalidParameter("mu_min_factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub tau: f64,
    pub max_iterations: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule {
            tau: 2.5,
            max_iterations: 1000,
        }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 2.0) {
            return Err(Error::InvalidParameter(format!("tau must exceed 2, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Declares divergence after `patience` consecutive iterations whose
/// residual exceeds `factor ×` the initial residual.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    initial: f64,
    factor: f64,
    patience: usize,
    streak: usize,
}

impl DivergenceGuard {
    pub fn new(initial: f64) -> Self {
        DivergenceGuard {
            initial,
            factor: 10.0,
            patience: 50,
            streak: 0,
        }
    }

    pub fn observe(&mut self, iteration: usize, residual: f64) -> Result<()> {
        if !residual.is_finite() {
            return Err(Error::Divergence {
                iteration,
                residual,
                initial: self.initial,
            });
        }
        if residual > self.factor * self.initial {
            self.streak += 1;
            if self.streak >= self.patience {
                return Err(Error::Divergence {
                    iteration,
                    residual,
                    initial: self.initial,
                });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub mu: f64,
    pub res_obs: f64,
    pub res_llg: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub rel_err_m: Option<f64>,
    pub inner_loops: Option<usize>,
}

/// Append-only per-iteration history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationLog {
    records: Vec<IterationRecord>,
}

impl IterationLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: IterationRecord) {
        if let Some(last) = self.records.last() {
            assert!(rec.iter > last.iter, "iteration indices must increase");
        }
        self.records.push(rec);
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_inner_loops(&self) -> usize {
        self.records.iter().filter_map(|r| r.inner_loops).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let with_inner = self.records.iter().any(|r| r.inner_loops.is_some());
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["iter", "mu", "res_obs", "res_llg", "alpha1", "alpha2", "rel_err_m"];
        if with_inner {
            header.push("inner_loops");
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.iter.to_string(),
                r.mu.to_string(),
                r.res_obs.to_string(),
                r.res_llg.to_string(),
                r.alpha1.to_string(),
                r.alpha2.to_string(),
                r.rel_err_m.map(|v| v.to_string()).unwrap_or_default(),
            ];
            if with_inner {
                row.push(r.inner_loops.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    Uniform,
}

/// Unit-free noise pattern for every channel; channel `c` uses stream `c`
/// of the seeded generator so channels are independent of each other.
pub fn noise_pattern(
    n_channels: usize,
    len: usize,
    seed: u64,
    dist: NoiseDistribution,
) -> Vec<Vec<f64>> {
    let uniform = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    (0..n_channels)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            (0..len)
                .map(|_| match dist {
                    NoiseDistribution::Gaussian => StandardNormal.sample(&mut rng),
                    NoiseDistribution::Uniform => uniform.sample(&mut rng),
                })
                .collect()
        })
        .collect()
}

/// Noisy data together with the perturbation that was added.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyData {
    pub data: VoltageSeries,
    pub perturbation: Vec<Vec<f64>>,
}

/// Adds seeded noise rescaled so that each channel's perturbation has
/// relative L²(0,T) size exactly `delta_rel`; records the absolute `δ`.
pub fn noise_inject(
    y: &VoltageSeries,
    delta_rel: f64,
    seed: u64,
    dist: NoiseDistribution,
) -> Result<NoisyData> {
    if !(delta_rel >= 0.0 && delta_rel.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise level must be nonnegative, got {delta_rel}")));
    }
    let raw = noise_pattern(y.n_channels(), y.grid.nt, seed, dist);
    let probe = VoltageSeries {
        grid: y.grid,
        channels: raw,
        delta: vec![0.0; y.n_channels()],
    };
    let mut perturbation = Vec::with_capacity(y.n_channels());
    for c in 0..y.n_channels() {
        let target = delta_rel * y.channel_norm(c);
        let size = probe.channel_norm(c);
        let s = if target == 0.0 || size == 0.0 { 0.0 } else { target / size };
        perturbation.push(probe.channels[c].iter().map(|v| s * v).collect::<Vec<f64>>());
    }
    let data = apply_perturbation(y, &perturbation);
    Ok(NoisyData { data, perturbation })
}

/// `y + e` per channel with `δ_c = ‖e_c‖`.
pub fn apply_perturbation(y: &VoltageSeries, perturbation: &[Vec<f64>]) -> VoltageSeries {
    let channels: Vec<Vec<f64>> = y
        .channels
        .iter()
        .zip(perturbation)
        .map(|(a, e)| a.iter().zip(e).map(|(x, d)| if *d == 0.0 { *x } else { x + d }).collect())
        .collect();
    let e = VoltageSeries {
        grid: y.grid,
        channels: perturbation.to_vec(),
        delta: vec![0.0; perturbation.len()],
    };
    let delta = (0..perturbation.len()).map(|c| e.channel_norm(c)).collect();
    VoltageSeries {
        grid: y.grid,
        channels,
        delta,
    }
}
