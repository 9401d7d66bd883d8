//! Normal-approximation confidence intervals and martingale increment tests.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{BesselError, PathBatch, Process, Result};

/// Fewer samples than this make the normal approximation meaningless.
pub const MIN_PATHS_FOR_CI: usize = 30;

/// Two-sided standard normal quantile for confidence `level`.
pub fn z_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + 0.5 * level)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
    pub level: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl MeanEstimate {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_hi - self.ci_lo)
    }
}

/// Sample mean with a normal-approximation interval; sums run in index
/// order so results are reproducible.
pub fn mean_estimate(values: &[f64], level: f64) -> Result<MeanEstimate> {
    let n = values.len();
    if n < MIN_PATHS_FOR_CI {
        return Err(BesselError::Statistics(format!(
            "{n} samples are too few for a confidence interval (need {MIN_PATHS_FOR_CI})"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(BesselError::Statistics(format!("confidence level {level} outside (0, 1)")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std_err = (var / n as f64).sqrt();
    let h = z_quantile(level) * std_err;
    Ok(MeanEstimate {
        n,
        mean,
        std_err,
        level,
        ci_lo: mean - h,
        ci_hi: mean + h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeficitEstimate {
    pub t: f64,
    pub estimate: MeanEstimate,
    /// `1 - E[Z0_t]`.
    pub deficit: f64,
    /// Upper confidence bound below 1.
    pub strict: bool,
}

pub fn expectation_deficit(batch: &PathBatch, t: f64, level: f64) -> Result<DeficitEstimate> {
    let j = batch.time_index(t)?;
    let estimate = mean_estimate(&batch.column(Process::Z0, j)?, level)?;
    Ok(DeficitEstimate {
        t: batch.times[j],
        deficit: 1.0 - estimate.mean,
        strict: estimate.ci_hi < 1.0,
        estimate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub t: f64,
    pub estimate: MeanEstimate,
}

/// `E[process_t^power]` at every recorded time.
pub fn moment_table(batch: &PathBatch, process: Process, power: i32, level: f64) -> Result<Vec<MomentRow>> {
    (0..batch.n_times())
        .map(|j| {
            let col: Vec<f64> = batch.column(process, j)?.iter().map(|v| v.powi(power)).collect();
            Ok(MomentRow {
                t: batch.times[j],
                estimate: mean_estimate(&col, level)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IncrementOptions {
    /// Quantile bins of the conditioning variable.
    pub bins: usize,
    /// Standard errors below `resolution` times the mean absolute level of
    /// the process are floored there; increments at that scale are
    /// numerically zero.
    pub resolution: f64,
}

impl Default for IncrementOptions {
    fn default() -> Self {
        Self {
            bins: 5,
            resolution: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncrementRow {
    pub t_from: f64,
    pub t_to: f64,
    pub mean: f64,
    pub z: f64,
    /// z-scores within quantile bins of the conditioning variable.
    pub bin_z: Vec<f64>,
    pub max_abs_z: f64,
}

fn z_score(values: &[f64], floor: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let se = (var / n).sqrt().max(floor);
    if mean == 0.0 {
        0.0
    } else if se == 0.0 {
        mean.signum() * f64::INFINITY
    } else {
        mean / se
    }
}

/// z-scores of `next - prev`, overall and within quantile bins of
/// `conditioning` (a proxy for the conditional expectation at the earlier
/// time).
pub fn increment_z_scores(
    prev: &[f64],
    next: &[f64],
    conditioning: &[f64],
    options: IncrementOptions,
) -> Result<(f64, f64, Vec<f64>)> {
    let n = prev.len();
    if next.len() != n || conditioning.len() != n {
        return Err(BesselError::Statistics("increment arrays differ in length".into()));
    }
    if n < MIN_PATHS_FOR_CI {
        return Err(BesselError::Statistics(format!(
            "{n} samples are too few for an increment test (need {MIN_PATHS_FOR_CI})"
        )));
    }
    let level = prev.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let floor = options.resolution * level;
    let inc: Vec<f64> = next.iter().zip(prev).map(|(a, b)| a - b).collect();
    let mean = inc.iter().sum::<f64>() / n as f64;
    let z = z_score(&inc, floor);
    let mut bin_z = Vec::new();
    if options.bins >= 2 && n >= 2 * options.bins {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| conditioning[a].total_cmp(&conditioning[b]).then(a.cmp(&b)));
        for k in 0..options.bins {
            let (lo, hi) = (k * n / options.bins, (k + 1) * n / options.bins);
            let chunk: Vec<f64> = order[lo..hi].iter().map(|&i| inc[i]).collect();
            bin_z.push(z_score(&chunk, floor));
        }
    }
    Ok((mean, z, bin_z))
}

/// Increment test between each requested time and the previous recorded
/// time, binned on `B` at the earlier time.
pub fn martingale_increment_test(
    batch: &PathBatch,
    process: Process,
    times: &[f64],
    options: IncrementOptions,
) -> Result<Vec<IncrementRow>> {
    times
        .iter()
        .map(|&t| {
            let j = batch.time_index(t)?;
            if j == 0 {
                return Err(BesselError::Statistics("no increment ends at t = 0".into()));
            }
            let prev = batch.column(process, j - 1)?;
            let next = batch.column(process, j)?;
            let cond = batch.column(Process::B, j - 1)?;
            let (mean, z, bin_z) = increment_z_scores(&prev, &next, &cond, options)?;
            let max_abs_z = bin_z.iter().fold(z.abs(), |m, v| m.max(v.abs()));
            Ok(IncrementRow {
                t_from: batch.times[j - 1],
                t_to: batch.times[j],
                mean,
                z,
                bin_z,
                max_abs_z,
            })
        })
        .collect()
}
