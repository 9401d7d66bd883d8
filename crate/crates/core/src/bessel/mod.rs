//! Monte Carlo lab for a market driven by a three-dimensional Bessel process
//! `dB = dt / B + dW`, `B_0 = 1`, whose minimal deflator `Z0 = 1 / B` is a
//! strict local martingale.
//!
//! `B` is simulated as the norm of a 3D Brownian motion started at
//! `(1, 0, 0)`, which is exact in distribution at every grid time. Normals
//! are drawn from a ChaCha stream per path with a fixed word offset per
//! `(step, dimension)`, so results do not depend on thread scheduling.

mod stats;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::utility::{UtilityError, UtilitySpec};

pub use stats::{
    expectation_deficit, increment_z_scores, martingale_increment_test, mean_estimate,
    moment_table, z_quantile, DeficitEstimate, IncrementOptions, IncrementRow, MeanEstimate,
    MomentRow, MIN_PATHS_FOR_CI,
};

/// Gaussian dimensions per step: three for the Bessel coordinates, one for
/// the orthogonal Brownian motion.
const DIMS: u64 = 4;
/// 32-bit words reserved per normal draw.
const SLOT_WORDS: u128 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BesselError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("statistics: {0}")]
    Statistics(String),
    #[error("batch is missing {0}")]
    Missing(&'static str),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

pub type Result<T> = std::result::Result<T, BesselError>;

/// Deterministic integrand of the orthogonal Brownian direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PsiSpec {
    #[default]
    Zero,
    Constant { value: f64 },
    /// Piecewise constant: `values[i]` on `[times[i], times[i+1])`.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl PsiSpec {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            PsiSpec::Zero => 0.0,
            PsiSpec::Constant { value } => *value,
            PsiSpec::Tabulated { times, values } => piecewise(times, values, t),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            PsiSpec::Zero => true,
            PsiSpec::Constant { value } => *value == 0.0,
            PsiSpec::Tabulated { values, .. } => values.iter().all(|v| *v == 0.0),
        }
    }
}

/// Deterministic volatility `Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VolModel {
    Constant { value: f64 },
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl Default for VolModel {
    fn default() -> Self {
        VolModel::Constant { value: 1.0 }
    }
}

impl VolModel {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            VolModel::Constant { value } => *value,
            VolModel::Tabulated { times, values } => piecewise(times, values, t),
        }
    }
}

fn piecewise(times: &[f64], values: &[f64], t: f64) -> f64 {
    let i = times.partition_point(|s| *s <= t).saturating_sub(1);
    values[i]
}

fn check_table(name: &str, times: &[f64], values: &[f64]) -> Result<()> {
    if times.is_empty() || times.len() != values.len() {
        return Err(BesselError::Config(format!(
            "{name}: {} times for {} values",
            times.len(),
            values.len()
        )));
    }
    if times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BesselError::Config(format!(
            "{name}: times must start at 0 and increase strictly"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BesselError::Config(format!("{name}: non-finite value")));
    }
    Ok(())
}

fn default_paths() -> usize {
    10_000
}

fn default_record() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub alpha: f64,
    pub x: f64,
    /// CRRA exponent; 0 selects log utility.
    #[serde(default)]
    pub p: f64,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub psi: PsiSpec,
    #[serde(default)]
    pub vol_model: VolModel,
    #[serde(default)]
    pub rho: f64,
    /// Store every `record_every`-th step (and the final one).
    #[serde(default = "default_record")]
    pub record_every: usize,
    /// Dual multiplier for the power scan; defaults to `1 / (alpha x)`.
    #[serde(default)]
    pub y: Option<f64>,
}

impl SdeConfig {
    pub fn new(alpha: f64, x: f64, horizon: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            alpha,
            x,
            p: 0.0,
            horizon,
            dt,
            n_paths,
            seed,
            psi: PsiSpec::Zero,
            vol_model: VolModel::default(),
            rho: 0.0,
            record_every: 1,
            y: None,
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BesselError::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.x > 0.0 && self.x.is_finite()) {
            return bad(format!("x must be positive, got {}", self.x));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return bad(format!("dt must lie in (0, horizon], got {}", self.dt));
        }
        let steps = self.n_steps();
        if (steps as f64 * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return bad(format!(
                "horizon {} is not a multiple of dt {}",
                self.horizon, self.dt
            ));
        }
        if self.n_paths == 0 {
            return bad("n_paths must be at least 1".into());
        }
        if self.record_every == 0 {
            return bad("record_every must be at least 1".into());
        }
        if !(self.p < 1.0 && self.p.is_finite()) {
            return Err(BesselError::Utility(UtilityError::InvalidParameter(format!(
                "CRRA exponent must be < 1, got {}",
                self.p
            ))));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [-1, 1], got {}", self.rho));
        }
        if let Some(y) = self.y {
            if !(y > 0.0 && y.is_finite()) {
                return bad(format!("y must be positive, got {y}"));
            }
        }
        if let PsiSpec::Tabulated { times, values } = &self.psi {
            check_table("psi", times, values)?;
        }
        match &self.vol_model {
            VolModel::Constant { value } if !(*value > 0.0) => {
                return bad(format!("volatility must be positive, got {value}"));
            }
            VolModel::Tabulated { times, values } => {
                check_table("vol_model", times, values)?;
                if values.iter().any(|v| *v <= 0.0) {
                    return bad("volatility must be positive".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn utility(&self) -> Result<UtilitySpec> {
        Ok(UtilitySpec::crra(self.p)?)
    }

    pub fn dual_multiplier(&self) -> f64 {
        self.y.unwrap_or(1.0 / (self.alpha * self.x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogPolicy {
    pub c_hat: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub m_hat: Vec<f64>,
}

/// Paths on a common recorded grid, stored row-major `[path][time]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathBatch {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: &'static str,
    pub b: Vec<f64>,
    /// Orthogonal Brownian motion `W_perp`.
    pub w_perp: Vec<f64>,
    pub z0: Option<Vec<f64>>,
    pub z_psi: Option<Vec<f64>>,
    pub policy: Option<LogPolicy>,
}

pub const SCHEME: &str = "3d-brownian-norm";

/// Named stored processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    B,
    Z0,
    ZPsi,
    CHat,
    XHat,
    MHat,
    XHatZ0,
}

impl std::str::FromStr for Process {
    type Err = BesselError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "b" | "B" => Process::B,
            "z0" | "Z0" => Process::Z0,
            "z_psi" => Process::ZPsi,
            "c_hat" => Process::CHat,
            "x_hat" => Process::XHat,
            "m_hat" => Process::MHat,
            "x_hat_z0" => Process::XHatZ0,
            other => return Err(BesselError::Config(format!("unknown process {other:?}"))),
        })
    }
}

impl PathBatch {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Index of `t` on the recorded grid.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let tol = 1e-9 * self.times.last().copied().unwrap_or(1.0).max(1.0);
        self.times
            .iter()
            .position(|s| (s - t).abs() <= tol)
            .ok_or_else(|| BesselError::Statistics(format!("t = {t} is not on the recorded grid")))
    }

    pub fn values(&self, process: Process) -> Result<std::borrow::Cow<'_, [f64]>> {
        use std::borrow::Cow;
        let policy = || self.policy.as_ref().ok_or(BesselError::Missing("log policy"));
        Ok(match process {
            Process::B => Cow::Borrowed(&self.b),
            Process::Z0 => Cow::Borrowed(self.z0.as_deref().ok_or(BesselError::Missing("Z0"))?),
            Process::ZPsi => {
                Cow::Borrowed(self.z_psi.as_deref().ok_or(BesselError::Missing("Z_psi"))?)
            }
            Process::CHat => Cow::Borrowed(&policy()?.c_hat),
            Process::XHat => Cow::Borrowed(&policy()?.x_hat),
            Process::MHat => Cow::Borrowed(&policy()?.m_hat),
            Process::XHatZ0 => {
                let z0 = self.z0.as_deref().ok_or(BesselError::Missing("Z0"))?;
                Cow::Owned(policy()?.x_hat.iter().zip(z0).map(|(a, b)| a * b).collect())
            }
        })
    }

    /// Values of a process at recorded time index `j`, one per path.
    pub fn column(&self, process: Process, j: usize) -> Result<Vec<f64>> {
        let values = self.values(process)?;
        let n = self.n_times();
        Ok((0..self.n_paths).map(|i| values[i * n + j]).collect())
    }
}

struct PathOut {
    b: Vec<f64>,
    w_perp: Vec<f64>,
    /// `-int psi dW_perp - 1/2 int psi^2 dt` on the recorded grid.
    psi_exponent: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng, step: usize, dim: u64) -> f64 {
    rng.set_word_pos((step as u128 * DIMS as u128 + dim as u128) * SLOT_WORDS);
    rng.sample(StandardNormal)
}

fn simulate_path(config: &SdeConfig, path: usize, recorded: &[usize]) -> PathOut {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(path as u64);
    let dt = config.dt;
    let sd = dt.sqrt();
    let n_rec = recorded.len();
    let mut out = PathOut {
        b: Vec::with_capacity(n_rec),
        w_perp: Vec::with_capacity(n_rec),
        psi_exponent: Vec::with_capacity(n_rec),
    };
    let mut w = [1.0f64, 0.0, 0.0];
    let mut perp = 0.0;
    let mut exponent = 0.0;
    let mut next = 0;
    for step in 0..=config.n_steps() {
        if step > 0 {
            for (d, coord) in w.iter_mut().enumerate() {
                *coord += sd * normal(&mut rng, step - 1, d as u64);
            }
            let dw = sd * normal(&mut rng, step - 1, 3);
            let psi = config.psi.at((step - 1) as f64 * dt);
            perp += dw;
            exponent += -psi * dw - 0.5 * psi * psi * dt;
        }
        if next < n_rec && recorded[next] == step {
            out.b.push((w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt());
            out.w_perp.push(perp);
            out.psi_exponent.push(exponent);
            next += 1;
        }
    }
    out
}

fn recorded_steps(config: &SdeConfig) -> Vec<usize> {
    let n = config.n_steps();
    let mut steps: Vec<usize> = (0..=n).step_by(config.record_every).collect();
    if *steps.last().unwrap() != n {
        steps.push(n);
    }
    steps
}

/// Simulates `B` (and the orthogonal Brownian motion) on the recorded grid.
pub fn simulate_bessel(config: &SdeConfig) -> Result<PathBatch> {
    config.validate()?;
    let steps = recorded_steps(config);
    let times: Vec<f64> = steps.iter().map(|&s| s as f64 * config.dt).collect();
    let paths: Vec<PathOut> = (0..config.n_paths)
        .into_par_iter()
        .map(|i| simulate_path(config, i, &steps))
        .collect();
    let n_rec = steps.len();
    let mut b = Vec::with_capacity(config.n_paths * n_rec);
    let mut w_perp = Vec::with_capacity(config.n_paths * n_rec);
    let mut exponent = Vec::with_capacity(config.n_paths * n_rec);
    for p in paths {
        b.extend(p.b);
        w_perp.extend(p.w_perp);
        exponent.extend(p.psi_exponent);
    }
    let z_psi = (!config.psi.is_zero())
        .then(|| b.iter().zip(&exponent).map(|(bv, e)| e.exp() / bv).collect());
    Ok(PathBatch {
        times,
        n_paths: config.n_paths,
        seed: config.seed,
        scheme: SCHEME,
        b,
        w_perp,
        z0: None,
        z_psi,
        policy: None,
    })
}

/// Fills `Z0 = 1 / B`.
pub fn minimal_deflator(batch: &mut PathBatch) -> &[f64] {
    let z0: Vec<f64> = batch.b.iter().map(|b| 1.0 / b).collect();
    batch.z0 = Some(z0);
    batch.z0.as_deref().unwrap()
}

/// Log-utility optimizers `c = alpha e^{-alpha t} x / Z0`,
/// `X = e^{-alpha t} x / Z0` and `M = X Z0 + int_0^t c Z0 ds`, the integral
/// by the trapezoid rule on the recorded grid.
pub fn log_optimal_policy(config: &SdeConfig, batch: &mut PathBatch) -> Result<()> {
    if config.p != 0.0 {
        return Err(BesselError::Config(format!(
            "log policy requires p = 0, got {}",
            config.p
        )));
    }
    if batch.z0.is_none() {
        minimal_deflator(batch);
    }
    let z0 = batch.z0.as_deref().unwrap();
    let (alpha, x) = (config.alpha, config.x);
    let n = batch.n_times();
    let discount: Vec<f64> = batch.times.iter().map(|t| (-alpha * t).exp()).collect();
    let len = z0.len();
    let mut c_hat = Vec::with_capacity(len);
    let mut x_hat = Vec::with_capacity(len);
    let mut m_hat = Vec::with_capacity(len);
    for path in z0.chunks(n) {
        let mut integral = 0.0;
        let mut prev_rate = 0.0;
        for (j, z) in path.iter().enumerate() {
            let xh = discount[j] * x / z;
            let ch = alpha * discount[j] * x / z;
            let rate = ch * z;
            if j > 0 {
                integral += 0.5 * (prev_rate + rate) * (batch.times[j] - batch.times[j - 1]);
            }
            prev_rate = rate;
            c_hat.push(ch);
            x_hat.push(xh);
            m_hat.push(xh * z + integral);
        }
    }
    batch.policy = Some(LogPolicy { c_hat, x_hat, m_hat });
    Ok(())
}

/// Full pipeline for a config: paths, `Z0`, and the log policy when `p = 0`.
pub fn simulate(config: &SdeConfig) -> Result<PathBatch> {
    let mut batch = simulate_bessel(config)?;
    minimal_deflator(&mut batch);
    if config.p == 0.0 {
        log_optimal_policy(config, &mut batch)?;
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathwiseResiduals {
    /// `max |c - alpha X|`.
    pub consumption: f64,
    /// `max |X Z0 - x e^{-alpha t}|`.
    pub deflated_wealth: f64,
    /// `max |M - x|`.
    pub m_hat: f64,
}

pub fn pathwise_invariant_check(config: &SdeConfig, batch: &PathBatch) -> Result<PathwiseResiduals> {
    let policy = batch.policy.as_ref().ok_or(BesselError::Missing("log policy"))?;
    let z0 = batch.z0.as_deref().ok_or(BesselError::Missing("Z0"))?;
    let n = batch.n_times();
    let mut r = PathwiseResiduals {
        consumption: 0.0,
        deflated_wealth: 0.0,
        m_hat: 0.0,
    };
    for k in 0..z0.len() {
        let t = batch.times[k % n];
        let target = config.x * (-config.alpha * t).exp();
        r.consumption = r.consumption.max((policy.c_hat[k] - config.alpha * policy.x_hat[k]).abs());
        r.deflated_wealth = r.deflated_wealth.max((policy.x_hat[k] * z0[k] - target).abs());
        r.m_hat = r.m_hat.max((policy.m_hat[k] - config.x).abs());
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialRow {
    pub t: f64,
    pub mean: f64,
    pub target: f64,
    pub abs_error: f64,
}

/// `E[X_t Z0_t]` against `x e^{-alpha t}` at the requested grid times.
pub fn potential_decay(config: &SdeConfig, batch: &PathBatch, times: &[f64]) -> Result<Vec<PotentialRow>> {
    times
        .iter()
        .map(|&t| {
            let j = batch.time_index(t)?;
            let col = batch.column(Process::XHatZ0, j)?;
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let target = config.x * (-config.alpha * batch.times[j]).exp();
            Ok(PotentialRow {
                t: batch.times[j],
                mean,
                target,
                abs_error: (mean - target).abs(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetSaturation {
    /// Monte Carlo mean of the truncated `int_0^T c Z0 dt`.
    pub truncated: f64,
    /// `x (1 - e^{-alpha T})`.
    pub truncated_target: f64,
    /// Closed-form tail `x e^{-alpha T}`.
    pub tail: f64,
    pub total: f64,
}

pub fn budget_saturation(config: &SdeConfig, batch: &PathBatch) -> Result<BudgetSaturation> {
    let policy = batch.policy.as_ref().ok_or(BesselError::Missing("log policy"))?;
    let z0 = batch.z0.as_deref().ok_or(BesselError::Missing("Z0"))?;
    let n = batch.n_times();
    let mut sum = 0.0;
    for i in 0..batch.n_paths {
        let mut integral = 0.0;
        for j in 1..n {
            let (a, b) = (i * n + j - 1, i * n + j);
            integral += 0.5
                * (policy.c_hat[a] * z0[a] + policy.c_hat[b] * z0[b])
                * (batch.times[j] - batch.times[j - 1]);
        }
        sum += integral;
    }
    let horizon = *batch.times.last().unwrap();
    let truncated = sum / batch.n_paths as f64;
    let tail = config.x * (-config.alpha * horizon).exp();
    Ok(BudgetSaturation {
        truncated,
        truncated_target: config.x - tail,
        tail,
        total: truncated + tail,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualScanRow {
    pub psi: f64,
    pub estimate: MeanEstimate,
    /// Paired difference against `psi = 0` on the same paths.
    pub excess_over_zero: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualScan {
    pub y: f64,
    pub rows: Vec<DualScanRow>,
    pub argmin_psi: f64,
    /// No `psi` beats `psi = 0` significantly.
    pub zero_is_minimal: bool,
}

/// `E[int_0^T e^{-alpha t} V(y Z_psi e^{alpha t}) dt]` for constant `psi`
/// on common paths, with `Z_psi = Z0 exp(-psi W_perp - psi^2 t / 2)`.
pub fn power_dual_scan(config: &SdeConfig, psi_grid: &[f64], level: f64) -> Result<DualScan> {
    let spec = config.utility()?;
    if psi_grid.is_empty() {
        return Err(BesselError::Config("psi grid is empty".into()));
    }
    let mut batch = simulate_bessel(config)?;
    minimal_deflator(&mut batch);
    let z0 = batch.z0.as_deref().unwrap();
    let n = batch.n_times();
    let y = config.dual_multiplier();
    let alpha = config.alpha;
    let per_path = |psi: f64| -> Result<Vec<f64>> {
        (0..batch.n_paths)
            .into_par_iter()
            .map(|i| {
                let mut integral = 0.0;
                let mut prev = 0.0;
                for j in 0..n {
                    let t = batch.times[j];
                    let k = i * n + j;
                    let z = z0[k] * (-psi * batch.w_perp[k] - 0.5 * psi * psi * t).exp();
                    let f = (-alpha * t).exp() * spec.conjugate(y * z * (alpha * t).exp())?;
                    if j > 0 {
                        integral += 0.5 * (prev + f) * (t - batch.times[j - 1]);
                    }
                    prev = f;
                }
                Ok(integral)
            })
            .collect()
    };
    let base = per_path(0.0)?;
    let mut rows = Vec::with_capacity(psi_grid.len());
    for &psi in psi_grid {
        let values = if psi == 0.0 { base.clone() } else { per_path(psi)? };
        let diff: Vec<f64> = values.iter().zip(&base).map(|(a, b)| a - b).collect();
        rows.push(DualScanRow {
            psi,
            estimate: mean_estimate(&values, level)?,
            excess_over_zero: mean_estimate(&diff, level)?,
        });
    }
    let argmin_psi = rows
        .iter()
        .min_by(|a, b| a.estimate.mean.total_cmp(&b.estimate.mean))
        .map(|r| r.psi)
        .unwrap();
    let zero_is_minimal = rows.iter().all(|r| r.excess_over_zero.ci_hi >= 0.0);
    Ok(DualScan {
        y,
        rows,
        argmin_psi,
        zero_is_minimal,
    })
}
