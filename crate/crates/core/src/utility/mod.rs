//! Utility functions, their convex conjugates and the diagnostics (Inada,
//! asymptotic elasticity) that decide whether a consumption problem is
//! well posed.
//!
//! Three kinds are supported: `log`, CRRA `power(p)` with `p < 1, p != 0`,
//! and a custom tabulated utility read from a two-column `(x, U(x))` table.
//! Closed forms are used wherever they exist; the tabulated kind is backed
//! by a monotone cubic interpolant and a numeric conjugate.

mod pchip;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use pchip::Pchip;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("{what} must be positive and at least {floor:e}, got {value}")]
    Domain {
        what: &'static str,
        value: f64,
        floor: f64,
    },
    #[error("invalid utility parameter: {0}")]
    InvalidParameter(String),
    #[error("conjugate diverges at y = {y}: the supremum of U(x) - xy is not attained inside the table")]
    UnboundedConjugate { y: f64 },
    #[error("utility table: {0}")]
    Table(String),
}

pub type Result<T> = std::result::Result<T, UtilityError>;

/// Tabulated utility: monotone cubic interpolant through `(x, U(x))` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedUtility {
    interp: Pchip,
}

impl TabulatedUtility {
    pub fn new(xs: Vec<f64>, us: Vec<f64>) -> Result<Self> {
        if xs.len() != us.len() {
            return Err(UtilityError::Table(format!(
                "{} x values but {} utility values",
                xs.len(),
                us.len()
            )));
        }
        if xs.len() < 3 {
            return Err(UtilityError::Table("need at least 3 rows".into()));
        }
        if xs.iter().chain(&us).any(|v| !v.is_finite()) {
            return Err(UtilityError::Table("non-finite entry".into()));
        }
        if xs[0] <= 0.0 {
            return Err(UtilityError::Table(format!(
                "abscissae must be positive, first is {}",
                xs[0]
            )));
        }
        for (i, w) in xs.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(UtilityError::Table(format!(
                    "x must be strictly ascending (row {})",
                    i + 2
                )));
            }
        }
        for (i, w) in us.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(UtilityError::Table(format!(
                    "U must be strictly increasing (row {})",
                    i + 2
                )));
            }
        }
        Ok(Self {
            interp: Pchip::new(xs, us),
        })
    }

    /// Parses whitespace- or comma-separated `x U(x)` rows; `#` starts a
    /// comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut xs = Vec::new();
        let mut us = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if fields.len() != 2 {
                return Err(UtilityError::Table(format!(
                    "line {}: expected 2 columns, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| {
                    UtilityError::Table(format!("line {}: {s:?}: {e}", lineno + 1))
                })
            };
            xs.push(parse(fields[0])?);
            us.push(parse(fields[1])?);
        }
        Self::new(xs, us)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| UtilityError::Table(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn x_min(&self) -> f64 {
        self.interp.x_min()
    }

    pub fn x_max(&self) -> f64 {
        self.interp.x_max()
    }

    fn check(&self, x: f64) -> Result<()> {
        if !(x >= self.x_min() && x <= self.x_max()) {
            return Err(UtilityError::Domain {
                what: "tabulated utility argument",
                value: x,
                floor: self.x_min(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UtilityKind {
    Log,
    Power { p: f64 },
    Tabulated(Arc<TabulatedUtility>),
}

/// A utility function together with the smallest argument it accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec {
    kind: UtilityKind,
    domain_floor: f64,
}

/// Serializable description used by config files and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "utility", rename_all = "lowercase")]
pub enum ClosedFormUtility {
    Log,
    Power { p: f64 },
}

impl fmt::Display for UtilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            UtilityKind::Log => write!(f, "log"),
            UtilityKind::Power { p } => write!(f, "power(p={p})"),
            UtilityKind::Tabulated(t) => {
                write!(f, "tabulated[{:e}, {:e}]", t.x_min(), t.x_max())
            }
        }
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

impl UtilitySpec {
    pub fn log() -> Self {
        Self {
            kind: UtilityKind::Log,
            domain_floor: f64::MIN_POSITIVE,
        }
    }

    pub fn power(p: f64) -> Result<Self> {
        if !p.is_finite() || p >= 1.0 || p == 0.0 {
            return Err(UtilityError::InvalidParameter(format!(
                "CRRA exponent must satisfy p < 1 and p != 0, got {p}"
            )));
        }
        Ok(Self {
            kind: UtilityKind::Power { p },
            domain_floor: f64::MIN_POSITIVE,
        })
    }

    /// `p == 0` selects the logarithmic limit of the CRRA family.
    pub fn crra(p: f64) -> Result<Self> {
        if p == 0.0 {
            Ok(Self::log())
        } else {
            Self::power(p)
        }
    }

    pub fn tabulated(table: TabulatedUtility) -> Self {
        let floor = table.x_min();
        Self {
            kind: UtilityKind::Tabulated(Arc::new(table)),
            domain_floor: floor,
        }
    }

    pub fn from_closed_form(c: ClosedFormUtility) -> Result<Self> {
        match c {
            ClosedFormUtility::Log => Ok(Self::log()),
            ClosedFormUtility::Power { p } => Self::power(p),
        }
    }

    pub fn kind(&self) -> &UtilityKind {
        &self.kind
    }

    pub fn domain_floor(&self) -> f64 {
        self.domain_floor
    }

    pub fn with_domain_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(UtilityError::InvalidParameter(format!(
                "domain floor must be positive, got {floor}"
            )));
        }
        if let UtilityKind::Tabulated(t) = &self.kind {
            self.domain_floor = floor.max(t.x_min());
        } else {
            self.domain_floor = floor;
        }
        Ok(self)
    }

    /// CRRA exponent; `Some(0.0)` for log, `None` for tabulated kinds.
    pub fn exponent(&self) -> Option<f64> {
        match self.kind {
            UtilityKind::Log => Some(0.0),
            UtilityKind::Power { p } => Some(p),
            UtilityKind::Tabulated(_) => None,
        }
    }

    /// Conjugate exponent q with `1 - q = 1 / (1 - p)`.
    pub fn conjugate_exponent(&self) -> Option<f64> {
        self.exponent().map(|p| p / (p - 1.0))
    }

    pub fn is_closed_form(&self) -> bool {
        !matches!(self.kind, UtilityKind::Tabulated(_))
    }

    /// U(0+): `-inf` for log and negative powers, `0` for positive powers.
    pub fn value_at_zero(&self) -> f64 {
        match &self.kind {
            UtilityKind::Log => f64::NEG_INFINITY,
            UtilityKind::Power { p } if *p < 0.0 => f64::NEG_INFINITY,
            UtilityKind::Power { .. } => 0.0,
            UtilityKind::Tabulated(_) => f64::NAN,
        }
    }

    fn check_arg(&self, what: &'static str, v: f64) -> Result<()> {
        if v.is_nan() || v < self.domain_floor || v <= 0.0 || v == f64::INFINITY {
            return Err(UtilityError::Domain {
                what,
                value: v,
                floor: self.domain_floor,
            });
        }
        Ok(())
    }

    fn check_dual_arg(&self, y: f64) -> Result<()> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(UtilityError::Domain {
                what: "dual argument y",
                value: y,
                floor: f64::MIN_POSITIVE,
            });
        }
        Ok(())
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        self.check_arg("utility argument x", x)?;
        Ok(match &self.kind {
            UtilityKind::Log => x.ln(),
            UtilityKind::Power { p } => x.powf(*p) / p,
            UtilityKind::Tabulated(t) => {
                t.check(x)?;
                t.interp.eval_all(x).0
            }
        })
    }

    /// U'(x).
    pub fn marginal(&self, x: f64) -> Result<f64> {
        self.check_arg("utility argument x", x)?;
        Ok(match &self.kind {
            UtilityKind::Log => 1.0 / x,
            UtilityKind::Power { p } => x.powf(p - 1.0),
            UtilityKind::Tabulated(t) => {
                t.check(x)?;
                t.interp.eval_all(x).1
            }
        })
    }

    /// U''(x).
    pub fn curvature(&self, x: f64) -> Result<f64> {
        self.check_arg("utility argument x", x)?;
        Ok(match &self.kind {
            UtilityKind::Log => -1.0 / (x * x),
            UtilityKind::Power { p } => (p - 1.0) * x.powf(p - 2.0),
            UtilityKind::Tabulated(t) => {
                t.check(x)?;
                t.interp.eval_all(x).2
            }
        })
    }

    /// I = (U')^{-1}.
    pub fn inverse_marginal(&self, y: f64) -> Result<f64> {
        self.check_dual_arg(y)?;
        match &self.kind {
            UtilityKind::Log => Ok(1.0 / y),
            UtilityKind::Power { p } => Ok(y.powf(1.0 / (p - 1.0))),
            UtilityKind::Tabulated(t) => {
                let (lo, hi) = self.first_order_bracket(t, y)?;
                Ok(bisect_log(lo, hi, |x| t.interp.eval_all(x).1 - y))
            }
        }
    }

    /// V(y) = sup_{x>0} [U(x) - xy].
    pub fn conjugate(&self, y: f64) -> Result<f64> {
        self.check_dual_arg(y)?;
        match &self.kind {
            UtilityKind::Log => Ok(-y.ln() - 1.0),
            UtilityKind::Power { p } => {
                let q = p / (p - 1.0);
                Ok(-y.powf(q) / q)
            }
            UtilityKind::Tabulated(t) => {
                let (lo, hi) = self.first_order_bracket(t, y)?;
                let objective = |s: f64| {
                    let x = s.exp();
                    t.interp.eval_all(x).0 - x * y
                };
                let s_star = golden_max(lo.ln(), hi.ln(), 1e-12, objective);
                let x_star = s_star.exp().clamp(t.x_min(), t.x_max());
                Ok(t.interp.eval_all(x_star).0 - x_star * y)
            }
        }
    }

    /// V'(y) = -I(y).
    pub fn conjugate_derivative(&self, y: f64) -> Result<f64> {
        Ok(-self.inverse_marginal(y)?)
    }

    /// V''(y) = -1 / U''(I(y)).
    pub fn conjugate_curvature(&self, y: f64) -> Result<f64> {
        self.check_dual_arg(y)?;
        match &self.kind {
            UtilityKind::Log => Ok(1.0 / (y * y)),
            UtilityKind::Power { p } => {
                let q = p / (p - 1.0);
                Ok(-(q - 1.0) * y.powf(q - 2.0))
            }
            UtilityKind::Tabulated(_) => {
                let x = self.inverse_marginal(y)?;
                let u2 = self.curvature(x)?;
                if u2 < 0.0 {
                    Ok(-1.0 / u2)
                } else {
                    // flat or convex piece of the interpolant: fall back to a
                    // difference quotient of I
                    let h = 1e-6 * y;
                    let i_plus = self.inverse_marginal(y + h)?;
                    let i_minus = self.inverse_marginal(y - h)?;
                    Ok(((i_minus - i_plus) / (2.0 * h)).max(0.0))
                }
            }
        }
    }

    /// V(y) - U(x) + xy, nonnegative with equality iff y = U'(x).
    pub fn fenchel_gap(&self, x: f64, y: f64) -> Result<f64> {
        Ok(self.conjugate(y)? - self.value(x)? + x * y)
    }

    /// Brackets the root of U'(x) = y inside the table, expanding in log-x
    /// from x = 1 until the first-order condition changes sign.
    fn first_order_bracket(&self, t: &TabulatedUtility, y: f64) -> Result<(f64, f64)> {
        let (xmin, xmax) = (t.x_min(), t.x_max());
        let foc = |x: f64| t.interp.eval_all(x).1 - y;
        let mut x = 1.0f64.clamp(xmin, xmax);
        if foc(x) > 0.0 {
            loop {
                let next = (x * 2.0).min(xmax);
                if foc(next) <= 0.0 {
                    return Ok((x, next));
                }
                if next >= xmax {
                    return Err(UtilityError::UnboundedConjugate { y });
                }
                x = next;
            }
        } else {
            loop {
                let next = (x * 0.5).max(xmin);
                if foc(next) >= 0.0 {
                    return Ok((next, x));
                }
                if next <= xmin {
                    return Err(UtilityError::Domain {
                        what: "conjugate maximizer (below tabulated range) for y",
                        value: y,
                        floor: xmin,
                    });
                }
                x = next;
            }
        }
    }

    /// Estimates limsup x U'(x) / U(x) from the top of an ascending grid.
    pub fn asymptotic_elasticity(&self, x_grid: &[f64]) -> Result<ElasticityEstimate> {
        if x_grid.len() < 3 {
            return Err(UtilityError::InvalidParameter(
                "elasticity grid needs at least 3 points".into(),
            ));
        }
        if x_grid.windows(2).any(|w| w[1] <= w[0]) || x_grid[0] <= 0.0 {
            return Err(UtilityError::InvalidParameter(
                "elasticity grid must be positive and strictly ascending".into(),
            ));
        }
        let top = x_grid[x_grid.len() - 1];
        if top < 1e3 {
            return Err(UtilityError::InvalidParameter(format!(
                "elasticity grid must reach 1e3, tops out at {top}"
            )));
        }
        let tail_start = x_grid.len() - (x_grid.len() / 10).max(3);
        let mut tail = Vec::new();
        for &x in &x_grid[tail_start..] {
            let u = self.value(x)?;
            let ratio = if u > 0.0 {
                Some(x * self.marginal(x)? / u)
            } else {
                None
            };
            tail.push((x, ratio));
        }
        let last_positive = tail.iter().rev().find_map(|(_, r)| *r);
        Ok(match last_positive {
            Some(e) => ElasticityEstimate {
                elasticity: e,
                satisfied: e < 1.0,
                note: None,
                tail,
            },
            None => ElasticityEstimate {
                elasticity: 0.0,
                satisfied: true,
                note: Some("U(x) <= 0 on the whole tail; elasticity reported as 0".into()),
                tail,
            },
        })
    }

    pub fn check_inada(&self, eps: f64, big: f64, thresholds: InadaThresholds) -> Result<InadaReport> {
        if !(eps > 0.0 && eps < 1.0 && big > 1.0) {
            return Err(UtilityError::InvalidParameter(format!(
                "need 0 < eps < 1 < big, got eps={eps}, big={big}"
            )));
        }
        let low = self.marginal(eps)?;
        let high = self.marginal(big)?;
        let passes_low = low > thresholds.min_marginal_near_zero;
        let passes_high = high < thresholds.max_marginal_at_infinity;
        Ok(InadaReport {
            eps,
            big,
            marginal_at_eps: low,
            marginal_at_big: high,
            passes_low,
            passes_high,
            passes: passes_low && passes_high,
        })
    }

    /// Finite-difference shape check on a grid: strictly increasing,
    /// strictly concave, strictly decreasing marginal.
    pub fn shape_check(&self, x_grid: &[f64]) -> Result<ShapeReport> {
        let us = x_grid
            .iter()
            .map(|&x| self.value(x))
            .collect::<Result<Vec<_>>>()?;
        let mps = x_grid
            .iter()
            .map(|&x| self.marginal(x))
            .collect::<Result<Vec<_>>>()?;
        let increasing = us.windows(2).all(|w| w[1] > w[0]);
        let concave = x_grid.windows(3).zip(us.windows(3)).all(|(x, u)| {
            let s1 = (u[1] - u[0]) / (x[1] - x[0]);
            let s2 = (u[2] - u[1]) / (x[2] - x[1]);
            s2 < s1
        });
        let marginal_decreasing = mps.windows(2).all(|w| w[1] < w[0]);
        Ok(ShapeReport {
            increasing,
            concave,
            marginal_decreasing,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElasticityEstimate {
    pub elasticity: f64,
    pub satisfied: bool,
    pub note: Option<String>,
    /// `(x, x U'(x)/U(x))` on the tail, `None` where `U(x) <= 0`.
    pub tail: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InadaThresholds {
    pub min_marginal_near_zero: f64,
    pub max_marginal_at_infinity: f64,
}

impl Default for InadaThresholds {
    fn default() -> Self {
        Self {
            min_marginal_near_zero: 10.0,
            max_marginal_at_infinity: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InadaReport {
    pub eps: f64,
    pub big: f64,
    pub marginal_at_eps: f64,
    pub marginal_at_big: f64,
    pub passes_low: bool,
    pub passes_high: bool,
    pub passes: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ShapeReport {
    pub increasing: bool,
    pub concave: bool,
    pub marginal_decreasing: bool,
}

/// Root of a decreasing function on `[lo, hi]`, bisecting in log-space.
fn bisect_log(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if f(m.exp()) > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    (0.5 * (a + b)).exp()
}

/// Golden-section search for the maximum of a unimodal function.
pub(crate) fn golden_max(mut a: f64, mut b: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol * (1.0 + a.abs().max(b.abs())) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}
