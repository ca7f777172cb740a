//! One-dimensional exponential-family messages in natural parameters.
//!
//! Three families cover the factor graphs in this crate. Conventions, with
//! `u(x)` the sufficient statistic vector and `η` the natural parameters:
//!
//! * Gaussian on ℝ: `u(x) = (x, x²)`, `η = (m/v, -1/(2v))` for mean `m`,
//!   variance `v`. Proper iff `η₂ < 0`.
//! * Beta on (0,1): `u(x) = (ln x, ln(1-x))`, `η = (α-1, β-1)`. Proper iff
//!   `α, β > 0`.
//! * Gamma on (0,∞), shape–rate: `u(x) = (ln x, x)`, `η = (k-1, -r)`.
//!   Proper iff `k, r > 0`.
//!
//! EP products and quotients are sums and differences of natural parameters,
//! so improper messages (e.g. a Gaussian with non-positive precision) arise
//! routinely as factor→variable quotients. They are representable and
//! flagged via [`ExpFamMessage::is_proper`]; operations that need a
//! normalizable density reject them instead of silently producing NaNs.
//!
//! Moment projection ([`project_from_suffstats`]) inverts the mean map
//! `η ↦ E[u(x)]`: closed form for the Gaussian, a safeguarded 1-D Newton
//! solve for the Gamma, and a damped 2-D Newton solve on the (convex) dual
//! objective for the Beta.

use crate::numeric::trigamma;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::{digamma, ln_gamma};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Variance floor applied when projecting moments onto a Gaussian. Keeps
/// quotients by near-degenerate cavities finite without masking genuinely
/// broken statistics (those are rejected before flooring).
pub const GAUSSIAN_VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ExpFamError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("parameters do not define a proper {family} distribution")]
    ImproperParameters { family: Family },
    #[error("operation requires a proper message, got an improper {family}")]
    ImproperInput { family: Family },
    #[error("family mismatch: {left} vs {right}")]
    FamilyMismatch { left: Family, right: Family },
    #[error("sufficient statistics are not the moments of any proper {family}")]
    DegenerateStats { family: Family },
    #[error("moment-matching solve failed to converge for {family}")]
    NoConvergence { family: Family },
    #[error("point {x} is outside the support of {family}")]
    OutOfSupport { family: Family, x: f64 },
    #[error("cannot parse message text {0:?}")]
    ParseError(String),
}

pub type Result<T> = std::result::Result<T, ExpFamError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    Beta,
    Gamma,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Beta => "beta",
            Family::Gamma => "gamma",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Expected sufficient statistics `E[u(x)]` for one family; the regression
/// targets and projection inputs throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    pub family: Family,
    pub values: [f64; 2],
}

impl SuffStats {
    pub fn new(family: Family, values: [f64; 2]) -> Self {
        SuffStats { family, values }
    }

    /// Whether the statistics lie in the (open) moment space of the family,
    /// i.e. whether some proper member attains them. Predicted statistics
    /// from a regression can land outside; callers treat that as a signal to
    /// fall back to the oracle.
    pub fn is_feasible(&self) -> bool {
        let [s1, s2] = self.values;
        if !s1.is_finite() || !s2.is_finite() {
            return false;
        }
        match self.family {
            Family::Gaussian => s2 - s1 * s1 > 0.0,
            // E[ln x] < 0, E[ln(1-x)] < 0 and, by Jensen on both ends,
            // exp(E ln x) + exp(E ln(1-x)) < 1.
            Family::Beta => s1 < 0.0 && s2 < 0.0 && s1.exp() + s2.exp() < 1.0,
            // E[x] > 0 and E[ln x] < ln E[x].
            Family::Gamma => s2 > 0.0 && s1 < s2.ln(),
        }
    }
}

/// A 1-D exponential-family message in natural parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFamMessage {
    family: Family,
    natural: [f64; 2],
}

impl ExpFamMessage {
    // ---- constructors -----------------------------------------------------

    /// Message from natural parameters; improper values are representable.
    pub fn from_natural(family: Family, natural: [f64; 2]) -> Result<Self> {
        if !natural[0].is_finite() || !natural[1].is_finite() {
            return Err(ExpFamError::NonFiniteInput("natural parameters"));
        }
        Ok(ExpFamMessage { family, natural })
    }

    /// Gaussian from mean and variance. Requires `variance > 0`.
    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() {
            return Err(ExpFamError::NonFiniteInput("gaussian moments"));
        }
        if variance <= 0.0 {
            return Err(ExpFamError::ImproperParameters { family: Family::Gaussian });
        }
        Ok(ExpFamMessage {
            family: Family::Gaussian,
            natural: [mean / variance, -0.5 / variance],
        })
    }

    /// Beta from shape parameters. Requires `alpha, beta > 0`.
    pub fn beta(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(ExpFamError::NonFiniteInput("beta shapes"));
        }
        if alpha <= 0.0 || beta <= 0.0 {
            return Err(ExpFamError::ImproperParameters { family: Family::Beta });
        }
        Ok(ExpFamMessage { family: Family::Beta, natural: [alpha - 1.0, beta - 1.0] })
    }

    /// Gamma from shape and rate. Requires `shape, rate > 0`.
    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !shape.is_finite() || !rate.is_finite() {
            return Err(ExpFamError::NonFiniteInput("gamma shape/rate"));
        }
        if shape <= 0.0 || rate <= 0.0 {
            return Err(ExpFamError::ImproperParameters { family: Family::Gamma });
        }
        Ok(ExpFamMessage { family: Family::Gamma, natural: [shape - 1.0, -rate] })
    }

    /// The multiplicative identity: natural parameters `(0, 0)`. For the
    /// Gaussian and Gamma this is improper; for the Beta it coincides with
    /// the proper `Beta(1, 1)`.
    pub fn uniform(family: Family) -> Self {
        ExpFamMessage { family, natural: [0.0, 0.0] }
    }

    // ---- accessors ----------------------------------------------------------

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn natural(&self) -> [f64; 2] {
        self.natural
    }

    pub fn is_uniform(&self) -> bool {
        self.natural == [0.0, 0.0]
    }

    pub fn is_proper(&self) -> bool {
        let [n1, n2] = self.natural;
        match self.family {
            Family::Gaussian => n2 < 0.0,
            Family::Beta => n1 > -1.0 && n2 > -1.0,
            Family::Gamma => n1 > -1.0 && n2 < 0.0,
        }
    }

    /// Family-specific parameter pair: `(mean, variance)` for the Gaussian,
    /// `(α, β)` for the Beta, `(shape, rate)` for the Gamma.
    pub fn to_moments(&self) -> Result<[f64; 2]> {
        if !self.is_proper() {
            return Err(ExpFamError::ImproperInput { family: self.family });
        }
        let [n1, n2] = self.natural;
        Ok(match self.family {
            Family::Gaussian => {
                let precision = -2.0 * n2;
                [n1 / precision, 1.0 / precision]
            }
            Family::Beta => [n1 + 1.0, n2 + 1.0],
            Family::Gamma => [n1 + 1.0, -n2],
        })
    }

    /// Distribution mean and variance (regardless of the parameter pair
    /// returned by [`to_moments`](Self::to_moments)).
    pub fn mean_variance(&self) -> Result<(f64, f64)> {
        let m = self.to_moments()?;
        Ok(match self.family {
            Family::Gaussian => (m[0], m[1]),
            Family::Beta => {
                let (a, b) = (m[0], m[1]);
                let s = a + b;
                (a / s, a * b / (s * s * (s + 1.0)))
            }
            Family::Gamma => {
                let (k, r) = (m[0], m[1]);
                (k / r, k / (r * r))
            }
        })
    }

    /// Expected sufficient statistics `E[u(x)]` of a proper message.
    pub fn to_suffstats(&self) -> Result<SuffStats> {
        let m = self.to_moments()?;
        let values = match self.family {
            Family::Gaussian => [m[0], m[1] + m[0] * m[0]],
            Family::Beta => {
                let d = digamma(m[0] + m[1]);
                [digamma(m[0]) - d, digamma(m[1]) - d]
            }
            Family::Gamma => [digamma(m[0]) - m[1].ln(), m[0] / m[1]],
        };
        Ok(SuffStats { family: self.family, values })
    }

    // ---- density, sampling, divergence ------------------------------------

    /// Normalized log density at `x`. Requires a proper message; points
    /// outside the support are an error, support boundaries return the
    /// density limit (possibly ±∞).
    pub fn log_pdf(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(ExpFamError::NonFiniteInput("log_pdf point"));
        }
        if !self.is_proper() {
            return Err(ExpFamError::ImproperInput { family: self.family });
        }
        let m = self.to_moments()?;
        match self.family {
            Family::Gaussian => {
                let (mean, var) = (m[0], m[1]);
                let d = x - mean;
                Ok(-0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * d * d / var)
            }
            Family::Beta => {
                let (a, b) = (m[0], m[1]);
                if !(0.0..=1.0).contains(&x) {
                    return Err(ExpFamError::OutOfSupport { family: self.family, x });
                }
                Ok(boundary_pow_log(x, a - 1.0) + boundary_pow_log(1.0 - x, b - 1.0) - ln_beta(a, b))
            }
            Family::Gamma => {
                let (k, r) = (m[0], m[1]);
                if x < 0.0 {
                    return Err(ExpFamError::OutOfSupport { family: self.family, x });
                }
                Ok(k * r.ln() - ln_gamma(k) + boundary_pow_log(x, k - 1.0) - r * x)
            }
        }
    }

    /// Draws `n` independent samples. Requires a proper message.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<f64>> {
        if !self.is_proper() {
            return Err(ExpFamError::ImproperInput { family: self.family });
        }
        let m = self.to_moments()?;
        let out = match self.family {
            Family::Gaussian => {
                let d = rand_distr::Normal::new(m[0], m[1].sqrt())
                    .map_err(|_| ExpFamError::ImproperParameters { family: self.family })?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Family::Beta => {
                let d = rand_distr::Beta::new(m[0], m[1])
                    .map_err(|_| ExpFamError::ImproperParameters { family: self.family })?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Family::Gamma => {
                let d = rand_distr::Gamma::new(m[0], 1.0 / m[1])
                    .map_err(|_| ExpFamError::ImproperParameters { family: self.family })?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        Ok(out)
    }

    /// `KL(self ‖ other)` in nats, closed form, same family and both proper.
    pub fn kl_divergence(&self, other: &ExpFamMessage) -> Result<f64> {
        if self.family != other.family {
            return Err(ExpFamError::FamilyMismatch { left: self.family, right: other.family });
        }
        let p = self.to_moments()?;
        let q = other.to_moments()?;
        Ok(match self.family {
            Family::Gaussian => {
                let (m1, v1) = (p[0], p[1]);
                let (m2, v2) = (q[0], q[1]);
                0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0)
            }
            Family::Beta => {
                let (a1, b1) = (p[0], p[1]);
                let (a2, b2) = (q[0], q[1]);
                ln_beta(a2, b2) - ln_beta(a1, b1)
                    + (a1 - a2) * digamma(a1)
                    + (b1 - b2) * digamma(b1)
                    + (a2 - a1 + b2 - b1) * digamma(a1 + b1)
            }
            Family::Gamma => {
                let (k1, r1) = (p[0], p[1]);
                let (k2, r2) = (q[0], q[1]);
                (k1 - k2) * digamma(k1) - ln_gamma(k1) + ln_gamma(k2)
                    + k2 * (r1.ln() - r2.ln())
                    + k1 * (r2 - r1) / r1
            }
        })
    }

    // ---- message algebra ---------------------------------------------------

    /// Pointwise product: natural parameters add. The result may be improper.
    pub fn multiply(&self, other: &ExpFamMessage) -> Result<ExpFamMessage> {
        if self.family != other.family {
            return Err(ExpFamError::FamilyMismatch { left: self.family, right: other.family });
        }
        Ok(ExpFamMessage {
            family: self.family,
            natural: [self.natural[0] + other.natural[0], self.natural[1] + other.natural[1]],
        })
    }

    /// Pointwise quotient: natural parameters subtract. The result may be
    /// improper; dividing by a uniform message is the identity.
    pub fn divide(&self, other: &ExpFamMessage) -> Result<ExpFamMessage> {
        if self.family != other.family {
            return Err(ExpFamError::FamilyMismatch { left: self.family, right: other.family });
        }
        Ok(ExpFamMessage {
            family: self.family,
            natural: [self.natural[0] - other.natural[0], self.natural[1] - other.natural[1]],
        })
    }
}

/// `x^p` on the log scale with the support-boundary limits used by the Beta
/// and Gamma densities: `0^0 = 1`, `0^p = 0` for `p > 0`, `0^p = ∞` for
/// `p < 0`.
fn boundary_pow_log(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        if p == 0.0 {
            0.0
        } else if p > 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    } else {
        p * x.ln()
    }
}

// ---- moment projection ------------------------------------------------------

/// KL-minimizing (moment-matching) projection: the unique proper member of
/// `stats.family` whose expected sufficient statistics equal `stats`.
pub fn project_from_suffstats(stats: &SuffStats) -> Result<ExpFamMessage> {
    let [s1, s2] = stats.values;
    if !s1.is_finite() || !s2.is_finite() {
        return Err(ExpFamError::NonFiniteInput("sufficient statistics"));
    }
    if !stats.is_feasible() {
        return Err(ExpFamError::DegenerateStats { family: stats.family });
    }
    match stats.family {
        Family::Gaussian => {
            let var = (s2 - s1 * s1).max(GAUSSIAN_VARIANCE_FLOOR);
            ExpFamMessage::gaussian(s1, var)
        }
        Family::Gamma => project_gamma(s1, s2),
        Family::Beta => project_beta(s1, s2),
    }
}

/// Solves `ψ(k) - ln k = s1 - ln s2` (strictly increasing in `k`), then
/// `rate = k / s2`.
fn project_gamma(s1: f64, s2: f64) -> Result<ExpFamMessage> {
    let target = s1 - s2.ln(); // in (-∞, 0) for feasible stats
    let g = |k: f64| digamma(k) - k.ln() - target;
    // Bracket the root: g(k) → -∞ as k → 0 and → 0⁻ as k → ∞.
    let mut lo = 1e-10;
    let mut hi = 1.0;
    while g(hi) < 0.0 {
        hi *= 4.0;
        if hi > 1e14 {
            return Err(ExpFamError::NoConvergence { family: Family::Gamma });
        }
    }
    if g(lo) > 0.0 {
        lo = 1e-300;
    }
    // Newton with bisection safeguard.
    let mut k = (0.5 * (lo.ln() + hi.ln())).exp();
    for _ in 0..200 {
        let val = g(k);
        if val > 0.0 {
            hi = k;
        } else {
            lo = k;
        }
        let deriv = trigamma(k) - 1.0 / k;
        let mut next = if deriv.abs() > 0.0 { k - val / deriv } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - k).abs() <= 1e-13 * k.abs().max(1e-13) {
            k = next;
            break;
        }
        k = next;
    }
    if g(k).abs() > 1e-8 {
        return Err(ExpFamError::NoConvergence { family: Family::Gamma });
    }
    ExpFamMessage::gamma(k, k / s2)
}

/// Solves `ψ(α) - ψ(α+β) = s1`, `ψ(β) - ψ(α+β) = s2` by Newton in
/// `(ln α, ln β)` with residual-norm backtracking. The residual is the
/// gradient of a convex dual, so the Newton direction always decreases the
/// residual norm; the log parameterization keeps iterates in the domain.
fn project_beta(s1: f64, s2: f64) -> Result<ExpFamMessage> {
    let residual = |a: f64, b: f64| {
        let d_ab = digamma(a + b);
        [digamma(a) - d_ab - s1, digamma(b) - d_ab - s2]
    };
    // Initial guess: mean from the Jensen-gap heuristic, concentration from
    // the first-order expansion of ψ differences (falls back to (1,1)).
    let m_hat = (s1.exp() / (s1.exp() + s2.exp())).clamp(1e-6, 1.0 - 1e-6);
    let denom = -(m_hat * (s1 - m_hat.ln()) + (1.0 - m_hat) * (s2 - (1.0 - m_hat).ln()));
    let (mut a, mut b) = if denom > 0.0 {
        let c = (0.5 / denom).clamp(1e-2, 1e7);
        ((m_hat * c).max(1e-3), ((1.0 - m_hat) * c).max(1e-3))
    } else {
        (1.0, 1.0)
    };
    let mut f = residual(a, b);
    let norm = |f: [f64; 2]| f[0].abs().max(f[1].abs());
    for _ in 0..200 {
        if norm(f) < 1e-12 {
            break;
        }
        let t_ab = trigamma(a + b);
        let h11 = trigamma(a) - t_ab;
        let h22 = trigamma(b) - t_ab;
        let det = h11 * h22 - t_ab * t_ab;
        if !(det > 0.0) {
            return Err(ExpFamError::NoConvergence { family: Family::Beta });
        }
        // Newton step in (α, β), expressed and clamped in log coordinates.
        let da = -(h22 * f[0] + t_ab * f[1]) / det;
        let db = -(t_ab * f[0] + h11 * f[1]) / det;
        let du = (da / a).clamp(-2.0, 2.0);
        let dv = (db / b).clamp(-2.0, 2.0);
        if du.abs().max(dv.abs()) < 1e-14 {
            break;
        }
        let mut step = 1.0;
        let mut advanced = false;
        for _ in 0..50 {
            let (na, nb) = (a * (step * du).exp(), b * (step * dv).exp());
            let nf = residual(na, nb);
            if norm(nf) < norm(f) {
                a = na;
                b = nb;
                f = nf;
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced {
            break; // residual can no longer be reduced in float arithmetic
        }
    }
    if norm(f) < 1e-8 {
        ExpFamMessage::beta(a, b)
    } else {
        Err(ExpFamError::NoConvergence { family: Family::Beta })
    }
}

// ---- text serialization -------------------------------------------------------

/// `family:n1,n2` in natural parameters with round-trip float formatting,
/// e.g. `gaussian:0,-0.5`.
impl fmt::Display for ExpFamMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{},{}", self.family.name(), self.natural[0], self.natural[1])
    }
}

impl FromStr for ExpFamMessage {
    type Err = ExpFamError;

    fn from_str(s: &str) -> Result<Self> {
        let err = || ExpFamError::ParseError(s.to_string());
        let (fam, params) = s.split_once(':').ok_or_else(err)?;
        let family = match fam.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Family::Gaussian,
            "beta" => Family::Beta,
            "gamma" => Family::Gamma,
            _ => return Err(err()),
        };
        let (p1, p2) = params.split_once(',').ok_or_else(err)?;
        let n1: f64 = p1.trim().parse().map_err(|_| err())?;
        let n2: f64 = p2.trim().parse().map_err(|_| err())?;
        ExpFamMessage::from_natural(family, [n1, n2])
    }
}
