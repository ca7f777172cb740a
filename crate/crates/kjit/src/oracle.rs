//! Ground-truth message projection: importance sampling and quadrature.
//!
//! Both operators answer the same question — given the messages arriving at a
//! factor, what are the expected sufficient statistics of the tilted belief
//! `b(x) ∝ f(x)·∏ m(x)` marginalized to one variable? The importance sampler
//! draws particles from a proposal over the factor input and self-normalizes
//! the weights in log space; the quadrature operator integrates an analytic
//! one-dimensional reduction adaptively and is the deterministic reference
//! (and the stand-in oracle for the collapsed compound-gamma prior).
//!
//! Self-normalization is deliberate: the tilted belief's normalizer is
//! unknown, and dividing by the summed weights removes it at the cost of a
//! small, vanishing bias. Degenerate weight sets (effective sample size
//! below [`ESS_FLOOR`]) are rejected rather than propagated, because a
//! near-single-particle estimate is unusable as a regression target.

use crate::expfam::{ExpFamError, ExpFamMessage, Family, SuffStats};
use crate::features::MessageTuple;
use crate::numeric::softplus;
use crate::quadrature::gauss_legendre;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Effective-sample-size floor below which an importance estimate is refused.
pub const ESS_FLOOR: f64 = 10.0;

/// Log-density drop (nats below the mode) at which integration windows are
/// cut; `e^{-45} ≈ 2.9e-20` leaves truncation far below the quadrature
/// tolerance.
const WINDOW_DROP: f64 = 45.0;

/// Absolute tolerance on each projected statistic (relative above magnitude 1).
const QUAD_TOL: f64 = 1e-10;

const SCAN_POINTS: usize = 512;
const QUAD_ORDER: usize = 32;
const PANEL_SCHEDULE: [usize; 7] = [8, 16, 32, 64, 128, 256, 512];

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("proposal must be a proper distribution with at least one particle")]
    ImproperProposal,
    #[error("incoming messages unusable for this factor: {0}")]
    ImproperIncoming(&'static str),
    #[error("importance weights are degenerate (effective sample size {ess:.2} < {ESS_FLOOR})")]
    DegenerateWeights { ess: f64 },
    #[error("estimated sufficient statistics lie outside the moment space")]
    DegenerateStats,
    #[error("all importance weights are zero")]
    AllZeroWeights,
    #[error("weights must be finite and non-negative")]
    InvalidWeights,
    #[error("quadrature failed to locate or resolve the tilted density")]
    QuadratureNonConvergence,
    #[error(transparent)]
    Message(#[from] ExpFamError),
}

impl OracleError {
    /// True when the failure is a property of the particular incoming tuple
    /// — a tilted density collapsing to a near-delta, or an importance
    /// proposal that cannot cover it — rather than of the oracle's setup.
    /// Message-passing sweeps treat these like any other unusable update:
    /// keep the factor's previous message and move on.
    pub fn is_degenerate_input(&self) -> bool {
        matches!(
            self,
            OracleError::DegenerateStats
                | OracleError::QuadratureNonConvergence
                | OracleError::DegenerateWeights { .. }
                | OracleError::AllZeroWeights
                | OracleError::ImproperIncoming(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Which of a factor's variables the projected statistics describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetVar {
    /// The factor's input variable (the one the proposal covers).
    Input,
    /// The factor's output variable.
    Output,
}

/// Deterministic forward map `x_in ↦ x_out` through a factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardSampler {
    /// `p = 1/(1 + e^{-z})`: a real activation to a probability.
    Logistic,
}

impl ForwardSampler {
    pub fn forward(&self, x_in: f64) -> f64 {
        match self {
            ForwardSampler::Logistic => crate::numeric::sigmoid(x_in),
        }
    }

    pub fn input_family(&self) -> Family {
        match self {
            ForwardSampler::Logistic => Family::Gaussian,
        }
    }

    pub fn output_family(&self) -> Family {
        match self {
            ForwardSampler::Logistic => Family::Beta,
        }
    }
}

/// Importance-sampling proposal: a proper distribution over the factor input
/// and a particle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    distribution: ExpFamMessage,
    particles: usize,
}

impl Proposal {
    pub fn new(distribution: ExpFamMessage, particles: usize) -> Result<Self> {
        if !distribution.is_proper() || particles == 0 {
            return Err(OracleError::ImproperProposal);
        }
        Ok(Proposal { distribution, particles })
    }

    /// The wide default for logistic activations: `N(0, 200)` with 5×10⁵
    /// particles.
    pub fn logistic_default() -> Self {
        Proposal {
            distribution: ExpFamMessage::gaussian(0.0, 200.0).expect("fixed proper parameters"),
            particles: 500_000,
        }
    }

    pub fn distribution(&self) -> &ExpFamMessage {
        &self.distribution
    }

    pub fn particles(&self) -> usize {
        self.particles
    }
}

/// An importance estimate together with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct IsEstimate {
    pub stats: SuffStats,
    /// Effective sample size `(Σw)²/Σw²` of the normalized weights.
    pub ess: f64,
    /// Delta-method standard error of each statistic.
    pub stat_se: [f64; 2],
}

/// `(Σw)² / Σw²`: the number of equally-weighted particles the weight set is
/// worth. Lies in `[1, M]`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(OracleError::InvalidWeights);
    }
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum_sq == 0.0 {
        return Err(OracleError::AllZeroWeights);
    }
    Ok(sum * sum / sum_sq)
}

/// Normalizes log weights to probabilities with the max factored out first.
pub(crate) fn normalized_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Self-normalized importance estimate of the tilted belief's expected
/// sufficient statistics at a deterministic-map factor.
///
/// Particles are drawn over the input variable; each weight is
/// `m_in(x)·m_out(f(x)) / r(x)`, accumulated in log space so that saturating
/// tails underflow to zero weight instead of overflowing. Message
/// normalizers are constant across particles and cancel under
/// self-normalization, so weights are built directly from natural
/// parameters.
pub fn is_project<R: Rng + ?Sized>(
    incoming: &MessageTuple,
    f: &ForwardSampler,
    proposal: &Proposal,
    target: TargetVar,
    rng: &mut R,
) -> Result<SuffStats> {
    is_project_detailed(incoming, f, proposal, target, rng).map(|est| est.stats)
}

/// As [`is_project`], also returning the effective sample size and the
/// per-statistic standard errors (used for statistical cross-checks).
pub fn is_project_detailed<R: Rng + ?Sized>(
    incoming: &MessageTuple,
    f: &ForwardSampler,
    proposal: &Proposal,
    target: TargetVar,
    rng: &mut R,
) -> Result<IsEstimate> {
    let (m_in, m_out) = logistic_pair(incoming, f)?;
    let [n1, n2] = m_in.natural();
    let [a1, a2] = m_out.natural();

    let samples = proposal.distribution.sample(rng, proposal.particles)?;
    let mut log_w = Vec::with_capacity(samples.len());
    for &z in &samples {
        let log_p = -softplus(-z);
        let log_1mp = -softplus(z);
        let lw = n1 * z + n2 * z * z + a1 * log_p + a2 * log_1mp
            - proposal.distribution.log_pdf(z)?;
        log_w.push(lw);
    }
    let w = normalized_weights(&log_w);
    let ess = effective_sample_size(&w)?;
    if ess < ESS_FLOOR {
        return Err(OracleError::DegenerateWeights { ess });
    }

    let stat = |z: f64| -> [f64; 2] {
        match target {
            TargetVar::Input => [z, z * z],
            TargetVar::Output => [-softplus(-z), -softplus(z)],
        }
    };
    let mut s = [0.0_f64; 2];
    for (&z, &wi) in samples.iter().zip(&w) {
        let u = stat(z);
        s[0] += wi * u[0];
        s[1] += wi * u[1];
    }
    let mut se_sq = [0.0_f64; 2];
    for (&z, &wi) in samples.iter().zip(&w) {
        let u = stat(z);
        se_sq[0] += (wi * (u[0] - s[0])).powi(2);
        se_sq[1] += (wi * (u[1] - s[1])).powi(2);
    }

    let family = match target {
        TargetVar::Input => f.input_family(),
        TargetVar::Output => f.output_family(),
    };
    let stats = SuffStats::new(family, s);
    if !stats.is_feasible() {
        return Err(OracleError::DegenerateStats);
    }
    Ok(IsEstimate { stats, ess, stat_se: [se_sq[0].sqrt(), se_sq[1].sqrt()] })
}

fn logistic_pair<'a>(
    incoming: &'a MessageTuple,
    f: &ForwardSampler,
) -> Result<(&'a ExpFamMessage, &'a ExpFamMessage)> {
    let msgs = incoming.messages();
    if msgs.len() != 2 {
        return Err(OracleError::ImproperIncoming(
            "deterministic-map factors take exactly two incoming messages",
        ));
    }
    if msgs[0].family() != f.input_family() || msgs[1].family() != f.output_family() {
        return Err(OracleError::ImproperIncoming(
            "incoming tuple must be (input-side, output-side) in the factor's families",
        ));
    }
    Ok((&msgs[0], &msgs[1]))
}

/// Analytic one-dimensional factors the quadrature operator understands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TiltedFactor {
    /// `p = sigmoid(z)` with a Gaussian message on `z` and a Beta message on
    /// `p`; the tilt lives on `z`.
    Logistic,
    /// Collapsed compound-gamma prior on a precision `τ`:
    /// `f(τ) = ∫ Gamma(τ; s2, r2)·Gamma(r2; s1, r1) dr2
    ///       ∝ τ^{s2-1}·(τ + r1)^{-(s1+s2)}`; the tilt lives on `u = ln τ`.
    CompoundGamma { s1: f64, r1: f64, s2: f64 },
    /// Gaussian likelihood `N(y; z, variance)` on a Gaussian variable —
    /// conjugate, so the projection has a closed form to verify against.
    GaussianConjugate { y: f64, variance: f64 },
}

/// Deterministic projection of the tilted belief by adaptive quadrature.
///
/// The tilted log density is scanned for its mode, the integration window is
/// cut where the density drops [`WINDOW_DROP`] nats below it, and composite
/// Gauss–Legendre panels are doubled until every statistic moves less than
/// [`QUAD_TOL`] (absolute; relative above unit magnitude). Single-variable
/// factors ignore `target`.
pub fn quadrature_project(
    incoming: &MessageTuple,
    factor: &TiltedFactor,
    target: TargetVar,
) -> Result<SuffStats> {
    match factor {
        TiltedFactor::Logistic => {
            let (m_in, m_out) =
                logistic_pair(incoming, &ForwardSampler::Logistic)?;
            let [n1, n2] = m_in.natural();
            let [a1, a2] = m_out.natural();
            let (mean, var) = m_in.mean_variance()?;
            let sd = var.sqrt();
            let spread = sd * (2.0 * (WINDOW_DROP + 15.0)).sqrt();
            let mut lo = mean - spread;
            let mut hi = mean + spread;
            // A strong Beta tilt can pull the mode toward logit(α/(α+β)).
            if a1 > -1.0 && a2 > -1.0 {
                let logit = ((a1 + 1.0) / (a2 + 1.0)).ln();
                lo = lo.min(logit - 2.0);
                hi = hi.max(logit + 2.0);
            }
            let log_density =
                move |z: f64| n1 * z + n2 * z * z - a1 * softplus(-z) - a2 * softplus(z);
            let stat: StatFns = match target {
                TargetVar::Input => [&|z| z, &|z| z * z],
                TargetVar::Output => [&|z| -softplus(-z), &|z| -softplus(z)],
            };
            let family = match target {
                TargetVar::Input => Family::Gaussian,
                TargetVar::Output => Family::Beta,
            };
            integrate_tilt(&log_density, stat, family, lo, hi)
        }
        TiltedFactor::CompoundGamma { s1, r1, s2 } => {
            let (s1, r1, s2) = (*s1, *r1, *s2);
            if !(s1 > 0.0 && r1 > 0.0 && s2 > 0.0)
                || !(s1.is_finite() && r1.is_finite() && s2.is_finite())
            {
                return Err(OracleError::ImproperIncoming(
                    "compound-gamma hyperparameters must be positive and finite",
                ));
            }
            let m_tau = single_message(incoming, Family::Gamma)?;
            let [n1, n2] = m_tau.natural();
            // The message's rate is positive by the tuple's properness
            // invariant, but the tilted shape s2 + n1 can still reach zero
            // when s2 < 1; it must stay positive for integrability at τ→0.
            if s2 + n1 <= 0.0 {
                return Err(OracleError::ImproperIncoming(
                    "tilted precision shape must be positive",
                ));
            }
            let rate = -n2;
            let ln_r1 = r1.ln();
            // In u = ln τ, with the Jacobian folded in:
            // log g(u) = (s2 + n1)·u − rate·e^u − (s1+s2)·ln(e^u + r1).
            let log_density = move |u: f64| {
                (s2 + n1) * u - rate * u.exp() - (s1 + s2) * (ln_r1 + softplus(u - ln_r1))
            };
            let (lo, hi) =
                crate::features::gamma_u_window(s2 + n1, rate, WINDOW_DROP + 15.0);
            integrate_tilt(&log_density, [&|u| u, &|u: f64| u.exp()], Family::Gamma, lo, hi)
        }
        TiltedFactor::GaussianConjugate { y, variance } => {
            let (y, v) = (*y, *variance);
            if !(v > 0.0) || !y.is_finite() || !v.is_finite() {
                return Err(OracleError::ImproperIncoming(
                    "conjugate likelihood needs finite y and positive variance",
                ));
            }
            let m_z = single_message(incoming, Family::Gaussian)?;
            let [n1, n2] = m_z.natural();
            let precision = 1.0 / v - 2.0 * n2;
            let center = (n1 + y / v) / precision;
            let spread = (2.0 * (WINDOW_DROP + 15.0) / precision).sqrt();
            let log_density = move |z: f64| n1 * z + n2 * z * z - (z - y) * (z - y) / (2.0 * v);
            integrate_tilt(
                &log_density,
                [&|z| z, &|z| z * z],
                Family::Gaussian,
                center - spread,
                center + spread,
            )
        }
    }
}

fn single_message(incoming: &MessageTuple, family: Family) -> Result<&ExpFamMessage> {
    let msgs = incoming.messages();
    if msgs.len() != 1 || msgs[0].family() != family {
        return Err(OracleError::ImproperIncoming(
            "this factor takes exactly one incoming message of its variable's family",
        ));
    }
    Ok(&msgs[0])
}

type StatFns<'a> = [&'a dyn Fn(f64) -> f64; 2];

/// Shared quadrature core: mode scan with edge extension, drop-based window,
/// panel-doubled composite Gauss–Legendre of the self-normalized ratios.
fn integrate_tilt(
    log_density: &dyn Fn(f64) -> f64,
    stat: StatFns,
    family: Family,
    mut lo: f64,
    mut hi: f64,
) -> Result<SuffStats> {
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(OracleError::QuadratureNonConvergence);
    }

    // Locate the mode on a grid; if it sits on an edge the initial bracket
    // missed it, so grow that side and rescan.
    let (mut mode, mut peak) = (f64::NAN, f64::NEG_INFINITY);
    for _ in 0..64 {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..=SCAN_POINTS {
            let t = lo + (hi - lo) * i as f64 / SCAN_POINTS as f64;
            let lg = log_density(t);
            if lg > best.1 {
                best = (i, lg);
            }
        }
        if !best.1.is_finite() {
            return Err(OracleError::QuadratureNonConvergence);
        }
        let width = hi - lo;
        if best.0 == 0 {
            lo -= width;
        } else if best.0 == SCAN_POINTS {
            hi += width;
        } else {
            let step = width / SCAN_POINTS as f64;
            let grid_mode = lo + step * best.0 as f64;
            let (m, p) = refine_mode(log_density, grid_mode - step, grid_mode + step);
            mode = m;
            peak = p;
            break;
        }
    }
    if !mode.is_finite() {
        return Err(OracleError::QuadratureNonConvergence);
    }

    let target = peak - WINDOW_DROP;
    let step = (hi - lo) / SCAN_POINTS as f64;
    let lo = window_edge(log_density, mode, -step, target)?;
    let hi = window_edge(log_density, mode, step, target)?;

    let rule = gauss_legendre(QUAD_ORDER);
    let mut prev: Option<[f64; 2]> = None;
    for &panels in &PANEL_SCHEDULE {
        let mut z = 0.0;
        let mut s = [0.0_f64; 2];
        let panel_width = (hi - lo) / panels as f64;
        for p in 0..panels {
            let a = lo + panel_width * p as f64;
            let (c, h) = (a + 0.5 * panel_width, 0.5 * panel_width);
            for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
                let t = c + h * x;
                let g = w * h * (log_density(t) - peak).exp();
                z += g;
                s[0] += g * stat[0](t);
                s[1] += g * stat[1](t);
            }
        }
        if !(z > 0.0) {
            return Err(OracleError::QuadratureNonConvergence);
        }
        let ratio = [s[0] / z, s[1] / z];
        if let Some(p) = prev {
            let ok = (0..2).all(|j| {
                (ratio[j] - p[j]).abs() <= QUAD_TOL * ratio[j].abs().max(1.0)
            });
            if ok {
                let stats = SuffStats::new(family, ratio);
                if !stats.is_feasible() {
                    return Err(OracleError::DegenerateStats);
                }
                return Ok(stats);
            }
        }
        prev = Some(ratio);
    }
    Err(OracleError::QuadratureNonConvergence)
}

/// Ternary-search refinement of a scanned mode within one grid cell.
fn refine_mode(log_density: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    for _ in 0..100 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if log_density(m1) < log_density(m2) {
            a = m1;
        } else {
            b = m2;
        }
    }
    let m = 0.5 * (a + b);
    (m, log_density(m))
}

/// Walks geometrically from the mode in the direction of `step` until the
/// log density falls below `target`, then bisects the crossing.
fn window_edge(
    log_density: &dyn Fn(f64) -> f64,
    mode: f64,
    step: f64,
    target: f64,
) -> Result<f64> {
    let mut offset = step.abs().max(1e-300) * step.signum();
    for _ in 0..2000 {
        let t = mode + offset;
        if !t.is_finite() {
            return Err(OracleError::QuadratureNonConvergence);
        }
        if log_density(t) < target {
            let inner = mode + offset * 0.5;
            let (a, b) = if step < 0.0 { (t, inner.max(mode)) } else { (inner.min(mode), t) };
            return Ok(crate::numeric::crossing(|x| log_density(x) - target, a, b));
        }
        offset *= 2.0;
    }
    Err(OracleError::QuadratureNonConvergence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::project_from_suffstats;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logistic_tuple(m_z: ExpFamMessage, m_p: ExpFamMessage) -> MessageTuple {
        MessageTuple::pair(m_z, m_p).unwrap()
    }

    #[test]
    fn ess_of_equal_weights_is_the_count() {
        let w = vec![0.25; 100];
        assert_abs_diff_eq!(effective_sample_size(&w).unwrap(), 100.0, epsilon = 1e-9);
    }

    #[test]
    fn ess_of_a_single_spike_is_one() {
        let mut w = vec![0.0; 50];
        w[17] = 3.0;
        assert_abs_diff_eq!(effective_sample_size(&w).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ess_small_case_matches_formula() {
        assert_abs_diff_eq!(
            effective_sample_size(&[1.0, 1.0, 2.0]).unwrap(),
            16.0 / 6.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ess_rejects_bad_weight_sets() {
        assert_eq!(effective_sample_size(&[0.0, 0.0]).unwrap_err(), OracleError::AllZeroWeights);
        assert_eq!(effective_sample_size(&[1.0, -0.5]).unwrap_err(), OracleError::InvalidWeights);
        assert_eq!(
            effective_sample_size(&[1.0, f64::NAN]).unwrap_err(),
            OracleError::InvalidWeights
        );
    }

    #[test]
    fn log_space_normalization_matches_direct_computation() {
        let lw = [-1.25, 0.5, -0.75, 0.0, -2.0];
        let from_log = normalized_weights(&lw);
        let direct: Vec<f64> = {
            let w: Vec<f64> = lw.iter().map(|l| l.exp()).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        };
        for (a, b) in from_log.iter().zip(&direct) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(from_log.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_outcome_message_reduces_to_plain_monte_carlo() {
        // With m_p = Beta(1,1) and the proposal equal to m_z, every weight is
        // identical, so the estimator is a plain Monte Carlo average over
        // z ∼ m_z and the effective sample size is the particle count.
        let m_z = ExpFamMessage::gaussian(0.3, 1.2).unwrap();
        let m_p = ExpFamMessage::beta(1.0, 1.0).unwrap();
        let tuple = logistic_tuple(m_z.clone(), m_p);
        let proposal = Proposal::new(m_z, 40_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est = is_project_detailed(
            &tuple,
            &ForwardSampler::Logistic,
            &proposal,
            TargetVar::Input,
            &mut rng,
        )
        .unwrap();
        assert!(est.ess > 0.999 * 40_000.0, "ess {}", est.ess);
        assert!((est.stats.values[0] - 0.3).abs() < 4.0 * est.stat_se[0] + 1e-9);
        assert!((est.stats.values[1] - (1.2 + 0.09)).abs() < 4.0 * est.stat_se[1] + 1e-9);
    }

    #[test]
    fn importance_sampling_matches_quadrature_on_the_logistic_factor() {
        let tuple = logistic_tuple(
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::beta(1.0, 2.0).unwrap(),
        );
        let proposal = Proposal::logistic_default();
        for target in [TargetVar::Input, TargetVar::Output] {
            let quad = quadrature_project(&tuple, &TiltedFactor::Logistic, target).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let est = is_project_detailed(
                &tuple,
                &ForwardSampler::Logistic,
                &proposal,
                target,
                &mut rng,
            )
            .unwrap();
            for j in 0..2 {
                let err = (est.stats.values[j] - quad.values[j]).abs();
                assert!(
                    err < 3.0 * est.stat_se[j] + 1e-7,
                    "target {target:?} stat {j}: is {} vs quad {} (se {})",
                    est.stats.values[j],
                    quad.values[j],
                    est.stat_se[j]
                );
            }
        }
    }

    #[test]
    fn tiny_particle_count_trips_the_ess_guard() {
        let tuple = logistic_tuple(
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::beta(2.0, 1.0).unwrap(),
        );
        let proposal =
            Proposal::new(ExpFamMessage::gaussian(0.0, 10_000.0).unwrap(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let err = is_project(
            &tuple,
            &ForwardSampler::Logistic,
            &proposal,
            TargetVar::Input,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, OracleError::DegenerateWeights { .. }));
    }

    #[test]
    fn proposal_choice_does_not_bias_the_estimate() {
        let tuple = logistic_tuple(
            ExpFamMessage::gaussian(0.5, 2.0).unwrap(),
            ExpFamMessage::beta(2.0, 1.0).unwrap(),
        );
        let p1 = Proposal::new(ExpFamMessage::gaussian(0.0, 200.0).unwrap(), 100_000).unwrap();
        let p2 = Proposal::new(ExpFamMessage::gaussian(1.0, 50.0).unwrap(), 100_000).unwrap();
        for target in [TargetVar::Input, TargetVar::Output] {
            let mut rng1 = ChaCha8Rng::seed_from_u64(14);
            let mut rng2 = ChaCha8Rng::seed_from_u64(15);
            let e1 = is_project_detailed(
                &tuple, &ForwardSampler::Logistic, &p1, target, &mut rng1,
            )
            .unwrap();
            let e2 = is_project_detailed(
                &tuple, &ForwardSampler::Logistic, &p2, target, &mut rng2,
            )
            .unwrap();
            for j in 0..2 {
                let err = (e1.stats.values[j] - e2.stats.values[j]).abs();
                let se = (e1.stat_se[j].powi(2) + e2.stat_se[j].powi(2)).sqrt();
                assert!(err < 3.0 * se + 1e-7, "target {target:?} stat {j}: {err} vs se {se}");
            }
        }
    }

    #[test]
    fn mismatched_tuples_are_rejected() {
        // Wrong arity and wrong family order; improper messages are already
        // unrepresentable because MessageTuple refuses them at construction.
        let single =
            MessageTuple::single(ExpFamMessage::gaussian(0.0, 1.0).unwrap()).unwrap();
        let swapped = MessageTuple::pair(
            ExpFamMessage::beta(2.0, 1.0).unwrap(),
            ExpFamMessage::beta(1.0, 2.0).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for tuple in [&single, &swapped] {
            assert!(matches!(
                is_project(
                    tuple,
                    &ForwardSampler::Logistic,
                    &Proposal::logistic_default(),
                    TargetVar::Input,
                    &mut rng
                )
                .unwrap_err(),
                OracleError::ImproperIncoming(_)
            ));
            assert!(matches!(
                quadrature_project(tuple, &TiltedFactor::Logistic, TargetVar::Input)
                    .unwrap_err(),
                OracleError::ImproperIncoming(_)
            ));
        }
        assert!(
            MessageTuple::single(ExpFamMessage::uniform(Family::Gaussian)).is_err(),
            "tuple construction is where improper messages are stopped"
        );
    }

    #[test]
    fn conjugate_quadrature_matches_the_closed_form() {
        // N(z; 1, 2) message times N(3; z, 4) likelihood: posterior
        // precision 1/2 + 1/4 = 3/4, mean (1/2·1 + 1/4·3)/(3/4) = 5/3.
        let tuple =
            MessageTuple::single(ExpFamMessage::gaussian(1.0, 2.0).unwrap()).unwrap();
        let stats = quadrature_project(
            &tuple,
            &TiltedFactor::GaussianConjugate { y: 3.0, variance: 4.0 },
            TargetVar::Input,
        )
        .unwrap();
        let mean = 5.0 / 3.0;
        let var = 4.0 / 3.0;
        assert_abs_diff_eq!(stats.values[0], mean, epsilon = 1e-9);
        assert_abs_diff_eq!(stats.values[1], var + mean * mean, epsilon = 1e-9);
    }

    #[test]
    fn conjugate_quadrature_with_a_vague_message_recovers_the_likelihood() {
        // A very wide message contributes almost nothing, so the tilted
        // belief is essentially the likelihood N(z; -0.7, 0.5) itself.
        let tuple =
            MessageTuple::single(ExpFamMessage::gaussian(0.0, 1e8).unwrap()).unwrap();
        let stats = quadrature_project(
            &tuple,
            &TiltedFactor::GaussianConjugate { y: -0.7, variance: 0.5 },
            TargetVar::Input,
        )
        .unwrap();
        assert_abs_diff_eq!(stats.values[0], -0.7, epsilon = 1e-6);
        assert_abs_diff_eq!(stats.values[1], 0.5 + 0.49, epsilon = 1e-6);
    }

    #[test]
    fn compound_gamma_quadrature_matches_monte_carlo() {
        // Tilted belief for m_τ = Gamma(1,1) under the (1,1,1) collapsed
        // prior: g(τ) ∝ e^{-τ}/(1+τ)². Monte Carlo reference: draw from
        // Gamma(1,1), weight by (1+τ)^{-2}, self-normalize.
        let tuple = MessageTuple::single(ExpFamMessage::gamma(1.0, 1.0).unwrap()).unwrap();
        let quad = quadrature_project(
            &tuple,
            &TiltedFactor::CompoundGamma { s1: 1.0, r1: 1.0, s2: 1.0 },
            TargetVar::Output,
        )
        .unwrap();
        assert_eq!(quad.family, Family::Gamma);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m_tau = ExpFamMessage::gamma(1.0, 1.0).unwrap();
        let draws = m_tau.sample(&mut rng, 10_000_000).unwrap();
        let mut sum_w = 0.0;
        let mut s = [0.0_f64; 2];
        for &tau in &draws {
            let w = (1.0 + tau).powi(-2);
            sum_w += w;
            s[0] += w * tau.ln();
            s[1] += w * tau;
        }
        let mc = [s[0] / sum_w, s[1] / sum_w];
        let mut se_sq = [0.0_f64; 2];
        for &tau in &draws {
            let w = (1.0 + tau).powi(-2) / sum_w;
            se_sq[0] += (w * (tau.ln() - mc[0])).powi(2);
            se_sq[1] += (w * (tau - mc[1])).powi(2);
        }
        for j in 0..2 {
            let err = (quad.values[j] - mc[j]).abs();
            assert!(
                err < 3.0 * se_sq[j].sqrt() + 1e-6,
                "stat {j}: quad {} vs mc {}",
                quad.values[j],
                mc[j]
            );
        }
    }

    #[test]
    fn compound_gamma_with_data_weighted_message_stays_feasible() {
        // The shape a likelihood-updated precision message would carry.
        let tuple = MessageTuple::single(ExpFamMessage::gamma(26.0, 14.0).unwrap()).unwrap();
        let stats = quadrature_project(
            &tuple,
            &TiltedFactor::CompoundGamma { s1: 1.0, r1: 1.0, s2: 1.0 },
            TargetVar::Output,
        )
        .unwrap();
        assert!(stats.is_feasible());
        let projected = project_from_suffstats(&stats).unwrap();
        let (mean, _) = projected.mean_variance().unwrap();
        // The prior shrinks the belief mean below the message mean 26/14.
        assert!(mean > 0.0 && mean < 26.0 / 14.0);
    }

    #[test]
    fn compound_gamma_rejects_a_nonpositive_tilted_shape() {
        // A proper incoming Gamma(0.5, 1) against s2 = 0.4 drives the tilted
        // shape to 0.4 + (0.5 - 1) < 0: not integrable at τ → 0.
        let tuple = MessageTuple::single(ExpFamMessage::gamma(0.5, 1.0).unwrap()).unwrap();
        assert!(matches!(
            quadrature_project(
                &tuple,
                &TiltedFactor::CompoundGamma { s1: 1.0, r1: 1.0, s2: 0.4 },
                TargetVar::Output
            )
            .unwrap_err(),
            OracleError::ImproperIncoming(_)
        ));
        assert!(matches!(
            quadrature_project(
                &tuple,
                &TiltedFactor::CompoundGamma { s1: -1.0, r1: 1.0, s2: 1.0 },
                TargetVar::Output
            )
            .unwrap_err(),
            OracleError::ImproperIncoming(_)
        ));
    }

    #[test]
    fn near_delta_activation_projects_to_one_half() {
        let tuple = logistic_tuple(
            ExpFamMessage::gaussian(0.0, 1e-12).unwrap(),
            ExpFamMessage::beta(1.0, 1.0).unwrap(),
        );
        let stats =
            quadrature_project(&tuple, &TiltedFactor::Logistic, TargetVar::Output).unwrap();
        let belief = project_from_suffstats(&stats).unwrap();
        let (mean, _) = belief.mean_variance().unwrap();
        assert_abs_diff_eq!(mean, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn concentrated_beta_message_does_not_crash() {
        let tuple = logistic_tuple(
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::beta(1e6, 1e6).unwrap(),
        );
        for target in [TargetVar::Input, TargetVar::Output] {
            match quadrature_project(&tuple, &TiltedFactor::Logistic, target) {
                Ok(stats) => {
                    assert!(stats.values.iter().all(|v| v.is_finite()));
                    // The huge Beta tilt pins the activation near zero.
                    if target == TargetVar::Input {
                        assert!(stats.values[0].abs() < 0.05);
                    }
                }
                Err(e) => assert_eq!(e, OracleError::QuadratureNonConvergence),
            }
        }
    }

    #[test]
    fn flat_outcome_message_leaves_activation_stats_exact() {
        // Beta(1,1) contributes nothing, so the tilted belief is m_z itself.
        let tuple = logistic_tuple(
            ExpFamMessage::gaussian(-1.4, 0.6).unwrap(),
            ExpFamMessage::beta(1.0, 1.0).unwrap(),
        );
        let stats =
            quadrature_project(&tuple, &TiltedFactor::Logistic, TargetVar::Input).unwrap();
        assert_abs_diff_eq!(stats.values[0], -1.4, epsilon = 1e-9);
        assert_abs_diff_eq!(stats.values[1], 0.6 + 1.96, epsilon = 1e-9);
    }

    #[test]
    fn logistic_output_quadrature_matches_a_direct_reference() {
        // Independent reference: E[u(p)] under g(z) ∝ N(z; 0,1)·p(z) with
        // p = sigmoid(z) and m_p = Beta(2,1), via importance sampling from
        // m_z with bounded weights p(z) ∈ (0,1).
        let tuple = logistic_tuple(
            ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
            ExpFamMessage::beta(2.0, 1.0).unwrap(),
        );
        let quad =
            quadrature_project(&tuple, &TiltedFactor::Logistic, TargetVar::Output).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let m_z = ExpFamMessage::gaussian(0.0, 1.0).unwrap();
        let draws = m_z.sample(&mut rng, 2_000_000).unwrap();
        let mut sum_w = 0.0;
        let mut s = [0.0_f64; 2];
        for &z in &draws {
            let w = crate::numeric::sigmoid(z);
            sum_w += w;
            s[0] += w * (-softplus(-z));
            s[1] += w * (-softplus(z));
        }
        let mc = [s[0] / sum_w, s[1] / sum_w];
        for j in 0..2 {
            assert!(
                (quad.values[j] - mc[j]).abs() < 2e-3,
                "stat {j}: {} vs {}",
                quad.values[j],
                mc[j]
            );
        }
    }

    #[test]
    fn quadrature_and_importance_agree_on_shifted_problems() {
        // A small sweep over activation means and Beta sides, as produced
        // during EP on logistic graphs.
        let cases = [
            (2.0, 1.5, 2.0, 1.0),
            (-3.0, 0.5, 1.0, 2.0),
            (0.0, 4.0, 2.0, 1.0),
        ];
        for &(m, v, a, b) in &cases {
            let tuple = logistic_tuple(
                ExpFamMessage::gaussian(m, v).unwrap(),
                ExpFamMessage::beta(a, b).unwrap(),
            );
            let quad =
                quadrature_project(&tuple, &TiltedFactor::Logistic, TargetVar::Input).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let est = is_project_detailed(
                &tuple,
                &ForwardSampler::Logistic,
                &Proposal::logistic_default(),
                TargetVar::Input,
                &mut rng,
            )
            .unwrap();
            for j in 0..2 {
                let err = (est.stats.values[j] - quad.values[j]).abs();
                assert!(
                    err < 3.0 * est.stat_se[j] + 1e-7,
                    "case ({m},{v},{a},{b}) stat {j}: {err}"
                );
            }
        }
    }

    #[test]
    fn forward_sampler_maps_into_its_declared_domain() {
        let f = ForwardSampler::Logistic;
        for z in [-40.0, -1.0, 0.0, 2.5, 40.0] {
            let p = f.forward(z);
            assert!((0.0..=1.0).contains(&p));
        }
        assert_eq!(f.input_family(), Family::Gaussian);
        assert_eq!(f.output_family(), Family::Beta);
        assert_abs_diff_eq!(f.forward(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn proposal_construction_validates_inputs() {
        assert!(Proposal::new(ExpFamMessage::uniform(Family::Gaussian), 100).is_err());
        assert!(Proposal::new(ExpFamMessage::gaussian(0.0, 1.0).unwrap(), 0).is_err());
        let p = Proposal::logistic_default();
        assert_eq!(p.particles(), 500_000);
        let (mean, var) = p.distribution().mean_variance().unwrap();
        assert_eq!((mean, var), (0.0, 200.0));
    }
}
