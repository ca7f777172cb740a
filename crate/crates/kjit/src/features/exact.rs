//! Exact (non-random-feature) kernel values on message tuples.
//!
//! The embedding inner product `⟨μ_r, μ_s⟩ = E_{x∼r} E_{y∼s} k(x−y)` with a
//! Gaussian kernel of width `σ²` has a closed form when both messages are
//! Gaussian; every other family pairing falls back to a windowed product
//! quadrature of the double expectation. These values serve as oracles for
//! the random features, and power the median heuristic's reference tests.

use super::{FeatureError, KernelWidths, MessageTuple, Result};
use crate::expfam::{ExpFamMessage, Family};
use crate::quadrature::gauss_legendre;

/// Closed-form `⟨μ_r, μ_s⟩` for Gaussian messages `r = N(m_r, v_r)`,
/// `s = N(m_s, v_s)` under a kernel of width `σ²`:
/// `√(σ²/(v_r+v_s+σ²)) · exp(−(m_r−m_s)²/(2(v_r+v_s+σ²)))`.
pub fn expected_product_inner_gaussian(
    r: &ExpFamMessage,
    s: &ExpFamMessage,
    sigma2: f64,
) -> Result<f64> {
    for msg in [r, s] {
        if msg.family() != Family::Gaussian {
            return Err(FeatureError::FamilyMismatch(msg.family()));
        }
        if !msg.is_proper() {
            return Err(FeatureError::ImproperMessage { index: 0, family: msg.family() });
        }
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(FeatureError::ImproperParameters);
    }
    let (mr, ms) = (r.to_moments().unwrap(), s.to_moments().unwrap());
    let denom = mr[1] + ms[1] + sigma2;
    let diff = mr[0] - ms[0];
    Ok((sigma2 / denom).sqrt() * (-0.5 * diff * diff / denom).exp())
}

/// `⟨μ_r, μ_s⟩` for any proper message pair: Gaussian×Gaussian uses the
/// closed form, everything else a normalized two-dimensional quadrature.
pub fn embedding_inner(r: &ExpFamMessage, s: &ExpFamMessage, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(FeatureError::ImproperParameters);
    }
    for msg in [r, s] {
        if !msg.is_proper() {
            return Err(FeatureError::ImproperMessage { index: 0, family: msg.family() });
        }
    }
    if r.family() == Family::Gaussian && s.family() == Family::Gaussian {
        return expected_product_inner_gaussian(r, s, sigma2);
    }
    Ok(embedding_inner_quadrature(r, s, sigma2))
}

/// Product-rule quadrature of `E_r E_s exp(−(x−y)²/2σ²)`; exposed to the
/// tests so the Gaussian closed form can be cross-validated on the same
/// path every other family takes.
pub(crate) fn embedding_inner_quadrature(
    r: &ExpFamMessage,
    s: &ExpFamMessage,
    sigma2: f64,
) -> f64 {
    let xs = density_nodes(r);
    let ys = density_nodes(s);
    let inv = 0.5 / sigma2;
    let mut total = 0.0;
    for &(x, wx) in &xs {
        let mut row = 0.0;
        for &(y, wy) in &ys {
            let d = x - y;
            row += wy * (-d * d * inv).exp();
        }
        total += wx * row;
    }
    total
}

/// `κ(r, s) = exp(−‖μ_r − μ_s‖²/2γ²)` with
/// `‖μ_r − μ_s‖² = ⟨μ_r,μ_r⟩ − 2⟨μ_r,μ_s⟩ + ⟨μ_s,μ_s⟩`; per-component
/// inner products multiply because the kernel on tuple values factorizes
/// over the diagonal width matrix.
pub fn exact_embedding_kernel(r: &MessageTuple, s: &MessageTuple, widths: &KernelWidths) -> Result<f64> {
    if r.arity() != widths.arity() || s.arity() != widths.arity() {
        return Err(FeatureError::ArityMismatch {
            got: if r.arity() != widths.arity() { r.arity() } else { s.arity() },
            expected: widths.arity(),
        });
    }
    let (mut rr, mut rs, mut ss) = (1.0, 1.0, 1.0);
    for (l, sigma2) in widths.sigma2.iter().enumerate() {
        let (a, b) = (&r.messages()[l], &s.messages()[l]);
        rr *= embedding_inner(a, a, *sigma2)?;
        rs *= embedding_inner(a, b, *sigma2)?;
        ss *= embedding_inner(b, b, *sigma2)?;
    }
    Ok((-(rr - 2.0 * rs + ss) / (2.0 * widths.gamma2)).exp())
}

const NODE_ORDER: usize = 64;

/// Quadrature nodes `(x_i, w_i)` with `Σw_i = 1` approximating expectations
/// under the message density. Windows come from the shared log-density-drop
/// rule, substitutions mirror the characteristic-function integrator (Beta
/// in `x = sin²t`; the Gamma left flank in `u = ln x` joined to an `x`-space
/// right flank at the mean), and self-normalization absorbs the truncated
/// tail mass.
fn density_nodes(msg: &ExpFamMessage) -> Vec<(f64, f64)> {
    let moments = msg.to_moments().expect("proper message");
    let mut raw: Vec<(f64, f64, f64)> = Vec::new(); // (x, gl_weight·jacobian-scale, log-density)
    match msg.family() {
        Family::Gaussian => {
            let (m, v) = (moments[0], moments[1]);
            let sd = v.sqrt();
            push_region(&mut raw, m - 10.0 * sd, m + 10.0 * sd, 4, |x| x, |x| {
                let d = x - m;
                -d * d / (2.0 * v)
            });
        }
        Family::Beta => {
            let (alpha, beta) = (moments[0], moments[1]);
            let (t_lo, t_hi) = super::window::beta_t_window(alpha, beta, 45.0);
            let total = alpha + beta;
            let mean = alpha / total;
            let sd = (alpha * beta / (total * total * (total + 1.0))).sqrt();
            let scale_t = sd / (2.0 * (mean * (1.0 - mean)).sqrt());
            let panels = resolution_panels((t_hi - t_lo) / scale_t);
            push_region(
                &mut raw,
                t_lo,
                t_hi,
                panels,
                |t| {
                    let s = t.sin();
                    s * s
                },
                |t| {
                    let (s, c) = (t.sin(), t.cos());
                    (2.0 * alpha - 1.0) * s.max(1e-300).ln()
                        + (2.0 * beta - 1.0) * c.max(1e-300).ln()
                },
            );
        }
        Family::Gamma => {
            let (k, r) = (moments[0], moments[1]);
            let (u_lo, u_hi) = super::window::gamma_u_window(k, r, 45.0);
            let lw_u = |u: f64| k * u - r * u.exp();
            let scale_u = 1.0 / k.sqrt();
            if k < 1.0 {
                let panels = resolution_panels((u_hi - u_lo) / scale_u);
                push_region(&mut raw, u_lo, u_hi, panels, |u| u.exp(), lw_u);
            } else {
                let u_mid = (k / r).ln();
                let (x_mid, x_hi) = (u_mid.exp(), u_hi.exp());
                let sd_x = k.sqrt() / r;
                let left = resolution_panels((u_mid - u_lo) / scale_u);
                let right = resolution_panels((x_hi - x_mid) / sd_x);
                push_region(&mut raw, u_lo, u_mid, left, |u| u.exp(), lw_u);
                push_region(&mut raw, x_mid, x_hi, right, |x| x, |x| {
                    (k - 1.0) * x.max(1e-300).ln() - r * x
                });
            }
        }
    }
    let max_lw = raw.iter().fold(f64::NEG_INFINITY, |acc, &(_, _, lw)| acc.max(lw));
    let mut total = 0.0;
    let mut out: Vec<(f64, f64)> = raw
        .into_iter()
        .map(|(x, w, lw)| {
            let weight = w * (lw - max_lw).exp();
            total += weight;
            (x, weight)
        })
        .collect();
    for node in &mut out {
        node.1 /= total;
    }
    out
}

fn resolution_panels(width_over_scale: f64) -> usize {
    ((width_over_scale / 5.0).ceil() as usize).clamp(3, 32)
}

/// Append composite Gauss–Legendre nodes for one region, recording the value
/// `to_x(t)`, the rule weight scaled by the panel half-width (so regions in
/// different coordinates combine consistently), and the log-density at `t`.
fn push_region(
    out: &mut Vec<(f64, f64, f64)>,
    lo: f64,
    hi: f64,
    panels: usize,
    to_x: impl Fn(f64) -> f64,
    log_weight: impl Fn(f64) -> f64,
) {
    let rule = gauss_legendre(NODE_ORDER);
    let width = (hi - lo) / panels as f64;
    for p in 0..panels {
        let a = lo + p as f64 * width;
        for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
            let t = a + 0.5 * width * (x + 1.0);
            out.push((to_x(t), w * 0.5 * width, log_weight(t)));
        }
    }
}
