//! Integration windows for Beta and Gamma message densities.
//!
//! Fixed-order quadrature only works if the nodes sit where the mass is, so
//! each window is cut where the log-density has dropped a given number of
//! nats below its mode — that adapts automatically from diffuse to extremely
//! concentrated messages and, unlike a mean ± k·sd rule, respects the
//! exponential (rather than Gaussian) tails of the Gamma family.

use crate::numeric::crossing;
use std::f64::consts::FRAC_PI_2;

/// Window `(u_lo, u_hi)` in `u = ln x` space for a Gamma(shape `k`, rate `r`)
/// density. The transformed log-density `k·u − r·eᵘ` is strictly concave
/// with an interior mode at `ln(k/r)` for every `k > 0`, so both flanks have
/// a unique point `drop` nats below the mode.
pub(crate) fn gamma_u_window(k: f64, r: f64, drop: f64) -> (f64, f64) {
    let f = |u: f64| k * u - r * u.exp();
    let u_star = (k / r).ln();
    let target = f(u_star) - drop;
    // Left flank decays at rate k per unit u; right flank superexponentially.
    let lo_bracket = u_star - drop / k - 2.0;
    let hi_bracket = u_star + drop / k + drop.ln_1p() + 4.0;
    let lo = crossing(|u| f(u) - target, lo_bracket, u_star);
    let hi = crossing(|u| f(u) - target, u_star, hi_bracket);
    (lo, hi)
}

/// Window `(t_lo, t_hi)` in `t = asin(√x)` space for a Beta(α, β) density;
/// the substituted integrand `sin^{2α−1}t · cos^{2β−1}t` is log-concave when
/// both exponents are positive, and the window is the full `[0, π/2]` when
/// a shape parameter is ≤ ½ (boundary-peaked density) or when the requested
/// drop is never reached before the boundary.
pub(crate) fn beta_t_window(alpha: f64, beta: f64, drop: f64) -> (f64, f64) {
    let (a2, b2) = (2.0 * alpha - 1.0, 2.0 * beta - 1.0);
    if a2 <= 0.0 || b2 <= 0.0 {
        return (0.0, FRAC_PI_2);
    }
    let g = |t: f64| a2 * t.sin().ln() + b2 * t.cos().ln();
    let t_star = (a2 / b2).sqrt().atan();
    let target = g(t_star) - drop;
    let eps = 1e-14;
    let lo = if g(eps) >= target { 0.0 } else { crossing(|t| g(t) - target, eps, t_star) };
    let hi = if g(FRAC_PI_2 - eps) >= target {
        FRAC_PI_2
    } else {
        crossing(|t| target - g(t), t_star, FRAC_PI_2 - eps)
    };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_window_brackets_the_bulk() {
        for &(k, r) in &[(0.5, 1.0), (1.0, 1.0), (6.0, 5.0), (51.0, 24.0), (1e8, 1e8)] {
            let (lo, hi) = gamma_u_window(k, r, 45.0);
            let mean_u = (k / r).ln();
            assert!(lo < mean_u && mean_u < hi, "window ({lo}, {hi}) misses mode for ({k}, {r})");
            let f = |u: f64| k * u - r * u.exp();
            let peak = f(mean_u);
            assert!((f(lo) - (peak - 45.0)).abs() < 1e-6);
            assert!((f(hi) - (peak - 45.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn flat_beta_keeps_the_full_range() {
        assert_eq!(beta_t_window(1.0, 1.0, 45.0), (0.0, FRAC_PI_2));
        assert_eq!(beta_t_window(0.4, 3.0, 45.0), (0.0, FRAC_PI_2));
    }

    #[test]
    fn concentrated_beta_window_is_tight_and_correct() {
        let (alpha, beta) = (1e6, 1e6);
        let (lo, hi) = beta_t_window(alpha, beta, 45.0);
        // x = 1/2 ↔ t = π/4; the window must be a narrow band around it.
        assert!(lo < std::f64::consts::FRAC_PI_4 && std::f64::consts::FRAC_PI_4 < hi);
        assert!(hi - lo < 0.01);
        let g = |t: f64| {
            (2.0 * alpha - 1.0) * t.sin().ln() + (2.0 * beta - 1.0) * t.cos().ln()
        };
        let peak = g((((2.0 * alpha - 1.0) / (2.0 * beta - 1.0)) as f64).sqrt().atan());
        assert!((g(lo) - (peak - 45.0)).abs() < 1e-5);
        assert!((g(hi) - (peak - 45.0)).abs() < 1e-5);
    }

    #[test]
    fn moderately_peaked_beta_clips_only_reached_flanks() {
        // Beta(2, 1): the right flank (cos¹) only reaches ~32 nats below the
        // mode before the f64 floor, so it keeps the boundary; the left
        // flank (sin³) crosses the drop at sin t ≈ e^{−15}.
        let (lo, hi) = beta_t_window(2.0, 1.0, 45.0);
        assert_eq!(hi, FRAC_PI_2);
        assert!(lo >= 0.0 && lo < 1e-5);

        let (lo, hi) = beta_t_window(10.0, 30.0, 45.0);
        assert!(lo > 0.01 && hi < 1.4, "window ({lo}, {hi})");
    }
}
