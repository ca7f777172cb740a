//! Gauss–Legendre quadrature rules and composite-panel helpers.
//!
//! Nodes and weights are generated once per order by Newton iteration on the
//! Legendre recurrence (the classic `gauleg` construction) and cached. All
//! higher-level integrators in this crate (characteristic functions, tilted
//! projections, exact kernel cross-checks) are built from these rules, so a
//! single well-tested primitive backs every deterministic numeric path.

use once_cell::sync::Lazy;
use std::collections::BTreeMap;
use std::sync::Mutex;

/// Nodes and weights of an `n`-point Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the rule by Newton iteration on P_n; accurate to ~1e-15 for
    /// the orders used here (≤ 512).
    fn build(n: usize) -> Self {
        assert!(n >= 2, "quadrature order must be at least 2");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Chebyshev-style initial guess for the i-th root.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // Evaluate P_n(x) and P'_n(x) via the three-term recurrence.
                let mut p0 = 1.0;
                let mut p1 = x;
                for k in 2..=n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integrates `f` over `[a, b]` with this rule.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

static RULE_CACHE: Lazy<Mutex<BTreeMap<usize, &'static GaussLegendre>>> =
    Lazy::new(|| Mutex::new(BTreeMap::new()));

/// Returns the cached `n`-point rule, building it on first use.
pub fn gauss_legendre(n: usize) -> &'static GaussLegendre {
    let mut cache = RULE_CACHE.lock().expect("quadrature cache poisoned");
    cache
        .entry(n)
        .or_insert_with(|| Box::leak(Box::new(GaussLegendre::build(n))))
}

/// Integrates `f` over `[a, b]` split into `panels` equal panels, each
/// handled by an `order`-point Gauss–Legendre rule.
pub fn integrate_panels<F: FnMut(f64) -> f64>(
    a: f64,
    b: f64,
    panels: usize,
    order: usize,
    mut f: F,
) -> f64 {
    let rule = gauss_legendre(order);
    let width = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * width;
        acc += rule.integrate(lo, lo + width, &mut f);
    }
    acc
}
