//! Bayesian linear regression on feature vectors with exact online updates.
//!
//! The operator regresses target statistics on random features under the
//! model `y = wᵀx + ε`, `ε ∼ N(0, σ_y²)`, `w ∼ N(0, σ₀² I)`. All outputs
//! share the same features, noise, and prior, so the posterior covariance
//! `Σ_w = (XXᵀ/σ_y² + I/σ₀²)⁻¹` is computed once and shared; only the
//! posterior mean columns `μ_w = Σ_w · XYᵀ/σ_y²` differ per output. The
//! covariance is stored directly (not via its inverse) because both the
//! rank-1 online update and the predictive variance consume it as-is.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BayesError {
    #[error("prior and noise variances must be positive and finite")]
    ImproperParameters,
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("feature Gram matrix is not positive definite")]
    FactorizationFailure,
    #[error("rank-1 update denominator is not positive; posterior covariance is broken")]
    BrokenPosterior,
    #[error("input length {got} does not match expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, BayesError>;

/// Posterior state of the shared-covariance multi-output regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorState {
    sigma_w: DMatrix<f64>,
    xy: DMatrix<f64>,
    mu_w: DMatrix<f64>,
    sigma_y2: f64,
    sigma_02: f64,
    n_seen: usize,
}

impl RegressorState {
    /// Prior state: `Σ_w = σ₀²·I`, `μ_w = 0`.
    pub fn init(dim: usize, outputs: usize, sigma_02: f64, sigma_y2: f64) -> Result<Self> {
        if dim == 0 || outputs == 0 {
            return Err(BayesError::ImproperParameters);
        }
        for v in [sigma_02, sigma_y2] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(BayesError::ImproperParameters);
            }
        }
        Ok(RegressorState {
            sigma_w: DMatrix::identity(dim, dim) * sigma_02,
            xy: DMatrix::zeros(dim, outputs),
            mu_w: DMatrix::zeros(dim, outputs),
            sigma_y2,
            sigma_02,
            n_seen: 0,
        })
    }

    /// Direct posterior solve for a feature matrix `x` (dim × N, one column
    /// per observation) and targets `y` (outputs × N):
    /// `Σ_w = (xxᵀ/σ_y² + I/σ₀²)⁻¹` via Cholesky, `μ_w = Σ_w·xyᵀ/σ_y²`.
    pub fn batch_fit(
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        sigma_02: f64,
        sigma_y2: f64,
    ) -> Result<Self> {
        let mut state = RegressorState::init(x.nrows(), y.nrows(), sigma_02, sigma_y2)?;
        if x.ncols() != y.ncols() || x.ncols() == 0 {
            return Err(BayesError::DimensionMismatch { got: y.ncols(), expected: x.ncols() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BayesError::NonFiniteInput("feature matrix"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(BayesError::NonFiniteInput("target matrix"));
        }
        let dim = x.nrows();
        let mut precision = x * x.transpose() / sigma_y2;
        for i in 0..dim {
            precision[(i, i)] += 1.0 / sigma_02;
        }
        let chol = Cholesky::new(precision).ok_or(BayesError::FactorizationFailure)?;
        state.sigma_w = chol.inverse();
        symmetrize(&mut state.sigma_w);
        state.xy = x * y.transpose();
        state.mu_w = &state.sigma_w * &state.xy / sigma_y2;
        state.n_seen = x.ncols();
        Ok(state)
    }

    /// Exact rank-1 posterior update with one `(x, y)` pair:
    /// `Σ ← Σ − (Σx)(Σx)ᵀ / (σ_y² + xᵀΣx)`, then `XY ← XY + xyᵀ` and the
    /// mean refreshed as `Σ·XY/σ_y²`. No factorization; O(dim²·outputs).
    pub fn online_update(&mut self, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(BayesError::DimensionMismatch { got: x.len(), expected: self.dim() });
        }
        if y.len() != self.outputs() {
            return Err(BayesError::DimensionMismatch { got: y.len(), expected: self.outputs() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BayesError::NonFiniteInput("feature vector"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(BayesError::NonFiniteInput("target vector"));
        }
        let sx = &self.sigma_w * x;
        let denom = self.sigma_y2 + x.dot(&sx);
        if !(denom > 0.0) {
            return Err(BayesError::BrokenPosterior);
        }
        // Σ − Σxxᵀσ_y⁻²Σ / (1 + xᵀΣxσ_y⁻²), with σ_y² folded into `denom`.
        self.sigma_w.ger(-1.0 / denom, &sx, &sx, 1.0);
        symmetrize(&mut self.sigma_w);
        self.xy.ger(1.0, x, y, 1.0);
        self.mu_w = &self.sigma_w * &self.xy / self.sigma_y2;
        self.n_seen += 1;
        Ok(())
    }

    /// Predictive mean and variance per output:
    /// `N(y*; xᵀμ_w, xᵀΣ_w x + σ_y²)`. The variance is shared across
    /// outputs (shared covariance) and never falls below `σ_y²`.
    pub fn predict(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.dim() {
            return Err(BayesError::DimensionMismatch { got: x.len(), expected: self.dim() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(BayesError::NonFiniteInput("query vector"));
        }
        let mean = self.mu_w.transpose() * x;
        let var = x.dot(&(&self.sigma_w * x)) + self.sigma_y2;
        Ok((mean, DVector::from_element(self.outputs(), var)))
    }

    pub fn dim(&self) -> usize {
        self.sigma_w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.xy.ncols()
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    pub fn sigma_y2(&self) -> f64 {
        self.sigma_y2
    }

    pub fn sigma_02(&self) -> f64 {
        self.sigma_02
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}
