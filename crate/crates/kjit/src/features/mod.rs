//! Kernels on tuples of distributions and their random-feature
//! approximations.
//!
//! A factor's incoming messages form a tuple `r = (r⁽¹⁾, …, r⁽ᶜ⁾)`; the
//! product distribution is represented by its mean embedding `μ_r` under a
//! Gaussian kernel with per-component widths `Σ = diag(σ₁², …, σ_c²)`. The
//! learned operator regresses from embeddings under the *outer* Gaussian
//! kernel `κ(r, s) = exp(-‖μ_r - μ_s‖² / 2γ²)`, approximated with two stages
//! of random Fourier features:
//!
//! 1. stage 1 approximates `⟨μ_r, μ_s⟩` via frequencies `ω_i` drawn from the
//!    inner kernel's spectral density — feature entries are
//!    `√(2/D_in) · E_{x∼r} cos(ω_iᵀx + b_i)`, computed exactly through the
//!    per-message characteristic functions ([`cf`]);
//! 2. stage 2 applies plain cosine features with frequencies `ν_i` from the
//!    outer kernel's spectral density to the stage-1 vector ([`map`]).
//!
//! [`exact`] provides the closed-form/quadrature kernel values used as
//! oracles and by the median heuristic ([`heuristic`]); [`alt`] implements
//! the alternative kernels (mean–variance, per-message sums and products)
//! compared in the kernel study experiment.

pub mod alt;
pub mod cf;
pub mod exact;
pub mod heuristic;
pub mod map;
mod window;

pub use alt::{expected_product_features, mv_exact_kernel, product_features, sum_features, MvFeatureMap};
pub use exact::{embedding_inner, exact_embedding_kernel, expected_product_inner_gaussian};
pub use heuristic::{median_heuristic, MedianHeuristicResult};
pub use map::{FeatureMap, MapIoError, Stage1Map};

pub(crate) use window::gamma_u_window;

use crate::expfam::{ExpFamMessage, Family};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("message {index} in tuple is improper ({family})")]
    ImproperMessage { index: usize, family: Family },
    #[error("tuple arity {got} does not match expected arity {expected}")]
    ArityMismatch { got: usize, expected: usize },
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("kernel widths must be positive")]
    ImproperParameters,
    #[error("feature dimension {0} exceeds the 10^7 guard")]
    DimensionOverflow(usize),
    #[error("expected a Gaussian message, got {0}")]
    FamilyMismatch(Family),
    #[error("need at least {needed} tuples, got {got}")]
    NotEnoughTuples { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Kernel widths for the two-stage construction: inner per-component widths
/// `σ_l²` and the outer embedding-kernel width `γ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelWidths {
    pub sigma2: Vec<f64>,
    pub gamma2: f64,
}

impl KernelWidths {
    pub fn new(sigma2: Vec<f64>, gamma2: f64) -> Result<Self> {
        if sigma2.is_empty() || sigma2.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(FeatureError::ImproperParameters);
        }
        if !(gamma2 > 0.0) || !gamma2.is_finite() {
            return Err(FeatureError::ImproperParameters);
        }
        Ok(KernelWidths { sigma2, gamma2 })
    }

    pub fn arity(&self) -> usize {
        self.sigma2.len()
    }
}

/// An ordered, fixed-arity tuple of proper incoming messages — the input of
/// every kernel and of the learned operator. Properness is checked once at
/// construction so downstream feature code can assume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageTuple {
    messages: Vec<ExpFamMessage>,
}

impl MessageTuple {
    pub fn new(messages: Vec<ExpFamMessage>) -> Result<Self> {
        for (index, m) in messages.iter().enumerate() {
            if !m.is_proper() {
                return Err(FeatureError::ImproperMessage { index, family: m.family() });
            }
        }
        Ok(MessageTuple { messages })
    }

    pub fn single(message: ExpFamMessage) -> Result<Self> {
        MessageTuple::new(vec![message])
    }

    pub fn pair(a: ExpFamMessage, b: ExpFamMessage) -> Result<Self> {
        MessageTuple::new(vec![a, b])
    }

    pub fn arity(&self) -> usize {
        self.messages.len()
    }

    pub fn messages(&self) -> &[ExpFamMessage] {
        &self.messages
    }

    /// `family:n1,n2` components joined with `|`, e.g.
    /// `gaussian:0,-0.5|beta:1,0`; parseable by [`MessageTuple::parse_text`].
    pub fn to_text(&self) -> String {
        self.messages.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("|")
    }

    pub fn parse_text(text: &str) -> std::result::Result<Self, crate::expfam::ExpFamError> {
        let messages = text
            .split('|')
            .map(|part| part.parse::<ExpFamMessage>())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        MessageTuple::new(messages)
            .map_err(|_| crate::expfam::ExpFamError::ParseError(text.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuple_rejects_improper_members() {
        let improper = ExpFamMessage::uniform(Family::Gaussian);
        let err = MessageTuple::pair(ExpFamMessage::gaussian(0.0, 1.0).unwrap(), improper).unwrap_err();
        assert_eq!(err, FeatureError::ImproperMessage { index: 1, family: Family::Gaussian });
    }

    #[test]
    fn tuple_text_round_trip() {
        let t = MessageTuple::pair(
            ExpFamMessage::gaussian(0.25, 2.0).unwrap(),
            ExpFamMessage::beta(2.0, 1.0).unwrap(),
        )
        .unwrap();
        let text = t.to_text();
        assert_eq!(MessageTuple::parse_text(&text).unwrap(), t);
    }

    #[test]
    fn widths_must_be_positive() {
        assert!(KernelWidths::new(vec![1.0, 0.0], 1.0).is_err());
        assert!(KernelWidths::new(vec![1.0], -1.0).is_err());
        assert!(KernelWidths::new(vec![], 1.0).is_err());
        assert!(KernelWidths::new(vec![2.0, 3.0], 0.5).is_ok());
    }
}
