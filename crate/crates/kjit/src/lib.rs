//! Expectation propagation with kernel-based just-in-time learned message
//! operators.
//!
//! EP approximates an intractable posterior by iteratively projecting factor
//! "tilted" beliefs onto an exponential family. For factors without analytic
//! projections the projection must be estimated numerically (importance
//! sampling, quadrature), which dominates inference cost. This crate learns a
//! regression function from incoming message tuples to projected sufficient
//! statistics *while EP is running*: messages are embedded with two-stage
//! random Fourier features, fed to an online Bayesian linear regression, and
//! the numerical oracle is consulted only when the predictive variance is
//! above a threshold. Uncertainty estimates are calibrated enough that the
//! oracle is queried mostly where training data is scarce, so the operator
//! keeps improving on the fly without a hand-collected training set.
//!
//! Module map:
//!
//! * [`expfam`] — one-dimensional exponential-family messages (Gaussian,
//!   Beta, Gamma) in natural parameters, message algebra, moment projection.
//! * [`graph`] — factor graphs and the EP schedule for the two concrete
//!   models: Bayesian logistic regression and the compound-gamma precision
//!   model.
//! * [`oracle`] — ground-truth projection operators: self-normalized
//!   importance sampling and deterministic adaptive quadrature.
//! * [`features`] — mean embeddings of messages: two-stage random Fourier
//!   features, exact embedding kernels, alternative kernels, median
//!   heuristic.
//! * [`bayes`] — Bayesian linear regression with exact online rank-1
//!   updates and predictive variance.
//! * [`operator`] — the just-in-time operator tying the above together:
//!   warm-up, uncertainty-gated oracle calls, online updates, persistence.
//! * [`config`], [`data`], [`experiments`], [`report`] — experiment
//!   configuration, dataset handling, runnable experiment harnesses and
//!   CSV/summary emission used by the thin `kjit` binary.

pub mod bayes;
pub mod config;
pub mod data;
pub mod expfam;
pub mod experiments;
pub mod features;
pub mod graph;
pub mod numeric;
pub mod operator;
pub mod oracle;
pub mod quadrature;
pub mod report;
