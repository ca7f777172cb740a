//! Factor graphs and the expectation-propagation schedule.
//!
//! A [`FactorGraph`] holds variables (each a 1-D exponential-family site
//! with a prior), factors, and an ordered update schedule. Three factor
//! kinds cover the two concrete models:
//!
//! * [`FactorKind::Constant`] — conjugate factors whose message to their
//!   single neighbor is a fixed natural-parameter contribution (Bernoulli
//!   observations on probabilities, Gaussian-precision likelihoods,
//!   Gaussian priors-as-factors).
//! * [`FactorKind::Dot`] — the deterministic inner product `z = aᵀw` under
//!   a factorized Gaussian belief on `w`, updated analytically.
//! * [`FactorKind::Pluggable`] — factors whose projection is delegated to a
//!   [`MessageOperator`]: the logistic link and the collapsed
//!   compound-gamma prior. Operators are attached to numbered slots so one
//!   operator instance can serve every factor of the same kind and
//!   direction, and can be taken out and handed to the next problem.
//!
//! Each scheduled update computes `divide(project(tilted belief), cavity)`,
//! damped in natural parameters. Variable beliefs are never stored: a
//! belief is always the natural-parameter sum of the prior and the current
//! factor→variable messages, so the consistency invariant holds by
//! construction. An update is skipped (previous message kept) when its
//! inputs are improper or when the damped message would drive the target
//! belief improper; outgoing messages that are improper in isolation are
//! applied as long as the belief stays proper, which the collapsed
//! compound-gamma factor needs — its exact outgoing corrections generically
//! carry a negative shape.

use crate::expfam::{ExpFamError, ExpFamMessage, Family, SuffStats};
use crate::features::MessageTuple;
use crate::oracle::{
    is_project, quadrature_project, ForwardSampler, OracleError, Proposal, TargetVar, TiltedFactor,
};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

/// Variance floor for analytically-derived Gaussian messages (e.g. the
/// activation message of an all-zero feature row).
const MIN_GAUSSIAN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("dataset must contain at least one observation")]
    EmptyDataset,
    #[error("dimension mismatch: got {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("model parameters must be positive and finite")]
    ImproperParameters,
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("graph construction error: {0}")]
    InvalidGraph(&'static str),
    #[error("no operator attached to slot {slot}")]
    MissingOperator { slot: usize },
    #[error("graph has no operator-pluggable factors")]
    NoPluggableFactors,
    #[error("operator failed: {0}")]
    OperatorFailure(String),
    #[error("EP iteration produced no usable update")]
    AllMessagesImproper,
    #[error(transparent)]
    Message(#[from] ExpFamError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// What a learned or oracle operator regresses and reports as its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    /// Target the projected tilted belief's expected sufficient statistics;
    /// the division by the cavity happens in the graph layer.
    Belief,
    /// Target the outgoing message itself, recorded as its natural
    /// parameters (well-defined even when the message alone is improper).
    Outgoing,
}

/// One proposed factor→variable message plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorOutput {
    /// Proposed outgoing message, before damping. May be improper.
    pub outgoing: ExpFamMessage,
    /// The regression target that produced it: projected-belief sufficient
    /// statistics in [`TargetMode::Belief`], or the outgoing message's
    /// natural parameters in [`TargetMode::Outgoing`].
    pub target_stats: SuffStats,
    /// Whether a numerical oracle was consulted for this proposal.
    pub used_oracle: bool,
    /// Log predictive variance of the estimate, when the operator has one.
    pub log_variance: Option<f64>,
}

/// A message projection strategy for a pluggable factor direction.
///
/// Implementations are exclusive-owned by one inference run at a time;
/// sequential problems hand the boxed operator off via
/// [`FactorGraph::take_operator`] / [`FactorGraph::attach_operator`].
pub trait MessageOperator {
    /// Proposes `m_{f→V}` for the target variable given the full incoming
    /// tuple; `cavity` is the incoming message from the target variable
    /// itself (`incoming` at the target position).
    fn propose(
        &mut self,
        incoming: &MessageTuple,
        target: TargetVar,
        cavity: &ExpFamMessage,
        rng: &mut dyn RngCore,
    ) -> std::result::Result<OperatorOutput, Box<dyn std::error::Error + Send + Sync>>;
}

/// Oracle-backed [`MessageOperator`]s: exact (up to quadrature tolerance or
/// Monte Carlo error) projections with no learning.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleKind {
    /// Deterministic adaptive quadrature through the logistic link.
    QuadratureLogistic,
    /// Self-normalized importance sampling through the logistic link.
    ImportanceLogistic(Proposal),
    /// Deterministic quadrature for the collapsed compound-gamma prior.
    QuadratureCompoundGamma { s1: f64, r1: f64, s2: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOperator {
    kind: OracleKind,
    target_mode: TargetMode,
}

impl OracleOperator {
    pub fn logistic_quadrature() -> Self {
        OracleOperator { kind: OracleKind::QuadratureLogistic, target_mode: TargetMode::Belief }
    }

    pub fn logistic_importance(proposal: Proposal) -> Self {
        OracleOperator {
            kind: OracleKind::ImportanceLogistic(proposal),
            target_mode: TargetMode::Belief,
        }
    }

    pub fn compound_gamma(s1: f64, r1: f64, s2: f64) -> Self {
        OracleOperator {
            kind: OracleKind::QuadratureCompoundGamma { s1, r1, s2 },
            target_mode: TargetMode::Outgoing,
        }
    }

    pub fn with_target_mode(mut self, mode: TargetMode) -> Self {
        self.target_mode = mode;
        self
    }

    pub fn target_mode(&self) -> TargetMode {
        self.target_mode
    }
}

impl MessageOperator for OracleOperator {
    fn propose(
        &mut self,
        incoming: &MessageTuple,
        target: TargetVar,
        cavity: &ExpFamMessage,
        rng: &mut dyn RngCore,
    ) -> std::result::Result<OperatorOutput, Box<dyn std::error::Error + Send + Sync>> {
        let stats = match &self.kind {
            OracleKind::QuadratureLogistic => {
                quadrature_project(incoming, &TiltedFactor::Logistic, target)?
            }
            OracleKind::ImportanceLogistic(proposal) => {
                is_project(incoming, &ForwardSampler::Logistic, proposal, target, rng)?
            }
            OracleKind::QuadratureCompoundGamma { s1, r1, s2 } => quadrature_project(
                incoming,
                &TiltedFactor::CompoundGamma { s1: *s1, r1: *r1, s2: *s2 },
                target,
            )?,
        };
        let belief = crate::expfam::project_from_suffstats(&stats)?;
        let outgoing = belief.divide(cavity)?;
        let target_stats = match self.target_mode {
            TargetMode::Belief => stats,
            TargetMode::Outgoing => SuffStats::new(outgoing.family(), outgoing.natural()),
        };
        Ok(OperatorOutput { outgoing, target_stats, used_oracle: true, log_variance: None })
    }
}

/// The three factor behaviors a graph can hold.
pub enum FactorKind {
    /// Sends a fixed message to its single neighbor. The message is an
    /// exact natural-parameter contribution and is applied even if improper
    /// in isolation (e.g. the rate-free `Gamma` increment of a zero
    /// observation).
    Constant(ExpFamMessage),
    /// `z = Σ_j weights_j · w_j` with neighbors `[w_1, …, w_d, z]`, all
    /// Gaussian, updated analytically under the factorized belief.
    Dot { weights: Vec<f64> },
    /// Projection delegated to the operator attached at `slots[pos]` for
    /// the neighbor at `pos`. One or two neighbors.
    Pluggable { slots: Vec<usize> },
}

struct Variable {
    name: String,
    family: Family,
    prior: ExpFamMessage,
    /// (factor index, neighbor position) of every adjacent factor.
    edges: Vec<(usize, usize)>,
}

struct Factor {
    kind: FactorKind,
    vars: Vec<usize>,
    /// Current factor→variable message per neighbor, parallel to `vars`.
    to_var: Vec<ExpFamMessage>,
}

/// Options for one EP run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpOptions {
    pub max_iters: usize,
    /// Damping `δ ∈ (0, 1]` applied in natural-parameter space:
    /// `new = δ·proposed + (1−δ)·old`. `δ = 1` is the undamped update.
    pub damping: f64,
    /// Converged when the largest absolute natural-parameter change across
    /// one full sweep falls below this.
    pub convergence_tol: f64,
    /// Record a [`MessageLogEntry`] per operator invocation.
    pub log_messages: bool,
}

impl Default for EpOptions {
    fn default() -> Self {
        EpOptions { max_iters: 10, damping: 1.0, convergence_tol: 1e-6, log_messages: false }
    }
}

/// One operator invocation, as recorded when logging is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageLogEntry {
    pub iteration: usize,
    pub factor: usize,
    pub variable: usize,
    pub incoming: MessageTuple,
    pub target_stats: SuffStats,
    pub outgoing: ExpFamMessage,
    pub used_oracle: bool,
    pub log_variance: Option<f64>,
    /// Whether the proposal was actually written to the edge (false when it
    /// would have driven the target belief improper).
    pub applied: bool,
}

/// Outcome of an EP run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpRunReport {
    pub iterations_run: usize,
    pub converged: bool,
    pub final_beliefs: Vec<ExpFamMessage>,
    pub message_log: Vec<MessageLogEntry>,
    pub operator_invocations: usize,
    pub oracle_query_count: usize,
    pub skipped_updates: usize,
}

enum StepOutcome {
    Updated { delta: f64 },
    Skipped,
}

/// True when a proposal failed because this particular tilted projection is
/// numerically unusable — a near-delta density, degenerate importance
/// weights, a moment vector on the boundary of the moment space — rather
/// than because the operator is misconfigured. Such failures are a property
/// of the current messages, so the sweep keeps the factor's previous
/// message and moves on, like any other skipped update.
fn is_degenerate_proposal(e: &(dyn std::error::Error + 'static)) -> bool {
    fn projection(e: &ExpFamError) -> bool {
        matches!(e, ExpFamError::DegenerateStats { .. } | ExpFamError::NoConvergence { .. })
    }
    if let Some(e) = e.downcast_ref::<crate::operator::OperatorError>() {
        match e {
            crate::operator::OperatorError::Oracle(o) => o.is_degenerate_input(),
            crate::operator::OperatorError::Message(m) => projection(m),
            _ => false,
        }
    } else if let Some(o) = e.downcast_ref::<OracleError>() {
        o.is_degenerate_input()
    } else if let Some(m) = e.downcast_ref::<ExpFamError>() {
        projection(m)
    } else {
        false
    }
}

impl std::fmt::Debug for FactorGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FactorGraph")
            .field("variables", &self.variables.len())
            .field("factors", &self.factors.len())
            .field("schedule_len", &self.schedule.len())
            .finish()
    }
}

#[derive(Default)]
pub struct FactorGraph {
    variables: Vec<Variable>,
    factors: Vec<Factor>,
    operators: Vec<Option<Box<dyn MessageOperator>>>,
    schedule: Vec<(usize, usize)>,
}

impl FactorGraph {
    pub fn new() -> Self {
        FactorGraph::default()
    }

    /// Adds a variable with its prior (uniform allowed) and returns its
    /// index.
    pub fn add_variable(
        &mut self,
        name: impl Into<String>,
        family: Family,
        prior: ExpFamMessage,
    ) -> Result<usize> {
        if prior.family() != family {
            return Err(GraphError::InvalidGraph("prior family must match the variable family"));
        }
        self.variables.push(Variable { name: name.into(), family, prior, edges: Vec::new() });
        Ok(self.variables.len() - 1)
    }

    /// Adds a factor over `vars` and returns its index. Neighbor messages
    /// start uniform.
    pub fn add_factor(&mut self, kind: FactorKind, vars: Vec<usize>) -> Result<usize> {
        if vars.is_empty() || vars.iter().any(|&v| v >= self.variables.len()) {
            return Err(GraphError::InvalidGraph("factor references an unknown variable"));
        }
        if vars.iter().collect::<HashSet<_>>().len() != vars.len() {
            return Err(GraphError::InvalidGraph("factor neighbors must be distinct"));
        }
        match &kind {
            FactorKind::Constant(msg) => {
                if vars.len() != 1 {
                    return Err(GraphError::InvalidGraph(
                        "constant factors take exactly one variable",
                    ));
                }
                if msg.family() != self.variables[vars[0]].family {
                    return Err(GraphError::InvalidGraph(
                        "constant message family must match its variable",
                    ));
                }
            }
            FactorKind::Dot { weights } => {
                if vars.len() < 2 || weights.len() != vars.len() - 1 {
                    return Err(GraphError::InvalidGraph(
                        "dot factors take weights for each input plus one output variable",
                    ));
                }
                if weights.iter().any(|w| !w.is_finite()) {
                    return Err(GraphError::NonFiniteInput("dot factor weights"));
                }
                if vars.iter().any(|&v| self.variables[v].family != Family::Gaussian) {
                    return Err(GraphError::InvalidGraph("dot factor variables must be Gaussian"));
                }
            }
            FactorKind::Pluggable { slots } => {
                if vars.len() > 2 || slots.len() != vars.len() {
                    return Err(GraphError::InvalidGraph(
                        "pluggable factors take one or two variables with one slot each",
                    ));
                }
            }
        }
        let idx = self.factors.len();
        let to_var = vars
            .iter()
            .map(|&v| ExpFamMessage::uniform(self.variables[v].family))
            .collect();
        for (pos, &v) in vars.iter().enumerate() {
            self.variables[v].edges.push((idx, pos));
        }
        self.factors.push(Factor { kind, vars, to_var });
        Ok(idx)
    }

    /// Sets the per-iteration update order as (factor, neighbor position)
    /// pairs.
    pub fn set_schedule(&mut self, schedule: Vec<(usize, usize)>) -> Result<()> {
        for &(f, pos) in &schedule {
            if f >= self.factors.len() || pos >= self.factors[f].vars.len() {
                return Err(GraphError::InvalidGraph("schedule entry out of range"));
            }
        }
        self.schedule = schedule;
        Ok(())
    }

    pub fn attach_operator(&mut self, slot: usize, op: Box<dyn MessageOperator>) {
        if slot >= self.operators.len() {
            self.operators.resize_with(slot + 1, || None);
        }
        self.operators[slot] = Some(op);
    }

    /// Removes and returns the operator in `slot`, e.g. to hand it to the
    /// next problem in a sequence.
    pub fn take_operator(&mut self, slot: usize) -> Option<Box<dyn MessageOperator>> {
        self.operators.get_mut(slot).and_then(Option::take)
    }

    pub fn variable_count(&self) -> usize {
        self.variables.len()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn variable_name(&self, var: usize) -> &str {
        &self.variables[var].name
    }

    pub fn pluggable_factor_count(&self) -> usize {
        self.factors
            .iter()
            .filter(|f| matches!(f.kind, FactorKind::Pluggable { .. }))
            .count()
    }

    /// Current factor→variable message of `factor` toward its `pos`-th
    /// neighbor.
    pub fn message(&self, factor: usize, pos: usize) -> &ExpFamMessage {
        &self.factors[factor].to_var[pos]
    }

    /// The marginal belief: prior plus all incoming messages in natural
    /// parameters. Computed on demand, so it is consistent by construction.
    pub fn belief(&self, var: usize) -> ExpFamMessage {
        let v = &self.variables[var];
        let mut b = v.prior.clone();
        for &(f, pos) in &v.edges {
            b = b.multiply(&self.factors[f].to_var[pos]).expect("families match by construction");
        }
        b
    }

    pub fn beliefs(&self) -> Vec<ExpFamMessage> {
        (0..self.variables.len()).map(|v| self.belief(v)).collect()
    }

    /// The variable→factor message: belief divided by the factor's own
    /// contribution.
    fn incoming(&self, factor: usize, pos: usize) -> ExpFamMessage {
        let var = self.factors[factor].vars[pos];
        self.belief(var)
            .divide(&self.factors[factor].to_var[pos])
            .expect("families match by construction")
    }

    /// Runs the EP schedule for up to `max_iters` sweeps.
    pub fn run_ep(&mut self, opts: &EpOptions, rng: &mut dyn RngCore) -> Result<EpRunReport> {
        if !(opts.damping > 0.0 && opts.damping <= 1.0) || !(opts.convergence_tol >= 0.0) {
            return Err(GraphError::ImproperParameters);
        }
        if self.schedule.is_empty() && opts.max_iters > 0 {
            return Err(GraphError::InvalidGraph("schedule is empty"));
        }
        let mut report = EpRunReport::default();
        for iteration in 1..=opts.max_iters {
            let mut max_delta = 0.0_f64;
            let mut usable = 0_usize;
            for step in 0..self.schedule.len() {
                let (f, pos) = self.schedule[step];
                let outcome = self.update(f, pos, iteration, opts, &mut report, rng)?;
                match outcome {
                    StepOutcome::Updated { delta } => {
                        usable += 1;
                        max_delta = max_delta.max(delta);
                    }
                    StepOutcome::Skipped => report.skipped_updates += 1,
                }
            }
            report.iterations_run = iteration;
            if usable == 0 {
                return Err(GraphError::AllMessagesImproper);
            }
            if max_delta < opts.convergence_tol {
                report.converged = true;
                break;
            }
        }
        report.final_beliefs = self.beliefs();
        Ok(report)
    }

    /// Runs EP with logging and returns every oracle-computed
    /// (incoming tuple, target statistics) pair — the training pool for the
    /// learned operator. Zero iterations yield an empty list.
    pub fn collect_training_messages(
        &mut self,
        iterations: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<(MessageTuple, SuffStats)>> {
        if self.pluggable_factor_count() == 0 {
            return Err(GraphError::NoPluggableFactors);
        }
        let opts = EpOptions {
            max_iters: iterations,
            damping: 1.0,
            convergence_tol: 0.0,
            log_messages: true,
        };
        let report = self.run_ep(&opts, rng)?;
        Ok(report
            .message_log
            .into_iter()
            .filter(|e| e.used_oracle)
            .map(|e| (e.incoming, e.target_stats))
            .collect())
    }

    fn update(
        &mut self,
        f: usize,
        pos: usize,
        iteration: usize,
        opts: &EpOptions,
        report: &mut EpRunReport,
        rng: &mut dyn RngCore,
    ) -> Result<StepOutcome> {
        match &self.factors[f].kind {
            FactorKind::Constant(msg) => {
                let proposed = msg.clone();
                Ok(self.apply(f, pos, proposed, opts.damping, true))
            }
            FactorKind::Dot { .. } => self.update_dot(f, pos, opts.damping),
            FactorKind::Pluggable { slots } => {
                let slot = slots[pos];
                let var = self.factors[f].vars[pos];
                let arity = self.factors[f].vars.len();
                let target = match (arity, pos) {
                    (1, _) => TargetVar::Output,
                    (_, 0) => TargetVar::Input,
                    _ => TargetVar::Output,
                };

                let msgs: Vec<ExpFamMessage> =
                    (0..arity).map(|k| self.incoming(f, k)).collect();
                let Ok(tuple) = MessageTuple::new(msgs) else {
                    return Ok(StepOutcome::Skipped);
                };
                let cavity = tuple.messages()[pos].clone();

                let op = self
                    .operators
                    .get_mut(slot)
                    .and_then(Option::as_mut)
                    .ok_or(GraphError::MissingOperator { slot })?;
                let out = match op.propose(&tuple, target, &cavity, rng) {
                    Ok(out) => out,
                    Err(e) if is_degenerate_proposal(&*e) => {
                        return Ok(StepOutcome::Skipped);
                    }
                    Err(e) => return Err(GraphError::OperatorFailure(e.to_string())),
                };
                if out.outgoing.family() != self.variables[var].family {
                    return Err(GraphError::OperatorFailure(
                        "operator returned a message of the wrong family".into(),
                    ));
                }

                report.operator_invocations += 1;
                if out.used_oracle {
                    report.oracle_query_count += 1;
                }
                let outcome =
                    self.apply(f, pos, out.outgoing.clone(), opts.damping, false);
                if opts.log_messages {
                    report.message_log.push(MessageLogEntry {
                        iteration,
                        factor: f,
                        variable: var,
                        incoming: tuple,
                        target_stats: out.target_stats,
                        outgoing: out.outgoing,
                        used_oracle: out.used_oracle,
                        log_variance: out.log_variance,
                        applied: matches!(outcome, StepOutcome::Updated { .. }),
                    });
                }
                Ok(outcome)
            }
        }
    }

    fn update_dot(&mut self, f: usize, pos: usize, damping: f64) -> Result<StepOutcome> {
        let FactorKind::Dot { weights } = &self.factors[f].kind else { unreachable!() };
        let weights = weights.clone();
        let d = weights.len();

        // Gather moments of every input cavity; give up if any is improper.
        let mut mu = Vec::with_capacity(d);
        let mut var = Vec::with_capacity(d);
        for j in 0..d {
            let cav = self.incoming(f, j);
            if !cav.is_proper() {
                return Ok(StepOutcome::Skipped);
            }
            let (m, v) = cav.mean_variance()?;
            mu.push(m);
            var.push(v);
        }
        let mu0: f64 = weights.iter().zip(&mu).map(|(a, m)| a * m).sum();
        let s: f64 = weights.iter().zip(&var).map(|(a, v)| a * a * v).sum();

        if pos == d {
            // Message to the output: N(aᵀμ, aᵀdiag(v)a), exact under the
            // factorized belief.
            let proposed = ExpFamMessage::gaussian(mu0, s.max(MIN_GAUSSIAN_VARIANCE))?;
            return Ok(self.apply(f, pos, proposed, damping, false));
        }

        // Message to an input: condition the joint Gaussian on the output's
        // incoming message, then divide by the input's own cavity. The
        // output cavity may carry a negative variance (a routine improper
        // EP quotient); it is usable as long as the total stays positive.
        let z_cav = self.incoming(f, d);
        let [zn1, zn2] = z_cav.natural();
        if zn2 == 0.0 {
            return Ok(StepOutcome::Skipped);
        }
        let v_z = -0.5 / zn2;
        let m_z = zn1 * v_z;
        let denom = s + v_z;
        if !denom.is_finite() || denom <= 0.0 {
            return Ok(StepOutcome::Skipped);
        }
        let gain = weights[pos] * var[pos] / denom;
        let post_mean = mu[pos] + gain * (m_z - mu0);
        let post_var = (var[pos] - gain * weights[pos] * var[pos]).max(MIN_GAUSSIAN_VARIANCE);
        let posterior = ExpFamMessage::gaussian(post_mean, post_var)?;
        let cavity = ExpFamMessage::gaussian(mu[pos], var[pos])?;
        let proposed = posterior.divide(&cavity)?;
        Ok(self.apply(f, pos, proposed, damping, false))
    }

    /// Damps `proposed` against the current edge message and applies it
    /// unless it would make the target belief improper. Constant factors'
    /// messages are exact contributions and bypass the belief check.
    fn apply(
        &mut self,
        f: usize,
        pos: usize,
        proposed: ExpFamMessage,
        damping: f64,
        exact_contribution: bool,
    ) -> StepOutcome {
        let old = self.factors[f].to_var[pos].clone();
        let [o1, o2] = old.natural();
        let [p1, p2] = proposed.natural();
        let damped = ExpFamMessage::from_natural(
            old.family(),
            [damping * p1 + (1.0 - damping) * o1, damping * p2 + (1.0 - damping) * o2],
        )
        .expect("damped naturals are finite");

        if !exact_contribution {
            let var = self.factors[f].vars[pos];
            let new_belief = self
                .belief(var)
                .divide(&old)
                .and_then(|cav| cav.multiply(&damped))
                .expect("families match by construction");
            if !new_belief.is_proper() {
                return StepOutcome::Skipped;
            }
        }

        let [d1, d2] = damped.natural();
        let delta = (d1 - o1).abs().max((d2 - o2).abs());
        self.factors[f].to_var[pos] = damped;
        StepOutcome::Updated { delta }
    }
}

// ---- model builders ----------------------------------------------------------

/// A logistic-regression factor graph plus the indices of its variables.
///
/// Layout per observation `i`: a dot factor `z_i = x_iᵀw`, a pluggable
/// logistic factor `(z_i, p_i)`, and a constant Bernoulli observation factor
/// on `p_i`. The logistic factor's activation direction uses operator slot
/// [`LogisticGraph::Z_SLOT`] and the probability direction
/// [`LogisticGraph::P_SLOT`]; quadrature oracles are attached by default.
#[derive(Debug)]
pub struct LogisticGraph {
    pub graph: FactorGraph,
    pub w: Vec<usize>,
    pub z: Vec<usize>,
    pub p: Vec<usize>,
}

impl LogisticGraph {
    pub const Z_SLOT: usize = 0;
    pub const P_SLOT: usize = 1;

    /// Posterior (mean, variance) of each weight.
    pub fn posterior_w(&self) -> Result<Vec<(f64, f64)>> {
        self.w
            .iter()
            .map(|&v| self.graph.belief(v).mean_variance().map_err(GraphError::from))
            .collect()
    }
}

/// Builds the binary logistic regression graph
/// `y_i ∼ Bernoulli(sigmoid(x_iᵀw))` with independent Gaussian priors
/// `(mean, variance)` per weight.
pub fn build_logistic_graph(
    features: &[Vec<f64>],
    labels: &[bool],
    prior_w: &[(f64, f64)],
) -> Result<LogisticGraph> {
    let n = features.len();
    let d = prior_w.len();
    if n == 0 {
        return Err(GraphError::EmptyDataset);
    }
    if d == 0 || labels.len() != n {
        return Err(GraphError::DimensionMismatch {
            got: if d == 0 { 0 } else { labels.len() },
            expected: if d == 0 { 1 } else { n },
        });
    }
    if let Some(row) = features.iter().find(|r| r.len() != d) {
        return Err(GraphError::DimensionMismatch { got: row.len(), expected: d });
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GraphError::NonFiniteInput("feature matrix"));
    }

    let mut graph = FactorGraph::new();
    let w: Vec<usize> = prior_w
        .iter()
        .enumerate()
        .map(|(j, &(mean, variance))| {
            let prior = ExpFamMessage::gaussian(mean, variance)
                .map_err(|_| GraphError::ImproperParameters)?;
            graph.add_variable(format!("w{j}"), Family::Gaussian, prior)
        })
        .collect::<Result<_>>()?;

    let mut z = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    let mut schedule = Vec::new();
    for (i, (row, &label)) in features.iter().zip(labels).enumerate() {
        let zi = graph.add_variable(
            format!("z{i}"),
            Family::Gaussian,
            ExpFamMessage::uniform(Family::Gaussian),
        )?;
        let pi = graph.add_variable(
            format!("p{i}"),
            Family::Beta,
            ExpFamMessage::uniform(Family::Beta),
        )?;
        z.push(zi);
        p.push(pi);

        let mut dot_vars = w.clone();
        dot_vars.push(zi);
        let dot = graph.add_factor(FactorKind::Dot { weights: row.clone() }, dot_vars)?;
        let logistic = graph.add_factor(
            FactorKind::Pluggable { slots: vec![LogisticGraph::Z_SLOT, LogisticGraph::P_SLOT] },
            vec![zi, pi],
        )?;
        // Observing y=1 contributes p¹(1-p)⁰ (a Beta(2,1) message); y=0
        // contributes Beta(1,2).
        let obs_naturals = if label { [1.0, 0.0] } else { [0.0, 1.0] };
        let obs = graph.add_factor(
            FactorKind::Constant(ExpFamMessage::from_natural(Family::Beta, obs_naturals)?),
            vec![pi],
        )?;

        schedule.push((dot, d)); // → z_i
        schedule.push((obs, 0)); // → p_i (constant)
        schedule.push((logistic, 0)); // → z_i
        schedule.push((logistic, 1)); // → p_i
        for j in 0..d {
            schedule.push((dot, j)); // → w_j
        }
    }
    graph.set_schedule(schedule)?;
    graph.attach_operator(
        LogisticGraph::Z_SLOT,
        Box::new(OracleOperator::logistic_quadrature()),
    );
    graph.attach_operator(
        LogisticGraph::P_SLOT,
        Box::new(OracleOperator::logistic_quadrature()),
    );
    Ok(LogisticGraph { graph, w, z, p })
}

/// A compound-gamma precision model plus the index of its variable.
#[derive(Debug)]
pub struct CompoundGammaGraph {
    pub graph: FactorGraph,
    pub tau: usize,
}

impl CompoundGammaGraph {
    pub const PRIOR_SLOT: usize = 0;
}

/// Builds the collapsed compound-gamma precision model: observations
/// `x_i ∼ N(0, τ⁻¹)` with the collapsed prior
/// `f(τ) = ∫ Gamma(τ; s2, r2)·Gamma(r2; s1, r1) dr2` as a single pluggable
/// factor. Likelihood factors are exact constant Gamma increments
/// `(1/2, −x_i²/2)`.
pub fn build_compound_gamma_graph(
    observations: &[f64],
    s1: f64,
    r1: f64,
    s2: f64,
) -> Result<CompoundGammaGraph> {
    if observations.is_empty() {
        return Err(GraphError::EmptyDataset);
    }
    if observations.iter().any(|x| !x.is_finite()) {
        return Err(GraphError::NonFiniteInput("observations"));
    }
    if !(s1 > 0.0 && r1 > 0.0 && s2 > 0.0)
        || !(s1.is_finite() && r1.is_finite() && s2.is_finite())
    {
        return Err(GraphError::ImproperParameters);
    }

    let mut graph = FactorGraph::new();
    let tau =
        graph.add_variable("tau", Family::Gamma, ExpFamMessage::uniform(Family::Gamma))?;
    let mut schedule = Vec::new();
    for &x in observations {
        let lik = graph.add_factor(
            FactorKind::Constant(ExpFamMessage::from_natural(
                Family::Gamma,
                [0.5, -0.5 * x * x],
            )?),
            vec![tau],
        )?;
        schedule.push((lik, 0));
    }
    let prior = graph.add_factor(
        FactorKind::Pluggable { slots: vec![CompoundGammaGraph::PRIOR_SLOT] },
        vec![tau],
    )?;
    schedule.push((prior, 0));
    graph.set_schedule(schedule)?;
    graph.attach_operator(
        CompoundGammaGraph::PRIOR_SLOT,
        Box::new(OracleOperator::compound_gamma(s1, r1, s2)),
    );
    Ok(CompoundGammaGraph { graph, tau })
}
