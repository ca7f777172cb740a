//! The uncertainty-gated just-in-time message operator.
//!
//! A [`JitOperator`] wraps the whole learning pipeline behind the
//! [`MessageOperator`] interface: a two-stage random feature map over
//! incoming message tuples, a Bayesian linear regressor from features to
//! target statistics, and a numerical oracle it falls back on whenever its
//! own predictive uncertainty is too high.
//!
//! Lifecycle: during *warm-up* every invocation consults the oracle and
//! buffers the (tuple, target) pair; once `minibatch_size` pairs are
//! buffered the kernel widths are chosen by the median heuristic, the
//! feature map is built, and the regressor is batch-fit. After that, each
//! invocation predicts the target statistics and their per-output log
//! predictive variances; the oracle is consulted — and the regressor
//! updated online, rank-1 — only when some log variance exceeds its
//! threshold `τ`, or when a confident prediction fails to convert into a
//! message (forced fallback). One operator instance serves one outgoing
//! direction of one factor type; handing it from problem to problem
//! transfers ownership.

use crate::bayes::{BayesError, RegressorState};
use crate::expfam::{
    project_from_suffstats, ExpFamError, ExpFamMessage, Family, SuffStats,
};
use crate::features::{median_heuristic, FeatureError, FeatureMap, MessageTuple};
use crate::graph::{MessageOperator, OperatorOutput, TargetMode};
use crate::numeric::derive_seed;
use crate::oracle::{
    is_project, quadrature_project, ForwardSampler, OracleError, Proposal, TargetVar,
    TiltedFactor,
};
use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use thiserror::Error;

/// Format tag written into every persisted operator file.
pub const OPERATOR_FORMAT: &str = "kjit-operator-v1";

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("warm-up requires exactly {expected} records, got {got}")]
    WarmupSizeMismatch { got: usize, expected: usize },
    #[error("operator is already trained")]
    AlreadyTrained,
    #[error("operator has not completed warm-up")]
    NotTrained,
    #[error("record {index} does not match the first record's shape or families")]
    InconsistentRecords { index: usize },
    #[error("oracle failed: {0}")]
    Oracle(#[from] OracleError),
    #[error("regression failed: {0}")]
    Regression(#[from] BayesError),
    #[error("feature map failed: {0}")]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Message(#[from] ExpFamError),
    #[error("operator file i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("operator file is not valid: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("incompatible operator file: {found}")]
    VersionMismatch { found: String },
}

pub type Result<T> = std::result::Result<T, OperatorError>;

/// Hyperparameters of one operator instance. The default is the logistic
/// just-in-time configuration: `D_in = 300`, `D_out = 500`, threshold
/// `τ = −8.5` on the log predictive variance, minibatch 300, observation
/// noise `σ_y² = 10⁻⁴`, prior weight variance `σ₀² = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Default log-variance threshold, applied to every output dimension.
    pub threshold: f64,
    pub minibatch_size: usize,
    pub sigma_y2: f64,
    pub sigma_02: f64,
    pub seed: u64,
    pub target_mode: TargetMode,
}

impl Default for JitConfig {
    fn default() -> Self {
        JitConfig {
            d_in: 300,
            d_out: 500,
            threshold: -8.5,
            minibatch_size: 300,
            sigma_y2: 1e-4,
            sigma_02: 1.0,
            seed: 0,
            target_mode: TargetMode::Belief,
        }
    }
}

/// Which numerical oracle backs the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleSpec {
    LogisticQuadrature,
    LogisticImportance(Proposal),
    CompoundGammaQuadrature { s1: f64, r1: f64, s2: f64 },
}

impl OracleSpec {
    pub fn project(
        &self,
        incoming: &MessageTuple,
        target: TargetVar,
        rng: &mut dyn RngCore,
    ) -> std::result::Result<SuffStats, OracleError> {
        match self {
            OracleSpec::LogisticQuadrature => {
                quadrature_project(incoming, &TiltedFactor::Logistic, target)
            }
            OracleSpec::LogisticImportance(proposal) => {
                is_project(incoming, &ForwardSampler::Logistic, proposal, target, rng)
            }
            OracleSpec::CompoundGammaQuadrature { s1, r1, s2 } => quadrature_project(
                incoming,
                &TiltedFactor::CompoundGamma { s1: *s1, r1: *r1, s2: *s2 },
                target,
            ),
        }
    }
}

/// One training pair: the incoming tuple (kept verbatim for feature
/// extraction and diagnostics) and its oracle-computed target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorRecord {
    pub tuple: MessageTuple,
    /// Projected-belief statistics in [`TargetMode::Belief`]; outgoing
    /// natural parameters in [`TargetMode::Outgoing`].
    pub targets: SuffStats,
}

/// One post-warm-up invocation in the uncertainty trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 1-based invocation index over the operator's lifetime.
    pub invocation: usize,
    /// Log predictive variance of the first output dimension.
    pub log_variance: f64,
    pub used_oracle: bool,
}

/// Lifetime counters. For a freshly constructed operator,
/// `variance_trace.len() == invocations − warmup_invocations`; loading a
/// persisted operator restores the counters but starts a fresh trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorStats {
    pub invocations: usize,
    pub oracle_queries: usize,
    pub warmup_invocations: usize,
    pub variance_trace: Vec<TraceEntry>,
}

/// What [`JitOperator::propose_message`] returns.
#[derive(Debug, Clone, PartialEq)]
pub struct JitProposal {
    pub outgoing: ExpFamMessage,
    /// The statistics the outgoing message was built from (predicted or
    /// oracle-computed, per [`OperatorRecord::targets`] semantics).
    pub target_stats: SuffStats,
    /// Per-output log predictive variances; empty during warm-up.
    pub log_variances: Vec<f64>,
    pub used_oracle: bool,
}

enum Phase {
    Warmup { buffer: Vec<OperatorRecord> },
    Trained(TrainedState),
}

struct TrainedState {
    feature_map: FeatureMap,
    regressor: RegressorState,
    /// Per-output log-variance thresholds.
    thresholds: Vec<f64>,
    target_family: Family,
}

pub struct JitOperator {
    config: JitConfig,
    oracle: OracleSpec,
    phase: Phase,
    stats: OperatorStats,
}

impl std::fmt::Debug for JitOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JitOperator")
            .field("config", &self.config)
            .field("oracle", &self.oracle)
            .field("trained", &self.is_trained())
            .field("stats", &self.stats)
            .finish()
    }
}

/// On-disk representation.
#[derive(Serialize, Deserialize)]
struct PersistedOperator {
    format: String,
    config: JitConfig,
    oracle: OracleSpec,
    feature_map: FeatureMap,
    regressor: RegressorState,
    thresholds: Vec<f64>,
    target_family: Family,
    invocations: usize,
    oracle_queries: usize,
    warmup_invocations: usize,
}

impl JitOperator {
    pub fn new(config: JitConfig, oracle: OracleSpec) -> Self {
        JitOperator { config, oracle, phase: Phase::Warmup { buffer: Vec::new() }, stats: OperatorStats::default() }
    }

    pub fn config(&self) -> &JitConfig {
        &self.config
    }

    pub fn oracle_spec(&self) -> &OracleSpec {
        &self.oracle
    }

    pub fn stats(&self) -> &OperatorStats {
        &self.stats
    }

    pub fn is_trained(&self) -> bool {
        matches!(self.phase, Phase::Trained(_))
    }

    /// Oracle pairs still needed before the batch fit happens.
    pub fn warmup_remaining(&self) -> usize {
        match &self.phase {
            Phase::Warmup { buffer } => self.config.minibatch_size.saturating_sub(buffer.len()),
            Phase::Trained(_) => 0,
        }
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        match &self.phase {
            Phase::Trained(t) => Some(&t.thresholds),
            Phase::Warmup { .. } => None,
        }
    }

    /// Overrides the per-output thresholds of a trained operator.
    pub fn set_thresholds(&mut self, thresholds: Vec<f64>) -> Result<()> {
        let Phase::Trained(t) = &mut self.phase else {
            return Err(OperatorError::NotTrained);
        };
        if thresholds.len() != t.thresholds.len() || thresholds.iter().any(|v| !v.is_finite()) {
            return Err(OperatorError::VersionMismatch {
                found: format!("{} thresholds for {} outputs", thresholds.len(), t.thresholds.len()),
            });
        }
        t.thresholds = thresholds;
        Ok(())
    }

    /// Clears the variance trace (e.g. between problems) without touching
    /// the learned state or the lifetime counters.
    pub fn take_variance_trace(&mut self) -> Vec<TraceEntry> {
        std::mem::take(&mut self.stats.variance_trace)
    }

    /// Proposes `m_{f→V}`. During warm-up this always consults the oracle
    /// and buffers the pair (fitting once the minibatch is full); afterwards
    /// the oracle is consulted only when some output's log predictive
    /// variance exceeds its threshold or a confident prediction cannot be
    /// converted into a message (infeasible statistics — forced fallback,
    /// never a crash). Oracle consultations update the regressor online.
    pub fn propose_message(
        &mut self,
        incoming: &MessageTuple,
        target: TargetVar,
        cavity: &ExpFamMessage,
        rng: &mut dyn RngCore,
    ) -> Result<JitProposal> {
        self.stats.invocations += 1;

        if matches!(self.phase, Phase::Warmup { .. }) {
            self.stats.warmup_invocations += 1;
            self.stats.oracle_queries += 1;
            let (target_stats, outgoing) =
                oracle_pass(&self.oracle, self.config.target_mode, incoming, target, cavity, rng)?;
            let full = {
                let Phase::Warmup { buffer } = &mut self.phase else { unreachable!() };
                buffer.push(OperatorRecord { tuple: incoming.clone(), targets: target_stats });
                buffer.len() >= self.config.minibatch_size
            };
            if full {
                let Phase::Warmup { buffer } = &mut self.phase else { unreachable!() };
                let records = std::mem::take(buffer);
                if let Err(e) = self.fit(&records) {
                    self.phase = Phase::Warmup { buffer: records };
                    return Err(e);
                }
            }
            return Ok(JitProposal {
                outgoing,
                target_stats,
                log_variances: Vec::new(),
                used_oracle: true,
            });
        }

        let mode = self.config.target_mode;
        let Phase::Trained(trained) = &mut self.phase else { unreachable!() };
        let x = trained.feature_map.features(incoming)?;
        let (pred_mean, pred_var) = trained.regressor.predict(&x)?;
        let log_variances: Vec<f64> = pred_var.iter().map(|v| v.ln()).collect();
        let uncertain = log_variances
            .iter()
            .zip(&trained.thresholds)
            .any(|(lv, tau)| lv > tau);

        let predicted = SuffStats::new(trained.target_family, [pred_mean[0], pred_mean[1]]);
        let confident_message = if uncertain {
            None
        } else {
            message_from_stats(mode, &predicted, cavity).ok()
        };

        let (target_stats, outgoing, used_oracle) = match confident_message {
            Some(outgoing) => (predicted, outgoing, false),
            None => {
                let (stats, outgoing) =
                    oracle_pass(&self.oracle, mode, incoming, target, cavity, rng)?;
                let y = DVector::from_row_slice(&stats.values);
                trained.regressor.online_update(&x, &y)?;
                (stats, outgoing, true)
            }
        };
        if used_oracle {
            self.stats.oracle_queries += 1;
        }
        self.stats.variance_trace.push(TraceEntry {
            invocation: self.stats.invocations,
            log_variance: log_variances[0],
            used_oracle,
        });
        Ok(JitProposal { outgoing, target_stats, log_variances, used_oracle })
    }

    /// Fits from an externally collected batch (exactly `minibatch_size`
    /// records) instead of buffering through live invocations.
    pub fn warmup_fit(&mut self, collected: &[OperatorRecord]) -> Result<()> {
        if self.is_trained() {
            return Err(OperatorError::AlreadyTrained);
        }
        if collected.len() != self.config.minibatch_size {
            return Err(OperatorError::WarmupSizeMismatch {
                got: collected.len(),
                expected: self.config.minibatch_size,
            });
        }
        self.fit(collected)
    }

    /// Median heuristic → feature map → batch fit; leaves warm-up.
    fn fit(&mut self, records: &[OperatorRecord]) -> Result<()> {
        let first = &records[0];
        let target_family = first.targets.family;
        for (index, r) in records.iter().enumerate() {
            let same_shape = r.tuple.arity() == first.tuple.arity()
                && r.targets.family == target_family
                && r.tuple
                    .messages()
                    .iter()
                    .zip(first.tuple.messages())
                    .all(|(a, b)| a.family() == b.family())
                && r.targets.values.iter().all(|v| v.is_finite());
            if !same_shape {
                return Err(OperatorError::InconsistentRecords { index });
            }
        }

        let tuples: Vec<MessageTuple> = records.iter().map(|r| r.tuple.clone()).collect();
        let heuristic =
            median_heuristic(&tuples, self.config.d_in, derive_seed(self.config.seed, 3))?;
        let feature_map = FeatureMap::new(
            self.config.seed,
            self.config.d_in,
            self.config.d_out,
            &heuristic.widths,
        )?;
        let x = feature_map.feature_matrix(&tuples)?;
        let y = DMatrix::from_fn(2, records.len(), |i, j| records[j].targets.values[i]);
        let regressor =
            RegressorState::batch_fit(&x, &y, self.config.sigma_02, self.config.sigma_y2)?;
        let thresholds = vec![self.config.threshold; 2];
        self.phase =
            Phase::Trained(TrainedState { feature_map, regressor, thresholds, target_family });
        Ok(())
    }

    /// Predicted target statistics and per-output log variances, without
    /// side effects. Errors with [`OperatorError::NotTrained`] in warm-up.
    pub fn predict_stats(&self, incoming: &MessageTuple) -> Result<(SuffStats, Vec<f64>)> {
        let Phase::Trained(trained) = &self.phase else {
            return Err(OperatorError::NotTrained);
        };
        let x = trained.feature_map.features(incoming)?;
        let (mean, var) = trained.regressor.predict(&x)?;
        Ok((
            SuffStats::new(trained.target_family, [mean[0], mean[1]]),
            var.iter().map(|v| v.ln()).collect(),
        ))
    }

    /// Persists a trained operator. The file is self-describing and
    /// versioned; the variance trace is a run artifact and is not stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let Phase::Trained(trained) = &self.phase else {
            return Err(OperatorError::NotTrained);
        };
        let persisted = PersistedOperator {
            format: OPERATOR_FORMAT.to_string(),
            config: self.config.clone(),
            oracle: self.oracle.clone(),
            feature_map: trained.feature_map.clone(),
            regressor: trained.regressor.clone(),
            thresholds: trained.thresholds.clone(),
            target_family: trained.target_family,
            invocations: self.stats.invocations,
            oracle_queries: self.stats.oracle_queries,
            warmup_invocations: self.stats.warmup_invocations,
        };
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer(file, &persisted)?;
        Ok(())
    }

    /// Loads a persisted operator; predictions and variances are bit-exact
    /// with the operator that was saved.
    pub fn load(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let p: PersistedOperator = serde_json::from_reader(file)?;
        if p.format != OPERATOR_FORMAT {
            return Err(OperatorError::VersionMismatch {
                found: format!("format {:?}, expected {:?}", p.format, OPERATOR_FORMAT),
            });
        }
        if p.regressor.dim() != p.feature_map.d_out() {
            return Err(OperatorError::VersionMismatch {
                found: format!(
                    "feature dimension {} does not match regressor dimension {}",
                    p.feature_map.d_out(),
                    p.regressor.dim()
                ),
            });
        }
        if p.thresholds.len() != p.regressor.outputs() {
            return Err(OperatorError::VersionMismatch {
                found: format!(
                    "{} thresholds for {} regression outputs",
                    p.thresholds.len(),
                    p.regressor.outputs()
                ),
            });
        }
        Ok(JitOperator {
            config: p.config,
            oracle: p.oracle,
            phase: Phase::Trained(TrainedState {
                feature_map: p.feature_map,
                regressor: p.regressor,
                thresholds: p.thresholds,
                target_family: p.target_family,
            }),
            stats: OperatorStats {
                invocations: p.invocations,
                oracle_queries: p.oracle_queries,
                warmup_invocations: p.warmup_invocations,
                variance_trace: Vec::new(),
            },
        })
    }
}

/// Consults the oracle and builds both the regression target and the
/// outgoing message (`divide(project(stats), cavity)`).
fn oracle_pass(
    oracle: &OracleSpec,
    mode: TargetMode,
    incoming: &MessageTuple,
    target: TargetVar,
    cavity: &ExpFamMessage,
    rng: &mut dyn RngCore,
) -> Result<(SuffStats, ExpFamMessage)> {
    let stats = oracle.project(incoming, target, rng)?;
    let belief = project_from_suffstats(&stats)?;
    let outgoing = belief.divide(cavity)?;
    let target_stats = match mode {
        TargetMode::Belief => stats,
        TargetMode::Outgoing => SuffStats::new(outgoing.family(), outgoing.natural()),
    };
    Ok((target_stats, outgoing))
}

/// Converts target statistics into the outgoing message. In belief mode the
/// statistics must be feasible (else the caller falls back to the oracle);
/// in outgoing mode they are natural parameters already.
fn message_from_stats(
    mode: TargetMode,
    stats: &SuffStats,
    cavity: &ExpFamMessage,
) -> std::result::Result<ExpFamMessage, ExpFamError> {
    match mode {
        TargetMode::Belief => project_from_suffstats(stats)?.divide(cavity),
        TargetMode::Outgoing => ExpFamMessage::from_natural(stats.family, stats.values),
    }
}

impl MessageOperator for JitOperator {
    fn propose(
        &mut self,
        incoming: &MessageTuple,
        target: TargetVar,
        cavity: &ExpFamMessage,
        rng: &mut dyn RngCore,
    ) -> std::result::Result<OperatorOutput, Box<dyn std::error::Error + Send + Sync>> {
        let p = self.propose_message(incoming, target, cavity, rng)?;
        Ok(OperatorOutput {
            outgoing: p.outgoing,
            target_stats: p.target_stats,
            used_oracle: p.used_oracle,
            log_variance: p.log_variances.first().copied(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tuple(mean: f64, variance: f64, alpha: f64, beta: f64) -> MessageTuple {
        MessageTuple::pair(
            ExpFamMessage::gaussian(mean, variance).unwrap(),
            ExpFamMessage::beta(alpha, beta).unwrap(),
        )
        .unwrap()
    }

    fn test_config(minibatch: usize) -> JitConfig {
        JitConfig {
            d_in: 60,
            d_out: 100,
            minibatch_size: minibatch,
            seed: 7,
            ..JitConfig::default()
        }
    }

    /// A small pool of logistic-style incoming tuples: the same few
    /// messages recur, as they do across EP iterations.
    fn training_stream(copies: usize) -> Vec<MessageTuple> {
        let base = [
            tuple(-1.2, 0.8, 2.0, 1.0),
            tuple(0.3, 1.5, 1.0, 2.0),
            tuple(1.1, 0.6, 2.0, 1.0),
            tuple(-0.4, 2.2, 1.0, 2.0),
        ];
        let mut out = Vec::new();
        for _ in 0..copies {
            out.extend(base.iter().cloned());
        }
        out
    }

    fn cavity_of(t: &MessageTuple) -> ExpFamMessage {
        t.messages()[0].clone()
    }

    fn warmed_operator(minibatch: usize) -> JitOperator {
        let mut op = JitOperator::new(test_config(minibatch), OracleSpec::LogisticQuadrature);
        let stream = training_stream(minibatch / 4);
        let mut r = rng(1);
        for t in &stream {
            let p = op
                .propose_message(t, TargetVar::Input, &cavity_of(t), &mut r)
                .unwrap();
            assert!(p.used_oracle);
        }
        assert!(op.is_trained());
        op
    }

    #[test]
    fn warmup_consults_the_oracle_every_time() {
        let mut op = JitOperator::new(test_config(8), OracleSpec::LogisticQuadrature);
        let mut r = rng(2);
        for (i, t) in training_stream(2).iter().enumerate() {
            assert!(!op.is_trained());
            assert_eq!(op.warmup_remaining(), 8 - i);
            let p = op
                .propose_message(t, TargetVar::Input, &cavity_of(t), &mut r)
                .unwrap();
            assert!(p.used_oracle);
            assert!(p.log_variances.is_empty());
        }
        assert!(op.is_trained());
        assert_eq!(op.warmup_remaining(), 0);
        assert_eq!(op.stats().invocations, 8);
        assert_eq!(op.stats().oracle_queries, 8);
        assert_eq!(op.stats().warmup_invocations, 8);
        assert!(op.stats().variance_trace.is_empty());
    }

    #[test]
    fn repeat_queries_become_confident_near_the_noise_floor() {
        let mut op = warmed_operator(20);
        let t = tuple(0.3, 1.5, 1.0, 2.0);
        let p = op
            .propose_message(&t, TargetVar::Input, &cavity_of(&t), &mut rng(3))
            .unwrap();
        assert!(!p.used_oracle, "training tuple should be predicted without the oracle");
        // Predictive variance approaches the observation noise floor
        // σ_y² = 10⁻⁴ (log ≈ −9.2), below the −8.5 threshold.
        assert!(p.log_variances[0] < -8.5, "log variance {}", p.log_variances[0]);
        assert!(p.log_variances[0] >= 1e-4_f64.ln() - 1e-9);
        assert_eq!(op.stats().variance_trace.len(), 1);
        assert_eq!(
            op.stats().variance_trace.len(),
            op.stats().invocations - op.stats().warmup_invocations
        );
    }

    #[test]
    fn off_support_queries_trigger_the_oracle() {
        let mut op = warmed_operator(20);
        // Training means live in [−1.2, 1.1] with prior-scale variance ~1;
        // shift the mean by ten prior standard deviations.
        let t = tuple(10.0, 1.5, 1.0, 2.0);
        let p = op
            .propose_message(&t, TargetVar::Input, &cavity_of(&t), &mut rng(4))
            .unwrap();
        assert!(p.used_oracle);
        assert!(p.log_variances[0] > -8.5, "log variance {}", p.log_variances[0]);
    }

    #[test]
    fn confident_predictions_match_the_structural_identity() {
        let mut op = warmed_operator(20);
        let t = tuple(-1.2, 0.8, 2.0, 1.0);
        let cavity = cavity_of(&t);
        let p = op.propose_message(&t, TargetVar::Input, &cavity, &mut rng(5)).unwrap();
        assert!(!p.used_oracle);
        let rebuilt = project_from_suffstats(&p.target_stats)
            .unwrap()
            .divide(&cavity)
            .unwrap();
        assert_eq!(p.outgoing, rebuilt);
    }

    #[test]
    fn infeasible_confident_prediction_falls_back_to_the_oracle() {
        // Fit on targets that are finite but infeasible as Gaussian moment
        // statistics (E[x²] < E[x]²); any confident prediction then fails
        // to project and must fall back.
        let mut op = JitOperator::new(test_config(20), OracleSpec::LogisticQuadrature);
        let records: Vec<OperatorRecord> = training_stream(5)
            .into_iter()
            .map(|tuple| OperatorRecord {
                tuple,
                targets: SuffStats::new(Family::Gaussian, [0.0, -1.0]),
            })
            .collect();
        op.warmup_fit(&records).unwrap();
        let t = tuple(0.3, 1.5, 1.0, 2.0);
        let p = op
            .propose_message(&t, TargetVar::Input, &cavity_of(&t), &mut rng(6))
            .unwrap();
        assert!(p.used_oracle, "infeasible prediction must force the oracle");
        assert!(p.log_variances[0] < -8.5, "the gate itself was confident");
        assert!(p.outgoing.natural().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lowering_thresholds_never_reduces_oracle_queries() {
        let stream: Vec<MessageTuple> = (0..30)
            .map(|i| tuple(-2.0 + 0.13 * i as f64, 0.5 + 0.05 * i as f64, 2.0, 1.0))
            .collect();
        let replay = |tau_shift: f64| {
            let mut op = warmed_operator(20);
            let base: Vec<f64> =
                op.thresholds().unwrap().iter().map(|t| t + tau_shift).collect();
            op.set_thresholds(base).unwrap();
            let before = op.stats().oracle_queries;
            let mut r = rng(7);
            for t in &stream {
                op.propose_message(t, TargetVar::Input, &cavity_of(t), &mut r).unwrap();
            }
            op.stats().oracle_queries - before
        };
        let queries_at_tau = replay(0.0);
        let queries_lowered = replay(-1.0);
        assert!(
            queries_lowered >= queries_at_tau,
            "lowered τ made {queries_lowered} queries vs {queries_at_tau}"
        );
    }

    #[test]
    fn stationary_stream_needs_fewer_oracle_calls_over_time() {
        let mut op = warmed_operator(20);
        let problem: Vec<MessageTuple> = (0..25)
            .map(|i| tuple(-2.5 + 0.2 * i as f64, 0.4 + 0.06 * i as f64, 1.0, 2.0))
            .collect();
        let mut per_sweep = Vec::new();
        let mut r = rng(8);
        for _ in 0..6 {
            let before = op.stats().oracle_queries;
            for t in &problem {
                op.propose_message(t, TargetVar::Input, &cavity_of(t), &mut r).unwrap();
            }
            per_sweep.push(op.stats().oracle_queries - before);
        }
        assert!(per_sweep[0] > 0, "a new problem region should trigger queries");
        assert!(
            per_sweep.last().unwrap() <= &per_sweep[0],
            "oracle usage should not grow on a stationary stream: {per_sweep:?}"
        );
        assert_eq!(*per_sweep.last().unwrap(), 0, "stream should be fully absorbed");
    }

    #[test]
    fn distribution_shift_raises_the_predictive_variance() {
        let mut op = warmed_operator(20);
        let stream_a: Vec<MessageTuple> =
            (0..20).map(|i| tuple(-1.5 + 0.15 * i as f64, 1.0, 2.0, 1.0)).collect();
        let stream_b: Vec<MessageTuple> =
            (0..20).map(|i| tuple(6.0 + 0.15 * i as f64, 0.1, 1.0, 3.0)).collect();
        let mut r = rng(9);
        for t in &stream_a {
            op.propose_message(t, TargetVar::Input, &cavity_of(t), &mut r).unwrap();
        }
        let last_a: Vec<f64> = op
            .stats()
            .variance_trace
            .iter()
            .rev()
            .take(20)
            .map(|e| e.log_variance)
            .collect();
        for t in &stream_b {
            op.propose_message(t, TargetVar::Input, &cavity_of(t), &mut r).unwrap();
        }
        let first_b: Vec<f64> = op
            .stats()
            .variance_trace
            .iter()
            .rev()
            .take(20)
            .map(|e| e.log_variance)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&first_b) > mean(&last_a),
            "shift should raise mean log variance: {} vs {}",
            mean(&first_b),
            mean(&last_a)
        );
    }

    #[test]
    fn warmup_fit_validates_its_batch() {
        let mut op = JitOperator::new(test_config(8), OracleSpec::LogisticQuadrature);
        let record = OperatorRecord {
            tuple: tuple(0.0, 1.0, 1.0, 1.0),
            targets: SuffStats::new(Family::Gaussian, [0.0, 1.0]),
        };
        let err = op.warmup_fit(&vec![record.clone(); 5]).unwrap_err();
        assert!(matches!(err, OperatorError::WarmupSizeMismatch { got: 5, expected: 8 }));

        let mut batch = vec![record.clone(); 8];
        batch[3].targets = SuffStats::new(Family::Beta, [-0.5, -0.5]);
        assert!(matches!(
            op.warmup_fit(&batch).unwrap_err(),
            OperatorError::InconsistentRecords { index: 3 }
        ));

        let mut trained = warmed_operator(20);
        assert!(matches!(
            trained.warmup_fit(&vec![record; 20]).unwrap_err(),
            OperatorError::AlreadyTrained
        ));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("operator.json");
        let mut op = warmed_operator(20);
        op.save(&path).unwrap();
        let mut loaded = JitOperator::load(&path).unwrap();

        let probes =
            [tuple(0.0, 1.0, 1.5, 1.5), tuple(-3.0, 0.3, 1.0, 4.0), tuple(2.2, 5.0, 3.0, 1.0)];
        for t in &probes {
            let (s1, v1) = op.predict_stats(t).unwrap();
            let (s2, v2) = loaded.predict_stats(t).unwrap();
            assert_eq!(s1, s2);
            assert_eq!(v1, v2);
        }
        assert_eq!(loaded.stats().invocations, op.stats().invocations);

        // Updating both through the same invocation stream keeps them in
        // lockstep, as if the run had never been interrupted.
        let t = tuple(4.0, 0.8, 2.0, 2.0);
        let a = op
            .propose_message(&t, TargetVar::Input, &cavity_of(&t), &mut rng(11))
            .unwrap();
        let b = loaded
            .propose_message(&t, TargetVar::Input, &cavity_of(&t), &mut rng(11))
            .unwrap();
        assert_eq!(a.used_oracle, b.used_oracle);
        assert_eq!(a.target_stats, b.target_stats);
        assert_eq!(a.outgoing, b.outgoing);
        let (sa, va) = op.predict_stats(&t).unwrap();
        let (sb, vb) = loaded.predict_stats(&t).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(va, vb);
    }

    #[test]
    fn incompatible_operator_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("operator.json");
        let op = warmed_operator(20);
        op.save(&path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let stale = text.replace(OPERATOR_FORMAT, "kjit-operator-v0");
        std::fs::write(&path, stale).unwrap();
        assert!(matches!(
            JitOperator::load(&path).unwrap_err(),
            OperatorError::VersionMismatch { .. }
        ));

        // Structural mismatch: truncate the threshold vector.
        op.save(&path).unwrap();
        let mut value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        value["thresholds"] = serde_json::json!([-8.5]);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(
            JitOperator::load(&path).unwrap_err(),
            OperatorError::VersionMismatch { .. }
        ));
    }

    #[test]
    fn saving_before_training_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let op = JitOperator::new(test_config(8), OracleSpec::LogisticQuadrature);
        assert!(matches!(
            op.save(&dir.path().join("op.json")).unwrap_err(),
            OperatorError::NotTrained
        ));
    }

    #[test]
    fn outgoing_mode_regresses_the_message_itself() {
        let config = JitConfig {
            d_in: 40,
            d_out: 60,
            minibatch_size: 10,
            seed: 13,
            target_mode: TargetMode::Outgoing,
            ..JitConfig::default()
        };
        let mut op = JitOperator::new(
            config,
            OracleSpec::CompoundGammaQuadrature { s1: 1.0, r1: 1.0, s2: 1.0 },
        );
        let mut r = rng(14);
        // Conjugate-style incoming messages m_{τ→f} = Gamma(1 + n/2, Σx²/2).
        for i in 0..10 {
            let n = 10.0 + 8.0 * i as f64;
            let incoming = ExpFamMessage::gamma(1.0 + n / 2.0, 0.45 * n).unwrap();
            let t = MessageTuple::single(incoming.clone()).unwrap();
            let p = op.propose_message(&t, TargetVar::Output, &incoming, &mut r).unwrap();
            assert!(p.used_oracle);
            // In outgoing mode the recorded target is the outgoing message's
            // natural parameters.
            assert_eq!(p.target_stats.values, p.outgoing.natural());
        }
        assert!(op.is_trained());

        // A confident prediction reconstructs the message directly from the
        // predicted naturals.
        let incoming = ExpFamMessage::gamma(1.0 + 25.0, 0.45 * 50.0).unwrap();
        let t = MessageTuple::single(incoming.clone()).unwrap();
        let p = op.propose_message(&t, TargetVar::Output, &incoming, &mut rng(15)).unwrap();
        if !p.used_oracle {
            let rebuilt =
                ExpFamMessage::from_natural(Family::Gamma, p.target_stats.values).unwrap();
            assert_eq!(p.outgoing, rebuilt);
        }
        let (stats, log_vars) = op.predict_stats(&t).unwrap();
        assert_eq!(stats.family, Family::Gamma);
        assert_eq!(log_vars.len(), 2);
    }

    #[test]
    fn predictions_track_the_oracle_on_training_support() {
        // Train on a dense grid of distinct tuples so interpolation is
        // meaningful, then query a held-out midpoint.
        let mut op = JitOperator::new(test_config(24), OracleSpec::LogisticQuadrature);
        let mut r = rng(16);
        for i in 0..24 {
            let mean = -2.0 + 4.0 * (i as f64) / 23.0;
            let variance = 0.6 + 0.06 * (i % 7) as f64;
            let t = if i % 2 == 0 {
                tuple(mean, variance, 2.0, 1.0)
            } else {
                tuple(mean, variance, 1.0, 2.0)
            };
            op.propose_message(&t, TargetVar::Input, &cavity_of(&t), &mut r).unwrap();
        }
        assert!(op.is_trained());
        let t = tuple(0.5, 0.8, 2.0, 1.0);
        let (predicted, _) = op.predict_stats(&t).unwrap();
        let oracle_stats = OracleSpec::LogisticQuadrature
            .project(&t, TargetVar::Input, &mut rng(17))
            .unwrap();
        assert_abs_diff_eq!(predicted.values[0], oracle_stats.values[0], epsilon = 0.05);
        assert_abs_diff_eq!(predicted.values[1], oracle_stats.values[1], epsilon = 0.15);
    }
}
