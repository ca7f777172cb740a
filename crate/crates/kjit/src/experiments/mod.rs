//! Runnable experiment harnesses behind the `kjit` binary.
//!
//! Each submodule implements one experiment: it computes a typed report
//! (so tests can assert on numbers directly) and writes the corresponding
//! CSV/summary artifacts through [`crate::report`]. [`run_experiment`]
//! dispatches on [`ExperimentId`].
//!
//! Conventions shared by all experiments:
//!
//! * Determinism — every random decision flows from the config seed through
//!   [`derive_seed`] with a module-local stream number; rerunning a config
//!   yields byte-identical CSVs.
//! * Stage-tagged failures — any error is wrapped as
//!   `experiment/stage: cause` so a failing run names where it died.
//! * Fixed sweep counts — EP runs use `convergence_tol = 0`, so every
//!   problem performs exactly `model.ep_iterations` sweeps and per-sweep
//!   statistics line up across problems.

use crate::bayes::RegressorState;
use crate::config::{ExperimentConfig, ExperimentId, OracleChoice};
use crate::data::Dataset;
use crate::expfam::{project_from_suffstats, ExpFamMessage, Family, SuffStats};
use crate::features::alt::MvFeatureMap;
use crate::features::{
    embedding_inner, exact_embedding_kernel, mv_exact_kernel, FeatureError, FeatureMap,
    KernelWidths, MessageTuple, Stage1Map,
};
use crate::graph::{
    build_logistic_graph, EpOptions, LogisticGraph, MessageLogEntry, TargetMode,
};
use crate::numeric::derive_seed;
use crate::operator::{JitConfig, JitOperator, OperatorRecord, OracleSpec};
use crate::oracle::Proposal;
use crate::report::ReportError;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use thiserror::Error;

pub mod batch;
pub mod compound_gamma;
pub mod feature_study;
pub mod jit_logistic;
pub mod kernel_compare;
pub mod uci;
pub mod uncertainty;

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// A module error, tagged with the experiment and pipeline stage that
    /// raised it.
    #[error("{experiment}/{stage}: {source}")]
    Stage {
        experiment: &'static str,
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Plain-text condition failure (pool too small, no usable rows, …).
#[derive(Debug, Error)]
#[error("{0}")]
pub(crate) struct StageMessage(pub String);

pub(crate) trait StageExt<T> {
    /// Tags the error with `experiment/stage`.
    fn stage(self, experiment: &'static str, stage: &'static str) -> Result<T>;
}

impl<T, E> StageExt<T> for std::result::Result<T, E>
where
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    fn stage(self, experiment: &'static str, stage: &'static str) -> Result<T> {
        self.map_err(|e| ExperimentError::Stage { experiment, stage, source: e.into() })
    }
}

impl StageExt<()> for ReportError {
    fn stage(self, experiment: &'static str, stage: &'static str) -> Result<()> {
        Err(ExperimentError::Stage { experiment, stage, source: Box::new(self) })
    }
}

pub(crate) fn fail(experiment: &'static str, stage: &'static str, msg: String) -> ExperimentError {
    ExperimentError::Stage { experiment, stage, source: Box::new(StageMessage(msg)) }
}

/// What every experiment hands back to the CLI.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Artifact files written, in emission order.
    pub files: Vec<PathBuf>,
    /// One- or two-line digest of the headline numbers.
    pub headline: String,
}

/// Runs the experiment named in the config and writes its artifacts into
/// the resolved output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    match cfg.experiment {
        ExperimentId::Batch => batch::run(cfg).map(|r| r.outcome),
        ExperimentId::Uncertainty => uncertainty::run(cfg).map(|r| r.outcome),
        ExperimentId::JitLogistic => jit_logistic::run(cfg).map(|r| r.outcome),
        ExperimentId::CompoundGamma => compound_gamma::run(cfg).map(|r| r.outcome),
        ExperimentId::Uci => uci::run(cfg).map(|r| r.outcome),
        ExperimentId::KernelCompare => kernel_compare::run(cfg).map(|r| r.outcome),
        ExperimentId::FeatureStudy => feature_study::run(cfg).map(|r| r.outcome),
    }
}

// ---- shared plumbing -------------------------------------------------------

/// EP options derived from the config. `convergence_tol = 0` pins the sweep
/// count so traces are comparable across problems.
pub(crate) fn ep_options(cfg: &ExperimentConfig, log_messages: bool) -> EpOptions {
    EpOptions {
        max_iters: cfg.model.ep_iterations,
        damping: cfg.model.damping,
        convergence_tol: 0.0,
        log_messages,
    }
}

/// Zero-mean unit-variance Gaussian prior on every weight.
pub(crate) fn standard_prior(d: usize) -> Vec<(f64, f64)> {
    vec![(0.0, 1.0); d]
}

/// The importance proposal described by the config's `[oracle]` section.
pub(crate) fn proposal_from(
    cfg: &ExperimentConfig,
) -> std::result::Result<Proposal, Box<dyn std::error::Error + Send + Sync>> {
    let distribution =
        ExpFamMessage::gaussian(cfg.oracle.proposal_mean, cfg.oracle.proposal_variance)?;
    Ok(Proposal::new(distribution, cfg.oracle.particles)?)
}

/// The oracle behind a learned logistic operator, per the config.
pub(crate) fn logistic_oracle_spec(
    cfg: &ExperimentConfig,
) -> std::result::Result<OracleSpec, Box<dyn std::error::Error + Send + Sync>> {
    Ok(match cfg.oracle.kind {
        OracleChoice::Quadrature => OracleSpec::LogisticQuadrature,
        OracleChoice::Importance => OracleSpec::LogisticImportance(proposal_from(cfg)?),
    })
}

/// A fresh just-in-time operator wired to the config's hyperparameters.
/// `stream` decorrelates the feature maps of coexisting operators.
pub(crate) fn build_jit_operator(
    cfg: &ExperimentConfig,
    target_mode: TargetMode,
    oracle: OracleSpec,
    stream: u64,
) -> JitOperator {
    JitOperator::new(
        JitConfig {
            d_in: cfg.operator.d_in,
            d_out: cfg.operator.d_out,
            threshold: cfg.operator.threshold,
            minibatch_size: cfg.operator.minibatch,
            sigma_y2: cfg.operator.sigma_y2,
            sigma_02: cfg.operator.sigma_02,
            seed: derive_seed(cfg.seed, stream),
            target_mode,
        },
        oracle,
    )
}

/// Message pairs collected from quadrature-oracle EP runs, split by target
/// direction: Gaussian targets belong to the activation variable, Beta
/// targets to the probability variable.
pub(crate) struct CollectedPool {
    pub input: Vec<OperatorRecord>,
    pub output: Vec<OperatorRecord>,
}

/// Runs EP with the exact quadrature operators on `datasets` fresh synthetic
/// problems and pools every recorded (incoming tuple → projected target)
/// pair from the first `iterations` sweeps.
pub(crate) fn collect_logistic_pool(
    d: usize,
    n: usize,
    datasets: usize,
    iterations: usize,
    base_seed: u64,
) -> std::result::Result<CollectedPool, Box<dyn std::error::Error + Send + Sync>> {
    let mut pool = CollectedPool { input: Vec::new(), output: Vec::new() };
    for i in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, 100 + i as u64));
        let (ds, _) = crate::data::synthetic_logistic(d, n, &mut rng);
        let lg = build_logistic_graph(&ds.features, &ds.labels, &standard_prior(d))?;
        let mut graph = lg.graph;
        for (tuple, targets) in graph.collect_training_messages(iterations, &mut rng)? {
            let record = OperatorRecord { tuple, targets };
            match record.targets.family {
                Family::Gaussian => pool.input.push(record),
                Family::Beta => pool.output.push(record),
                Family::Gamma => {}
            }
        }
    }
    Ok(pool)
}

/// Collected message pools for the config's model family, keyed by pool
/// name: `input`/`output` for the logistic factor's two directions,
/// `prior` for the compound-gamma prior slot.
pub fn collect_message_pools(
    cfg: &ExperimentConfig,
) -> Result<Vec<(&'static str, Vec<OperatorRecord>)>> {
    const EXPERIMENT: &str = "collect-messages";
    match cfg.experiment {
        ExperimentId::CompoundGamma => {
            let pool = compound_gamma::collect_pool(cfg).stage(EXPERIMENT, "compound-ep")?;
            Ok(vec![("prior", pool)])
        }
        _ => {
            let pool = collect_logistic_pool(
                cfg.model.d,
                cfg.model.n,
                cfg.model.collect_datasets,
                cfg.model.collect_iterations,
                cfg.seed,
            )
            .stage(EXPERIMENT, "logistic-ep")?;
            Ok(vec![("input", pool.input), ("output", pool.output)])
        }
    }
}

/// The oracle a freshly trained operator should consult, chosen by the
/// config's model family.
pub fn oracle_spec_for(cfg: &ExperimentConfig) -> Result<OracleSpec> {
    match cfg.experiment {
        ExperimentId::CompoundGamma => Ok(compound_gamma::oracle_spec()),
        _ => logistic_oracle_spec(cfg).stage("operator-setup", "oracle"),
    }
}

/// Shuffles `records` with the derived stream and splits off `n_train` +
/// `n_test`; errors when the pool is too small.
pub(crate) fn partition_records(
    mut records: Vec<OperatorRecord>,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> std::result::Result<(Vec<OperatorRecord>, Vec<OperatorRecord>), StageMessage> {
    if records.len() < n_train + n_test {
        return Err(StageMessage(format!(
            "collected pool has {} pairs, need {} train + {} test",
            records.len(),
            n_train,
            n_test
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let test = records.split_off(records.len() - n_test);
    records.truncate(n_train);
    Ok((records, test))
}

/// `KL(truth ‖ prediction)` between the Gaussians the two statistics project
/// to, as a log. `None` when the prediction is not projectable (improper).
pub fn gaussian_log_kl(truth: &SuffStats, pred: &SuffStats) -> Option<f64> {
    let p = project_from_suffstats(truth).ok()?;
    let q = project_from_suffstats(pred).ok()?;
    let (m1, v1) = p.mean_variance().ok()?;
    let (m2, v2) = q.mean_variance().ok()?;
    let kl = 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0);
    Some(kl.ln())
}

/// Posterior weight means of a solved logistic graph.
pub(crate) fn posterior_means(
    lg: &LogisticGraph,
) -> std::result::Result<Vec<f64>, crate::graph::GraphError> {
    Ok(lg.posterior_w()?.into_iter().map(|(m, _)| m).collect())
}

/// Fraction of points whose predicted class (activation sign) disagrees
/// with the label.
pub(crate) fn classification_error(w: &[f64], ds: &Dataset) -> f64 {
    let wrong = ds
        .features
        .iter()
        .zip(&ds.labels)
        .filter(|(x, &y)| {
            let act: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            (act > 0.0) != y
        })
        .count();
    wrong as f64 / ds.len() as f64
}

/// Shape and rate of a Gamma belief, read off its natural parameters.
pub(crate) fn gamma_shape_rate(msg: &ExpFamMessage) -> (f64, f64) {
    let [n1, n2] = msg.natural();
    (n1 + 1.0, -n2)
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Some(values[values.len() / 2])
}

/// Median absolute pairwise gaps of the per-slot means and variances over a
/// strided subsample — lengthscales for the mean–variance kernel. Zero or
/// missing medians fall back to 1 so the kernel stays defined.
pub(crate) fn mv_median_widths(tuples: &[MessageTuple]) -> (Vec<f64>, Vec<f64>) {
    const MAX_POINTS: usize = 200;
    let arity = tuples.first().map(MessageTuple::arity).unwrap_or(0);
    let step = tuples.len().div_ceil(MAX_POINTS).max(1);
    let sample: Vec<&MessageTuple> = tuples.iter().step_by(step).collect();
    let mut mean_widths = Vec::with_capacity(arity);
    let mut var_widths = Vec::with_capacity(arity);
    for slot in 0..arity {
        let coords: Vec<(f64, f64)> = sample
            .iter()
            .map(|t| t.messages()[slot].mean_variance().expect("tuple members are proper"))
            .collect();
        let mut dm = Vec::new();
        let mut dv = Vec::new();
        for i in 0..coords.len() {
            for j in (i + 1)..coords.len() {
                let gm = (coords[i].0 - coords[j].0).abs();
                let gv = (coords[i].1 - coords[j].1).abs();
                if gm > 0.0 {
                    dm.push(gm);
                }
                if gv > 0.0 {
                    dv.push(gv);
                }
            }
        }
        mean_widths.push(median(dm).unwrap_or(1.0));
        var_widths.push(median(dv).unwrap_or(1.0));
    }
    (mean_widths, var_widths)
}

// ---- kernel zoo -----------------------------------------------------------

/// One kernel under comparison: its random-feature map and the exact kernel
/// the features approximate. (The realized feature dimension is reported by
/// [`KernelEval`] after featurization.)
pub(crate) struct KernelSpec {
    pub name: &'static str,
    pub featurize: Box<
        dyn Fn(&MessageTuple) -> std::result::Result<DVector<f64>, FeatureError> + Send + Sync,
    >,
    pub exact: Box<
        dyn Fn(&MessageTuple, &MessageTuple) -> std::result::Result<f64, FeatureError>
            + Send
            + Sync,
    >,
}

/// Builds the five comparison kernels for two-message tuples, sharing the
/// median-heuristic embedding widths. `product_dim` is the per-message
/// feature count of the Kronecker-product kernel.
pub(crate) fn kernel_specs(
    widths: &KernelWidths,
    mv_widths: (Vec<f64>, Vec<f64>),
    d_in: usize,
    d_out: usize,
    product_dim: usize,
    seed: u64,
) -> std::result::Result<Vec<KernelSpec>, FeatureError> {
    let sigma2 = widths.sigma2.clone();
    let (mean_w, var_w) = mv_widths;

    let mv_map = MvFeatureMap::new(derive_seed(seed, 50), d_out, &mean_w, &var_w)?;
    let (mw, vw) = (mean_w.clone(), var_w.clone());
    let mv = KernelSpec {
        name: "mean-variance",
        featurize: Box::new(move |t| mv_map.features(t)),
        exact: Box::new(move |r, s| mv_exact_kernel(r, s, &mw, &vw)),
    };

    let joint = Stage1Map::new(derive_seed(seed, 51), d_in, &sigma2)?;
    let s2 = sigma2.clone();
    let expected_product = KernelSpec {
        name: "expected-product",
        featurize: Box::new(move |t| joint.features(t)),
        exact: Box::new(move |r, s| product_of_embedding_inners(r, s, &s2)),
    };

    let per_message = |base: u64, dim: usize| -> std::result::Result<Vec<Stage1Map>, FeatureError> {
        sigma2
            .iter()
            .enumerate()
            .map(|(l, &w)| Stage1Map::new(derive_seed(seed, base + l as u64), dim, &[w]))
            .collect()
    };

    let sum_maps = per_message(60, d_in)?;
    let s2 = sigma2.clone();
    let sum = KernelSpec {
        name: "sum",
        featurize: Box::new(move |t| crate::features::sum_features(t, &sum_maps)),
        exact: Box::new(move |r, s| sum_of_embedding_inners(r, s, &s2)),
    };

    let product_maps = per_message(70, product_dim)?;
    let s2 = sigma2.clone();
    let product = KernelSpec {
        name: "product",
        featurize: Box::new(move |t| crate::features::product_features(t, &product_maps)),
        exact: Box::new(move |r, s| product_of_embedding_inners(r, s, &s2)),
    };

    let two_stage = FeatureMap::new(derive_seed(seed, 80), d_in, d_out, widths)?;
    let w = widths.clone();
    let gaussian_joint = KernelSpec {
        name: "gaussian-joint",
        featurize: Box::new(move |t| two_stage.features(t)),
        exact: Box::new(move |r, s| exact_embedding_kernel(r, s, &w)),
    };

    Ok(vec![mv, expected_product, sum, product, gaussian_joint])
}

fn product_of_embedding_inners(
    r: &MessageTuple,
    s: &MessageTuple,
    sigma2: &[f64],
) -> std::result::Result<f64, FeatureError> {
    if r.arity() != sigma2.len() || s.arity() != sigma2.len() {
        return Err(FeatureError::ArityMismatch { got: r.arity(), expected: sigma2.len() });
    }
    let mut out = 1.0;
    for ((a, b), &w) in r.messages().iter().zip(s.messages()).zip(sigma2) {
        out *= embedding_inner(a, b, w)?;
    }
    Ok(out)
}

fn sum_of_embedding_inners(
    r: &MessageTuple,
    s: &MessageTuple,
    sigma2: &[f64],
) -> std::result::Result<f64, FeatureError> {
    if r.arity() != sigma2.len() || s.arity() != sigma2.len() {
        return Err(FeatureError::ArityMismatch { got: r.arity(), expected: sigma2.len() });
    }
    let mut out = 0.0;
    for ((a, b), &w) in r.messages().iter().zip(s.messages()).zip(sigma2) {
        out += embedding_inner(a, b, w)?;
    }
    Ok(out)
}

/// Everything `batch` and `kernel-compare` share: a partitioned message
/// pool and the five kernels sized per the config.
pub(crate) struct PreparedPool {
    pub train: Vec<OperatorRecord>,
    pub test: Vec<OperatorRecord>,
    pub specs: Vec<KernelSpec>,
}

/// Collects activation-direction message pairs from quadrature EP, splits
/// them, fits the median-heuristic widths on the training tuples and builds
/// the kernel zoo.
pub(crate) fn prepare_kernel_pool(
    cfg: &ExperimentConfig,
    experiment: &'static str,
    timing: &mut crate::report::TimingRecorder,
) -> Result<PreparedPool> {
    let pool = timing
        .time("collect-messages", || {
            collect_logistic_pool(
                cfg.model.d,
                cfg.model.n,
                cfg.model.collect_datasets,
                cfg.model.collect_iterations,
                cfg.seed,
            )
        })
        .stage(experiment, "collect-messages")?;
    let (train, test) = partition_records(
        pool.input,
        cfg.model.train_messages,
        cfg.model.test_messages,
        derive_seed(cfg.seed, 1),
    )
    .stage(experiment, "partition")?;

    let tuples: Vec<MessageTuple> = train.iter().map(|r| r.tuple.clone()).collect();
    let widths = crate::features::median_heuristic(&tuples, cfg.operator.d_in, derive_seed(cfg.seed, 2))
        .stage(experiment, "median-heuristic")?
        .widths;
    let specs = kernel_specs(
        &widths,
        mv_median_widths(&tuples),
        cfg.operator.d_in,
        cfg.operator.d_out,
        cfg.study.product_dim,
        derive_seed(cfg.seed, 3),
    )
    .stage(experiment, "kernel-construction")?;
    Ok(PreparedPool { train, test, specs })
}

/// Per-test-pair log KL of one kernel's regression on the collected pool.
pub(crate) struct KernelEval {
    pub feature_dim: usize,
    /// Parallel to the test records; `None` marks an unprojectable
    /// (improper) prediction.
    pub log_kls: Vec<Option<f64>>,
    pub improper: usize,
}

impl KernelEval {
    pub fn finite_log_kls(&self) -> Vec<f64> {
        self.log_kls.iter().flatten().copied().filter(|v| v.is_finite()).collect()
    }
}

/// Fits a Bayesian linear regression from `featurize`d tuples to target
/// statistics on `train` and scores per-pair log KL on `test`.
pub(crate) fn evaluate_kernel_regression(
    train: &[OperatorRecord],
    test: &[OperatorRecord],
    featurize: &(dyn Fn(&MessageTuple) -> std::result::Result<DVector<f64>, FeatureError>
          + Send
          + Sync),
    sigma_02: f64,
    sigma_y2: f64,
) -> std::result::Result<KernelEval, Box<dyn std::error::Error + Send + Sync>> {
    if train.is_empty() || test.is_empty() {
        return Err(Box::new(StageMessage("empty train or test split".into())));
    }
    let family = train[0].targets.family;
    let columns: Vec<DVector<f64>> = train
        .iter()
        .map(|r| featurize(&r.tuple))
        .collect::<std::result::Result<_, _>>()?;
    let dim = columns[0].len();
    let x = DMatrix::from_columns(&columns);
    let y = DMatrix::from_fn(2, train.len(), |i, j| train[j].targets.values[i]);
    let regressor = RegressorState::batch_fit(&x, &y, sigma_02, sigma_y2)?;

    let mut log_kls = Vec::with_capacity(test.len());
    let mut improper = 0;
    for record in test {
        let phi = featurize(&record.tuple)?;
        let (means, _) = regressor.predict(&phi)?;
        let pred = SuffStats::new(family, [means[0], means[1]]);
        let log_kl = gaussian_log_kl(&record.targets, &pred);
        if log_kl.is_none() {
            improper += 1;
        }
        log_kls.push(log_kl);
    }
    Ok(KernelEval { feature_dim: dim, log_kls, improper })
}

// ---- operator traces --------------------------------------------------------

/// One operator invocation flattened for the trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// 1-based index over the whole experiment, in schedule order.
    pub invocation: usize,
    /// Problem (or dataset) index within the experiment.
    pub problem: usize,
    /// EP sweep within the problem.
    pub iteration: usize,
    /// Which outgoing direction the operator served.
    pub direction: &'static str,
    /// Log predictive variance of the first output; `None` during warm-up
    /// and for pure oracle operators.
    pub log_variance: Option<f64>,
    pub used_oracle: bool,
    pub applied: bool,
}

/// Flattens a run's message log into trace rows, continuing the invocation
/// numbering from `next_invocation` (returns the updated counter).
pub(crate) fn extend_trace(
    rows: &mut Vec<TraceRow>,
    log: &[MessageLogEntry],
    problem: usize,
    mut next_invocation: usize,
    direction_of: impl Fn(&MessageLogEntry) -> &'static str,
) -> usize {
    for entry in log {
        rows.push(TraceRow {
            invocation: next_invocation,
            problem,
            iteration: entry.iteration,
            direction: direction_of(entry),
            log_variance: entry.log_variance,
            used_oracle: entry.used_oracle,
            applied: entry.applied,
        });
        next_invocation += 1;
    }
    next_invocation
}

/// Direction label for logistic-factor log entries: the Gaussian target is
/// the activation (`z`), the Beta target the probability (`p`).
pub(crate) fn logistic_direction(entry: &MessageLogEntry) -> &'static str {
    match entry.target_stats.family {
        Family::Gaussian => "z",
        Family::Beta => "p",
        Family::Gamma => "gamma",
    }
}

/// Writes trace rows as the standard trace CSV.
pub(crate) fn trace_csv_rows(rows: &[TraceRow]) -> Vec<Vec<String>> {
    use crate::report::{cell_bool, cell_opt, cell_usize};
    rows.iter()
        .map(|r| {
            vec![
                cell_usize(r.invocation),
                cell_usize(r.problem),
                cell_usize(r.iteration),
                r.direction.to_string(),
                cell_opt(r.log_variance),
                cell_bool(r.used_oracle),
                cell_bool(r.applied),
            ]
        })
        .collect()
}

pub(crate) const TRACE_HEADER: [&str; 7] =
    ["invocation", "problem", "iteration", "direction", "log_variance", "used_oracle", "applied"];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_kl_matches_the_closed_form() {
        let truth = SuffStats::new(Family::Gaussian, [0.0, 1.0]);
        let same = gaussian_log_kl(&truth, &truth).unwrap();
        assert!(same < -100.0 || same == f64::NEG_INFINITY, "identical → KL ≈ 0, got {same}");
        // Mean shifted by 1 at unit variance: KL = 1/2.
        let shifted = SuffStats::new(Family::Gaussian, [1.0, 2.0]);
        assert_abs_diff_eq!(
            gaussian_log_kl(&truth, &shifted).unwrap(),
            0.5f64.ln(),
            epsilon = 1e-12
        );
        // Improper prediction (E[x²] ≤ E[x]²) is flagged, not a crash.
        let improper = SuffStats::new(Family::Gaussian, [2.0, 1.0]);
        assert_eq!(gaussian_log_kl(&truth, &improper), None);
    }

    #[test]
    fn classification_error_counts_sign_disagreements() {
        let ds = Dataset::from_rows(
            "toy",
            vec![vec![1.0], vec![-2.0], vec![0.5], vec![-0.1]],
            vec![true, false, false, true],
            "test",
        )
        .unwrap();
        // w = [1]: activations 1, −2, 0.5, −0.1 → predictions 1, 0, 1, 0.
        assert_eq!(classification_error(&[1.0], &ds), 0.5);
        assert_eq!(classification_error(&[-1.0], &ds), 0.5);
    }

    #[test]
    fn mv_widths_are_positive_and_deterministic() {
        let tuples: Vec<MessageTuple> = (0..40)
            .map(|i| {
                MessageTuple::pair(
                    ExpFamMessage::gaussian(i as f64 * 0.3, 1.0 + 0.01 * i as f64).unwrap(),
                    ExpFamMessage::beta(1.0 + i as f64 * 0.1, 2.0).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let (mw, vw) = mv_median_widths(&tuples);
        assert_eq!(mw.len(), 2);
        assert!(mw.iter().chain(vw.iter()).all(|&w| w > 0.0), "{mw:?} {vw:?}");
        assert_eq!(mv_median_widths(&tuples), (mw, vw));
    }

    #[test]
    fn mv_widths_fall_back_on_degenerate_coordinates() {
        let tuples: Vec<MessageTuple> = (0..5)
            .map(|_| {
                MessageTuple::single(ExpFamMessage::gaussian(1.5, 2.0).unwrap()).unwrap()
            })
            .collect();
        let (mw, vw) = mv_median_widths(&tuples);
        assert_eq!((mw, vw), (vec![1.0], vec![1.0]));
    }

    #[test]
    fn kernel_specs_agree_with_their_exact_kernels_on_self_pairs() {
        let widths = KernelWidths::new(vec![2.0, 1.5], 1.0).unwrap();
        let tuples: Vec<MessageTuple> = (0..30)
            .map(|i| {
                MessageTuple::pair(
                    ExpFamMessage::gaussian(-2.0 + 0.15 * i as f64, 0.5).unwrap(),
                    ExpFamMessage::beta(1.0 + 0.1 * i as f64, 2.0).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let specs =
            kernel_specs(&widths, mv_median_widths(&tuples), 2000, 500, 40, 9).unwrap();
        assert_eq!(specs.len(), 5);
        let names: Vec<_> = specs.iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            ["mean-variance", "expected-product", "sum", "product", "gaussian-joint"]
        );
        let (r, s) = (&tuples[3], &tuples[20]);
        for spec in &specs {
            let approx = (spec.featurize)(r).unwrap().dot(&(spec.featurize)(s).unwrap());
            let exact = (spec.exact)(r, s).unwrap();
            // Monte Carlo features: agreement within a loose band is enough
            // to show the featurize/exact pairing is not mismatched.
            assert!(
                (approx - exact).abs() < 0.25,
                "{}: approx {approx} vs exact {exact}",
                spec.name
            );
        }
        // Kronecker product of two 40-dimensional per-message embeddings.
        assert_eq!((specs[3].featurize)(r).unwrap().len(), 1600);
    }

    #[test]
    fn regression_on_a_linear_target_reaches_tiny_kl() {
        // Target statistics depend linearly on the tuple mean, so ridge
        // regression on informative features must nail them.
        let records: Vec<OperatorRecord> = (0..60)
            .map(|i| {
                let m = -2.0 + 0.07 * i as f64;
                OperatorRecord {
                    tuple: MessageTuple::single(ExpFamMessage::gaussian(m, 1.0).unwrap())
                        .unwrap(),
                    targets: SuffStats::new(Family::Gaussian, [m, m * m + 1.0]),
                }
            })
            .collect();
        let (train, test) = (records[..40].to_vec(), records[40..].to_vec());
        let map = Stage1Map::new(5, 400, &[4.0]).unwrap();
        let eval = evaluate_kernel_regression(
            &train,
            &test,
            &move |t| map.features(t),
            1.0,
            1e-6,
        )
        .unwrap();
        assert_eq!(eval.feature_dim, 400);
        assert_eq!(eval.improper, 0);
        let finite = eval.finite_log_kls();
        assert!(!finite.is_empty());
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        assert!(mean < -5.0, "mean log KL {mean}");
    }

    #[test]
    fn trace_rows_number_invocations_across_problems() {
        let entry = |iteration, family| MessageLogEntry {
            iteration,
            factor: 0,
            variable: 0,
            incoming: MessageTuple::pair(
                ExpFamMessage::gaussian(0.0, 1.0).unwrap(),
                ExpFamMessage::beta(1.0, 2.0).unwrap(),
            )
            .unwrap(),
            target_stats: SuffStats::new(family, [0.0, 1.0]),
            outgoing: ExpFamMessage::uniform(family),
            used_oracle: true,
            log_variance: None,
            applied: true,
        };
        let log = vec![entry(0, Family::Gaussian), entry(0, Family::Beta)];
        let mut rows = Vec::new();
        let next = extend_trace(&mut rows, &log, 0, 1, logistic_direction);
        let next = extend_trace(&mut rows, &log, 1, next, logistic_direction);
        assert_eq!(next, 5);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].direction, "z");
        assert_eq!(rows[1].direction, "p");
        assert_eq!(rows[3].invocation, 4);
        assert_eq!(rows[3].problem, 1);
        let csv = trace_csv_rows(&rows);
        assert_eq!(csv[0], vec!["1", "0", "0", "z", "", "1", "1"]);
    }
}
