//! A sequence of related logistic-regression problems, solved three ways:
//!
//! * `kjit` — one persistent pair of just-in-time operators (activation and
//!   probability directions) carried across problems, consulting the
//!   configured oracle only while uncertain;
//! * `exact` — deterministic quadrature oracles everywhere (the reference);
//! * `sampling` — the importance-sampling oracle everywhere (optional via
//!   `model.sampling_baseline`; slow, since it pays the full Monte Carlo
//!   cost at every invocation).
//!
//! All problems share one true weight vector; each draws fresh inputs and
//! labels. Per problem the classification error on a held-out set is
//! recorded, and every operator invocation lands in a trace CSV with its
//! log predictive variance — the raw material for watching the oracle rate
//! collapse as the operator saturates.

use super::{
    classification_error, ep_options, extend_trace, fail, logistic_direction,
    logistic_oracle_spec, posterior_means, proposal_from, standard_prior, trace_csv_rows,
    Result, RunOutcome, StageExt, TraceRow, TRACE_HEADER,
};
use crate::config::ExperimentConfig;
use crate::data::{synthetic_logistic_with_weights, Dataset};
use crate::graph::{build_logistic_graph, LogisticGraph, MessageOperator, OracleOperator, TargetMode};
use crate::numeric::derive_seed;
use crate::report::{
    cell, cell_usize, describe, ArtifactWriter, TimingRecorder,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

const EXPERIMENT: &str = "jit-logistic";

/// Per-problem outcome of one inference method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemRun {
    pub error: f64,
    pub invocations: usize,
    pub oracle_queries: usize,
}

#[derive(Debug)]
pub struct JitLogisticReport {
    pub kjit: Vec<ProblemRun>,
    pub exact: Vec<ProblemRun>,
    pub sampling: Option<Vec<ProblemRun>>,
    /// `max_k |error_kjit(k) − error_exact(k)|`.
    pub max_error_gap: f64,
    /// Invocations after the warm-up buffer filled (both directions).
    pub post_warmup_invocations: usize,
    pub post_warmup_oracle_queries: usize,
    /// Post-warm-up oracle fraction per problem; `None` for problems fully
    /// inside the warm-up.
    pub per_problem_oracle_fraction: Vec<Option<f64>>,
    pub trace: Vec<TraceRow>,
    pub outcome: RunOutcome,
}

fn baseline_runs(
    cfg: &ExperimentConfig,
    problems: &[(Dataset, Dataset)],
    importance: bool,
    seed_base: u64,
) -> std::result::Result<Vec<ProblemRun>, Box<dyn std::error::Error + Send + Sync>> {
    let one = |k: usize| -> std::result::Result<ProblemRun, Box<dyn std::error::Error + Send + Sync>> {
        let (train, test) = &problems[k];
        let mut lg = build_logistic_graph(&train.features, &train.labels, &standard_prior(train.dim()))?;
        if importance {
            let proposal = proposal_from(cfg)?;
            for slot in [LogisticGraph::Z_SLOT, LogisticGraph::P_SLOT] {
                lg.graph.attach_operator(
                    slot,
                    Box::new(OracleOperator::logistic_importance(proposal.clone())),
                );
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, seed_base + k as u64));
        let report = lg.graph.run_ep(&ep_options(cfg, false), &mut rng)?;
        let w = posterior_means(&lg)?;
        Ok(ProblemRun {
            error: classification_error(&w, test),
            invocations: report.operator_invocations,
            oracle_queries: report.oracle_query_count,
        })
    };
    if cfg.parallel {
        (0..problems.len()).into_par_iter().map(one).collect()
    } else {
        (0..problems.len()).map(one).collect()
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<JitLogisticReport> {
    let mut timing = TimingRecorder::new();
    let writer =
        ArtifactWriter::new(&cfg.resolved_output_dir()).stage(EXPERIMENT, "output-dir")?;

    // One true weight vector for the whole sequence; fresh data per problem.
    let mut truth_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let w_true: Vec<f64> =
        (0..cfg.model.d).map(|_| StandardNormal.sample(&mut truth_rng)).collect();
    let problems: Vec<(Dataset, Dataset)> = (0..cfg.model.problems)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + k as u64));
            let train = synthetic_logistic_with_weights(&w_true, cfg.model.n, &mut rng);
            let test = synthetic_logistic_with_weights(&w_true, cfg.model.test_points, &mut rng);
            (train, test)
        })
        .collect();

    // ---- kjit: persistent operators handed from problem to problem ----
    let oracle = logistic_oracle_spec(cfg).stage(EXPERIMENT, "operator-setup")?;
    let mut z_op: Box<dyn MessageOperator> =
        Box::new(super::build_jit_operator(cfg, TargetMode::Belief, oracle.clone(), 600));
    let mut p_op: Box<dyn MessageOperator> =
        Box::new(super::build_jit_operator(cfg, TargetMode::Belief, oracle, 601));

    let mut kjit = Vec::with_capacity(problems.len());
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut next_invocation = 1;
    for (k, (train, test)) in problems.iter().enumerate() {
        let mut lg =
            build_logistic_graph(&train.features, &train.labels, &standard_prior(train.dim()))
                .stage(EXPERIMENT, "build-graph")?;
        lg.graph.attach_operator(LogisticGraph::Z_SLOT, z_op);
        lg.graph.attach_operator(LogisticGraph::P_SLOT, p_op);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4000 + k as u64));
        let report = timing
            .time("kjit problem", || lg.graph.run_ep(&ep_options(cfg, true), &mut rng))
            .stage(EXPERIMENT, "kjit-inference")?;
        next_invocation =
            extend_trace(&mut trace, &report.message_log, k, next_invocation, logistic_direction);
        z_op = lg
            .graph
            .take_operator(LogisticGraph::Z_SLOT)
            .ok_or_else(|| fail(EXPERIMENT, "kjit-inference", "activation operator lost".into()))?;
        p_op = lg
            .graph
            .take_operator(LogisticGraph::P_SLOT)
            .ok_or_else(|| fail(EXPERIMENT, "kjit-inference", "probability operator lost".into()))?;
        let w = posterior_means(&lg).stage(EXPERIMENT, "kjit-inference")?;
        kjit.push(ProblemRun {
            error: classification_error(&w, test),
            invocations: report.operator_invocations,
            oracle_queries: report.oracle_query_count,
        });
    }

    // ---- baselines ----
    let exact = timing
        .time("exact baseline", || baseline_runs(cfg, &problems, false, 2000))
        .stage(EXPERIMENT, "exact-baseline")?;
    let sampling = if cfg.model.sampling_baseline {
        Some(
            timing
                .time("sampling baseline", || baseline_runs(cfg, &problems, true, 3000))
                .stage(EXPERIMENT, "sampling-baseline")?,
        )
    } else {
        None
    };

    // ---- aggregates ----
    let max_error_gap = kjit
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a.error - b.error).abs())
        .fold(0.0f64, f64::max);
    let post: Vec<&TraceRow> = trace.iter().filter(|r| r.log_variance.is_some()).collect();
    let post_warmup_invocations = post.len();
    let post_warmup_oracle_queries = post.iter().filter(|r| r.used_oracle).count();
    let per_problem_oracle_fraction: Vec<Option<f64>> = (0..problems.len())
        .map(|k| {
            let rows: Vec<&&TraceRow> = post.iter().filter(|r| r.problem == k).collect();
            if rows.is_empty() {
                None
            } else {
                Some(
                    rows.iter().filter(|r| r.used_oracle).count() as f64 / rows.len() as f64,
                )
            }
        })
        .collect();

    // ---- artifacts ----
    let mut error_rows = Vec::new();
    let push_method = |method: &str, runs: &[ProblemRun], rows: &mut Vec<Vec<String>>| {
        for (k, run) in runs.iter().enumerate() {
            rows.push(vec![
                cell_usize(k),
                method.to_string(),
                cell(run.error),
                cell_usize(run.invocations),
                cell_usize(run.oracle_queries),
            ]);
        }
    };
    push_method("kjit", &kjit, &mut error_rows);
    push_method("exact", &exact, &mut error_rows);
    if let Some(sampling) = &sampling {
        push_method("sampling", sampling, &mut error_rows);
    }
    let mut files = Vec::new();
    files.push(
        writer
            .write_csv(
                "jit_logistic_errors.csv",
                &["problem", "method", "error", "invocations", "oracle_queries"],
                &error_rows,
            )
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_csv("jit_logistic_trace.csv", &TRACE_HEADER, &trace_csv_rows(&trace))
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let kjit_errors: Vec<f64> = kjit.iter().map(|r| r.error).collect();
    let exact_errors: Vec<f64> = exact.iter().map(|r| r.error).collect();
    let mut summary = format!(
        "{} related problems (d = {}, n = {}), {} EP sweeps each.\n\n{}\n{}\n",
        problems.len(),
        cfg.model.d,
        cfg.model.n,
        cfg.model.ep_iterations,
        describe("kjit error", &kjit_errors),
        describe("exact error", &exact_errors),
    );
    if let Some(sampling) = &sampling {
        let errors: Vec<f64> = sampling.iter().map(|r| r.error).collect();
        summary.push_str(&describe("sampling error", &errors));
        summary.push('\n');
    }
    summary.push_str(&format!("max |kjit − exact| error gap: {}\n", cell(max_error_gap)));
    summary.push_str(&format!(
        "post-warm-up: {post_warmup_oracle_queries} oracle queries over {post_warmup_invocations} invocations\n"
    ));
    let fractions: Vec<String> = per_problem_oracle_fraction
        .iter()
        .map(|f| f.map(|v| format!("{v:.3}")).unwrap_or_else(|| "warmup".into()))
        .collect();
    summary.push_str(&format!("per-problem oracle fraction: {}\n", fractions.join(", ")));
    files.push(
        writer
            .write_text("jit_logistic_summary.txt", &summary)
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_text("jit_logistic_timing.txt", &timing.render())
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let mean_kjit = kjit_errors.iter().sum::<f64>() / kjit_errors.len() as f64;
    let mean_exact = exact_errors.iter().sum::<f64>() / exact_errors.len() as f64;
    let oracle_fraction = if post_warmup_invocations > 0 {
        post_warmup_oracle_queries as f64 / post_warmup_invocations as f64
    } else {
        1.0
    };
    let headline = format!(
        "kjit mean error {mean_kjit:.3} vs exact {mean_exact:.3}; \
         post-warm-up oracle fraction {oracle_fraction:.3}"
    );
    Ok(JitLogisticReport {
        kjit,
        exact,
        sampling,
        max_error_gap,
        post_warmup_invocations,
        post_warmup_oracle_queries,
        per_problem_oracle_fraction,
        trace,
        outcome: RunOutcome { files, headline },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, ExperimentId};

    #[test]
    fn operator_warms_up_then_reuses_predictions_across_problems() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(ExperimentId::JitLogistic, 23);
        cfg.model.d = 2;
        cfg.model.n = 25;
        cfg.model.problems = 3;
        cfg.model.ep_iterations = 3;
        cfg.model.test_points = 100;
        cfg.operator.d_in = 40;
        cfg.operator.d_out = 60;
        cfg.operator.minibatch = 30;
        cfg.output_dir = dir.path().to_path_buf();

        let report = run(&cfg).unwrap();
        assert_eq!(report.kjit.len(), 3);
        assert_eq!(report.exact.len(), 3);
        assert!(report.sampling.is_none());

        // 25 observations × 3 sweeps × 2 directions per problem.
        assert_eq!(report.trace.len(), 3 * 25 * 3 * 2);
        // Warm-up: the first 30 invocations of each direction consult the
        // oracle without a variance estimate.
        let warmup_rows =
            report.trace.iter().filter(|r| r.log_variance.is_none()).count();
        assert_eq!(warmup_rows, 60);
        assert!(report.trace.iter().filter(|r| r.log_variance.is_none()).all(|r| r.used_oracle));
        assert_eq!(report.post_warmup_invocations, report.trace.len() - 60);
        assert!(report.post_warmup_oracle_queries <= report.post_warmup_invocations);

        // Problem 0 straddles the warm-up boundary, later problems do not.
        assert_eq!(report.per_problem_oracle_fraction.len(), 3);
        assert!(report.per_problem_oracle_fraction.iter().all(Option::is_some));

        for run in report.kjit.iter().chain(&report.exact) {
            assert!(run.error.is_finite() && run.error <= 0.5, "{run:?}");
            assert!(run.oracle_queries <= run.invocations);
        }
        assert!(dir.path().join("jit_logistic_errors.csv").is_file());
        assert!(dir.path().join("jit_logistic_trace.csv").is_file());
        let csv =
            std::fs::read_to_string(dir.path().join("jit_logistic_errors.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
    }
}
