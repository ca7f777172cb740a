//! A sequence of compound-gamma precision problems served by one persistent
//! just-in-time operator.
//!
//! Each problem draws its own precision from the model's own hierarchy
//! (`r₂ ∼ Gamma(1, 1)`, `τ ∼ Gamma(1, r₂)`), a fresh observation count, and
//! fresh Gaussian observations. The collapsed prior factor is the only
//! pluggable slot, so the operator sees exactly one invocation per sweep —
//! a slow message stream compared to the logistic models, which makes the
//! warm-up/threshold behaviour easy to watch. Because the likelihood side of
//! the graph is conjugate, its incoming message converges after the first
//! sweep and each problem effectively contributes one distinct input tuple.
//!
//! The operator predicts the *outgoing* correction here (not the belief):
//! the exact correction is generically outside the Gamma family, so the
//! moment-matched outgoing message is the only stable regression target.
//!
//! Per problem the resulting Gamma posterior over τ is compared, as
//! (shape, rate), against a fresh quadrature-only run of the same graph.

use super::{
    ep_options, extend_trace, fail, gamma_shape_rate, trace_csv_rows, Result, RunOutcome,
    StageExt, TraceRow, TRACE_HEADER,
};
use crate::config::ExperimentConfig;
use crate::data::gaussian_precision_observations;
use crate::expfam::ExpFamMessage;
use crate::graph::{build_compound_gamma_graph, CompoundGammaGraph, TargetMode};
use crate::numeric::derive_seed;
use crate::operator::OracleSpec;
use crate::report::{cell, cell_usize, describe, ArtifactWriter, TimingRecorder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXPERIMENT: &str = "compound-gamma";

// Hyperparameters of the hierarchy: r₂ ∼ Gamma(S1, R1), τ ∼ Gamma(S2, r₂).
// The unit setting gives a heavy-tailed marginal on τ, which is the point
// of the model; observation counts vary per problem so the incoming
// likelihood messages cover a range of strengths.
const S1: f64 = 1.0;
const R1: f64 = 1.0;
const S2: f64 = 1.0;
const OBS_MIN: usize = 10;
const OBS_MAX: usize = 100;

#[derive(Debug, Clone, Copy)]
pub struct ProblemRow {
    pub problem: usize,
    pub n_obs: usize,
    pub tau_true: f64,
    pub oracle_shape: f64,
    pub oracle_rate: f64,
    pub kjit_shape: f64,
    pub kjit_rate: f64,
    pub rel_shape_err: f64,
    pub rel_rate_err: f64,
    pub invocations: usize,
    pub oracle_queries: usize,
}

#[derive(Debug)]
pub struct CompoundGammaReport {
    pub rows: Vec<ProblemRow>,
    /// Problems whose shape *and* rate are within 5 % of the quadrature run.
    pub within_five_percent: usize,
    pub post_warmup_invocations: usize,
    pub post_warmup_oracle_queries: usize,
    pub trace: Vec<TraceRow>,
    pub outcome: RunOutcome,
}

struct Problem {
    tau_true: f64,
    obs: Vec<f64>,
}

fn draw_problem(seed: u64, k: usize) -> std::result::Result<Problem, Box<dyn std::error::Error + Send + Sync>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 200 + k as u64));
    let r2 = ExpFamMessage::gamma(S1, R1)?.sample(&mut rng, 1)?[0];
    let tau_true = ExpFamMessage::gamma(S2, r2)?.sample(&mut rng, 1)?[0];
    let n = rng.gen_range(OBS_MIN..=OBS_MAX);
    let obs = gaussian_precision_observations(n, tau_true, &mut rng);
    Ok(Problem { tau_true, obs })
}

/// The quadrature oracle for this model's prior slot.
pub(crate) fn oracle_spec() -> OracleSpec {
    OracleSpec::CompoundGammaQuadrature { s1: S1, r1: R1, s2: S2 }
}

/// Harvests (incoming tuple → outgoing target) records from quadrature EP
/// on `model.problems` fresh precision problems.
pub(crate) fn collect_pool(
    cfg: &ExperimentConfig,
) -> std::result::Result<Vec<crate::operator::OperatorRecord>, Box<dyn std::error::Error + Send + Sync>>
{
    let mut pool = Vec::new();
    for k in 0..cfg.model.problems {
        let problem = draw_problem(cfg.seed, k)?;
        let built = build_compound_gamma_graph(&problem.obs, S1, R1, S2)?;
        let mut graph = built.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5000 + k as u64));
        for (tuple, targets) in
            graph.collect_training_messages(cfg.model.collect_iterations, &mut rng)?
        {
            pool.push(crate::operator::OperatorRecord { tuple, targets });
        }
    }
    Ok(pool)
}

pub fn run(cfg: &ExperimentConfig) -> Result<CompoundGammaReport> {
    let mut timing = TimingRecorder::new();
    let writer =
        ArtifactWriter::new(&cfg.resolved_output_dir()).stage(EXPERIMENT, "output-dir")?;

    let problems: Vec<Problem> = (0..cfg.model.problems)
        .map(|k| draw_problem(cfg.seed, k))
        .collect::<std::result::Result<_, _>>()
        .stage(EXPERIMENT, "draw-problems")?;

    let mut op: Box<dyn crate::graph::MessageOperator> =
        Box::new(super::build_jit_operator(cfg, TargetMode::Outgoing, oracle_spec(), 13));

    let mut rows = Vec::with_capacity(problems.len());
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut next_invocation = 1;
    for (k, problem) in problems.iter().enumerate() {
        // Learned operator on the prior slot, carried across problems.
        let mut built = build_compound_gamma_graph(&problem.obs, S1, R1, S2)
            .stage(EXPERIMENT, "build-graph")?;
        built.graph.attach_operator(CompoundGammaGraph::PRIOR_SLOT, op);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2000 + k as u64));
        let report = timing
            .time("kjit problem", || built.graph.run_ep(&ep_options(cfg, true), &mut rng))
            .stage(EXPERIMENT, "kjit-inference")?;
        op = built
            .graph
            .take_operator(CompoundGammaGraph::PRIOR_SLOT)
            .ok_or_else(|| fail(EXPERIMENT, "kjit-inference", "prior operator lost".into()))?;
        next_invocation =
            extend_trace(&mut trace, &report.message_log, k, next_invocation, |_| "tau");
        let (kjit_shape, kjit_rate) = gamma_shape_rate(&report.final_beliefs[built.tau]);

        // Reference: the same graph with its default quadrature oracle.
        let mut exact = build_compound_gamma_graph(&problem.obs, S1, R1, S2)
            .stage(EXPERIMENT, "build-graph")?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3000 + k as u64));
        let exact_report = timing
            .time("oracle problem", || exact.graph.run_ep(&ep_options(cfg, false), &mut rng))
            .stage(EXPERIMENT, "oracle-inference")?;
        let (oracle_shape, oracle_rate) = gamma_shape_rate(&exact_report.final_beliefs[exact.tau]);

        rows.push(ProblemRow {
            problem: k,
            n_obs: problem.obs.len(),
            tau_true: problem.tau_true,
            oracle_shape,
            oracle_rate,
            kjit_shape,
            kjit_rate,
            rel_shape_err: (kjit_shape - oracle_shape).abs() / oracle_shape.abs(),
            rel_rate_err: (kjit_rate - oracle_rate).abs() / oracle_rate.abs(),
            invocations: report.operator_invocations,
            oracle_queries: report.oracle_query_count,
        });
    }

    let within_five_percent =
        rows.iter().filter(|r| r.rel_shape_err <= 0.05 && r.rel_rate_err <= 0.05).count();
    let post: Vec<&TraceRow> = trace.iter().filter(|r| r.log_variance.is_some()).collect();
    let post_warmup_invocations = post.len();
    let post_warmup_oracle_queries = post.iter().filter(|r| r.used_oracle).count();

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                cell_usize(r.problem),
                cell_usize(r.n_obs),
                cell(r.tau_true),
                cell(r.oracle_shape),
                cell(r.oracle_rate),
                cell(r.kjit_shape),
                cell(r.kjit_rate),
                cell(r.rel_shape_err),
                cell(r.rel_rate_err),
                cell_usize(r.invocations),
                cell_usize(r.oracle_queries),
            ]
        })
        .collect();
    let mut files = Vec::new();
    files.push(
        writer
            .write_csv(
                "compound_gamma_posteriors.csv",
                &[
                    "problem",
                    "n_obs",
                    "tau_true",
                    "oracle_shape",
                    "oracle_rate",
                    "kjit_shape",
                    "kjit_rate",
                    "rel_shape_err",
                    "rel_rate_err",
                    "invocations",
                    "oracle_queries",
                ],
                &csv_rows,
            )
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_csv("compound_gamma_trace.csv", &TRACE_HEADER, &trace_csv_rows(&trace))
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let shape_errs: Vec<f64> = rows.iter().map(|r| r.rel_shape_err).collect();
    let rate_errs: Vec<f64> = rows.iter().map(|r| r.rel_rate_err).collect();
    let summary = format!(
        "{} precision problems, {}–{} observations each, hierarchy \
         Gamma({S1}, {R1}) → Gamma({S2}, r2).\n\n{}\n{}\n\
         within 5% of quadrature (shape and rate): {within_five_percent}/{}\n\
         post-warm-up: {post_warmup_oracle_queries} oracle queries over \
         {post_warmup_invocations} invocations\n",
        rows.len(),
        OBS_MIN,
        OBS_MAX,
        describe("relative shape error", &shape_errs),
        describe("relative rate error", &rate_errs),
        rows.len(),
    );
    files.push(
        writer
            .write_text("compound_gamma_summary.txt", &summary)
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_text("compound_gamma_timing.txt", &timing.render())
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let headline = format!(
        "{within_five_percent}/{} problems within 5% of the quadrature posterior",
        rows.len()
    );
    Ok(CompoundGammaReport {
        rows,
        within_five_percent,
        post_warmup_invocations,
        post_warmup_oracle_queries,
        trace,
        outcome: RunOutcome { files, headline },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, ExperimentId};

    #[test]
    fn tracked_posteriors_match_the_quadrature_reference() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(ExperimentId::CompoundGamma, 3);
        cfg.model.problems = 4;
        cfg.model.ep_iterations = 4;
        cfg.operator.d_in = 30;
        cfg.operator.d_out = 40;
        cfg.operator.minibatch = 4;
        cfg.output_dir = dir.path().to_path_buf();

        let report = run(&cfg).unwrap();
        assert_eq!(report.rows.len(), 4);
        // One pluggable invocation per sweep.
        assert_eq!(report.trace.len(), 4 * 4);
        assert!(report.trace.iter().all(|r| r.direction == "tau"));
        // The warm-up buffer holds exactly the first problem's sweeps.
        assert_eq!(report.post_warmup_invocations, 12);

        for row in &report.rows {
            assert!(row.oracle_shape > 0.0 && row.oracle_rate > 0.0, "{row:?}");
            assert!(row.kjit_shape > 0.0 && row.kjit_rate > 0.0, "{row:?}");
            // With a strict threshold and four training pairs the gate sends
            // essentially everything to the oracle, so the posteriors agree.
            assert!(row.rel_shape_err <= 0.05, "{row:?}");
            assert!(row.rel_rate_err <= 0.05, "{row:?}");
            assert_eq!(row.invocations, 4);
        }
        assert_eq!(report.within_five_percent, 4);
        assert!(dir.path().join("compound_gamma_posteriors.csv").is_file());
        assert!(dir.path().join("compound_gamma_summary.txt").is_file());
    }
}
