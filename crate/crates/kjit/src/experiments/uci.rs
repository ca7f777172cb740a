//! One persistent operator pair across a sequence of *different* binary
//! classification datasets, processed back to back.
//!
//! The point is distribution shift: when the stream switches datasets the
//! incoming messages move, the predictive variance jumps, and the operator
//! goes back to its oracle until it has absorbed the new region. The trace
//! CSV carries the per-invocation log variances; the summary reports, for
//! each switch, the mean log variance of the previous dataset's last sweep
//! against the new dataset's first sweep.
//!
//! Datasets come from `data.paths` (CSV, one label column, see
//! [`crate::data::load_csv_dataset`]). When no paths are configured the
//! experiment falls back to four synthetic stand-ins with different input
//! dimensions and weight scales — shaped to force the same kind of shift,
//! and clearly labelled as synthetic in every artifact.

use super::{
    classification_error, ep_options, extend_trace, fail, jit_logistic::ProblemRun,
    logistic_direction, logistic_oracle_spec, posterior_means, standard_prior, trace_csv_rows,
    Result, RunOutcome, StageExt, TraceRow, TRACE_HEADER,
};
use crate::config::ExperimentConfig;
use crate::data::{
    load_csv_dataset, stratified_subsample, synthetic_logistic_with_weights, Dataset,
};
use crate::graph::{build_logistic_graph, LogisticGraph, MessageOperator, TargetMode};
use crate::numeric::derive_seed;
use crate::report::{cell, cell_usize, describe, ArtifactWriter, TimingRecorder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const EXPERIMENT: &str = "uci";

/// Dimensions and weight scales of the synthetic stand-in datasets. The
/// scales descend steeply so that each switch moves the first-sweep cavity
/// precisions beyond anything the earlier datasets visited, even at their
/// EP fixed points — real datasets differ in feature scale just as
/// drastically, which is the shift this experiment is about.
const STAND_INS: [(usize, usize, f64); 4] =
    [(4, 1372, 1.0), (4, 748, 0.12), (9, 100, 0.035), (33, 351, 0.012)];

/// Mean log predictive variance around one dataset switch. `None` when the
/// relevant sweep produced no post-warm-up invocations.
#[derive(Debug, Clone, Copy)]
pub struct SwitchStats {
    pub to_dataset: usize,
    pub prev_last_sweep_mean: Option<f64>,
    pub first_sweep_mean: Option<f64>,
}

#[derive(Debug)]
pub struct UciReport {
    pub dataset_names: Vec<String>,
    pub kjit: Vec<ProblemRun>,
    pub exact: Vec<ProblemRun>,
    pub switches: Vec<SwitchStats>,
    pub used_real_data: bool,
    pub trace: Vec<TraceRow>,
    pub outcome: RunOutcome,
}

fn infer_label_column(path: &std::path::Path) -> std::io::Result<usize> {
    let raw = std::fs::read_to_string(path)?;
    let line = raw
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "empty file"))?;
    Ok(line.split(',').count() - 1)
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<(Vec<Dataset>, bool)> {
    if !cfg.data.paths.is_empty() {
        let mut datasets = Vec::with_capacity(cfg.data.paths.len());
        for path in &cfg.data.paths {
            let label = match cfg.data.label_column {
                Some(c) => c,
                None => infer_label_column(path).stage(EXPERIMENT, "load-data")?,
            };
            datasets.push(load_csv_dataset(path, label).stage(EXPERIMENT, "load-data")?);
        }
        return Ok((datasets, true));
    }
    let datasets = STAND_INS
        .iter()
        .enumerate()
        .map(|(i, &(d, n, scale))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 700 + i as u64));
            let w: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect();
            let mut ds = synthetic_logistic_with_weights(&w, n, &mut rng);
            ds.name = format!("synthetic-{}", i + 1);
            ds.provenance = "synthetic stand-in (no data.paths configured)".into();
            ds
        })
        .collect();
    Ok((datasets, false))
}

pub fn run(cfg: &ExperimentConfig) -> Result<UciReport> {
    let mut timing = TimingRecorder::new();
    let writer =
        ArtifactWriter::new(&cfg.resolved_output_dir()).stage(EXPERIMENT, "output-dir")?;

    let (datasets, used_real_data) = load_datasets(cfg)?;
    if datasets.is_empty() {
        return Err(fail(EXPERIMENT, "load-data", "no datasets configured".into()));
    }
    let splits: Vec<(Dataset, Dataset)> = datasets
        .iter()
        .enumerate()
        .map(|(k, ds)| {
            // Small datasets are split in half; larger ones keep the
            // configured training size and test on the remainder.
            let n_train =
                if ds.len() <= cfg.data.train_size { ds.len() / 2 } else { cfg.data.train_size };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 600 + k as u64));
            stratified_subsample(ds, n_train, &mut rng)
        })
        .collect::<std::result::Result<_, _>>()
        .stage(EXPERIMENT, "subsample")?;

    // One operator pair lives through the whole dataset sequence.
    let oracle = logistic_oracle_spec(cfg).stage(EXPERIMENT, "operator-setup")?;
    let mut z_op: Box<dyn MessageOperator> =
        Box::new(super::build_jit_operator(cfg, TargetMode::Belief, oracle.clone(), 14));
    let mut p_op: Box<dyn MessageOperator> =
        Box::new(super::build_jit_operator(cfg, TargetMode::Belief, oracle, 15));

    let mut kjit = Vec::with_capacity(splits.len());
    let mut exact = Vec::with_capacity(splits.len());
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut next_invocation = 1;
    for (k, (train, test)) in splits.iter().enumerate() {
        let mut lg =
            build_logistic_graph(&train.features, &train.labels, &standard_prior(train.dim()))
                .stage(EXPERIMENT, "build-graph")?;
        lg.graph.attach_operator(LogisticGraph::Z_SLOT, z_op);
        lg.graph.attach_operator(LogisticGraph::P_SLOT, p_op);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2000 + k as u64));
        let report = timing
            .time("kjit dataset", || lg.graph.run_ep(&ep_options(cfg, true), &mut rng))
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

        // Quadrature-only reference on the same split.
        let mut lg =
            build_logistic_graph(&train.features, &train.labels, &standard_prior(train.dim()))
                .stage(EXPERIMENT, "build-graph")?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3000 + k as u64));
        let report = timing
            .time("exact dataset", || lg.graph.run_ep(&ep_options(cfg, false), &mut rng))
            .stage(EXPERIMENT, "exact-inference")?;
        let w = posterior_means(&lg).stage(EXPERIMENT, "exact-inference")?;
        exact.push(ProblemRun {
            error: classification_error(&w, test),
            invocations: report.operator_invocations,
            oracle_queries: report.oracle_query_count,
        });
    }

    // Uncertainty around each dataset switch, from the trace.
    let sweep_mean = |problem: usize, pick_last: bool| -> Option<f64> {
        let sweeps: Vec<usize> = trace
            .iter()
            .filter(|r| r.problem == problem && r.log_variance.is_some())
            .map(|r| r.iteration)
            .collect();
        let sweep = if pick_last {
            *sweeps.iter().max()?
        } else {
            *sweeps.iter().min()?
        };
        let values: Vec<f64> = trace
            .iter()
            .filter(|r| r.problem == problem && r.iteration == sweep)
            .filter_map(|r| r.log_variance)
            .collect();
        Some(values.iter().sum::<f64>() / values.len() as f64)
    };
    let switches: Vec<SwitchStats> = (1..splits.len())
        .map(|k| SwitchStats {
            to_dataset: k,
            prev_last_sweep_mean: sweep_mean(k - 1, true),
            first_sweep_mean: sweep_mean(k, false),
        })
        .collect();

    // ---- artifacts ----
    let mut error_rows = Vec::new();
    for (method, runs) in [("kjit", &kjit), ("exact", &exact)] {
        for (k, run) in runs.iter().enumerate() {
            error_rows.push(vec![
                cell_usize(k),
                datasets[k].name.clone(),
                cell_usize(splits[k].0.dim()),
                cell_usize(splits[k].0.len()),
                cell_usize(splits[k].1.len()),
                method.to_string(),
                cell(run.error),
                cell_usize(run.invocations),
                cell_usize(run.oracle_queries),
            ]);
        }
    }
    let mut files = Vec::new();
    files.push(
        writer
            .write_csv(
                "uci_errors.csv",
                &[
                    "dataset_index",
                    "dataset",
                    "d",
                    "n_train",
                    "n_test",
                    "method",
                    "error",
                    "invocations",
                    "oracle_queries",
                ],
                &error_rows,
            )
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_csv("uci_trace.csv", &TRACE_HEADER, &trace_csv_rows(&trace))
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let mut summary = String::new();
    summary.push_str(&format!(
        "{} datasets processed sequentially by one operator pair ({}).\n\n",
        datasets.len(),
        if used_real_data { "loaded from data.paths" } else { "synthetic stand-ins" },
    ));
    for (k, (train, test)) in splits.iter().enumerate() {
        summary.push_str(&format!(
            "{}: d = {}, train {} / test {}, kjit error {}, exact error {}\n",
            datasets[k].name,
            train.dim(),
            train.len(),
            test.len(),
            cell(kjit[k].error),
            cell(exact[k].error),
        ));
    }
    summary.push('\n');
    let kjit_errors: Vec<f64> = kjit.iter().map(|r| r.error).collect();
    let exact_errors: Vec<f64> = exact.iter().map(|r| r.error).collect();
    summary.push_str(&describe("kjit error", &kjit_errors));
    summary.push('\n');
    summary.push_str(&describe("exact error", &exact_errors));
    summary.push('\n');
    let fmt_mean = |m: Option<f64>| m.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    for s in &switches {
        summary.push_str(&format!(
            "switch to {}: mean log variance {} (previous last sweep) -> {} (first sweep)\n",
            datasets[s.to_dataset].name,
            fmt_mean(s.prev_last_sweep_mean),
            fmt_mean(s.first_sweep_mean),
        ));
    }
    files.push(
        writer.write_text("uci_summary.txt", &summary).stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_text("uci_timing.txt", &timing.render())
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let mean_kjit = kjit_errors.iter().sum::<f64>() / kjit_errors.len() as f64;
    let mean_exact = exact_errors.iter().sum::<f64>() / exact_errors.len() as f64;
    let headline = format!(
        "kjit mean error {mean_kjit:.3} vs exact {mean_exact:.3} across {} datasets",
        datasets.len()
    );
    Ok(UciReport {
        dataset_names: datasets.into_iter().map(|d| d.name).collect(),
        kjit,
        exact,
        switches,
        used_real_data,
        trace,
        outcome: RunOutcome { files, headline },
    })
}
