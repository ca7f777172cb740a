//! Side-by-side kernel comparison on one collected message pool: held-out
//! regression quality (mean log KL, as in the `batch` experiment) next to
//! raw kernel fidelity — how closely each random-feature inner product
//! tracks its exact kernel on held-out tuple pairs.

use super::{
    evaluate_kernel_regression, prepare_kernel_pool, Result, RunOutcome, StageExt,
};
use crate::config::ExperimentConfig;
use crate::report::{cell, cell_opt, cell_usize, summarize, ArtifactWriter, TimingRecorder};

const EXPERIMENT: &str = "kernel-compare";
/// Held-out tuple pairs probed for kernel fidelity.
const FIDELITY_PAIRS: usize = 200;

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCompareRow {
    pub kernel: &'static str,
    pub feature_dim: usize,
    pub improper: usize,
    pub mean_log_kl: Option<f64>,
    pub sd_log_kl: Option<f64>,
    /// Mean |κ̂(r,s) − κ(r,s)| over the probe pairs.
    pub mean_abs_kernel_error: f64,
    pub max_abs_kernel_error: f64,
}

#[derive(Debug)]
pub struct KernelCompareReport {
    pub rows: Vec<KernelCompareRow>,
    pub outcome: RunOutcome,
}

pub fn run(cfg: &ExperimentConfig) -> Result<KernelCompareReport> {
    let mut timing = TimingRecorder::new();
    let writer =
        ArtifactWriter::new(&cfg.resolved_output_dir()).stage(EXPERIMENT, "output-dir")?;
    let pool = prepare_kernel_pool(cfg, EXPERIMENT, &mut timing)?;

    // Deterministic probe pairs: walk (i, j) with i < j over the already
    // shuffled test tuples until enough are accumulated.
    let mut probe = Vec::with_capacity(FIDELITY_PAIRS);
    'outer: for i in 0..pool.test.len() {
        for j in (i + 1)..pool.test.len() {
            probe.push((i, j));
            if probe.len() == FIDELITY_PAIRS {
                break 'outer;
            }
        }
    }

    let mut rows = Vec::new();
    for spec in &pool.specs {
        let eval = timing
            .time(&format!("score-kernel {}", spec.name), || {
                evaluate_kernel_regression(
                    &pool.train,
                    &pool.test,
                    spec.featurize.as_ref(),
                    cfg.operator.sigma_02,
                    cfg.operator.sigma_y2,
                )
            })
            .stage(EXPERIMENT, "score-kernels")?;

        let mut mean_err = 0.0;
        let mut max_err = 0.0f64;
        for &(i, j) in &probe {
            let (r, s) = (&pool.test[i].tuple, &pool.test[j].tuple);
            let approx = (spec.featurize)(r)
                .and_then(|fr| (spec.featurize)(s).map(|fs| fr.dot(&fs)))
                .stage(EXPERIMENT, "kernel-fidelity")?;
            let exact = (spec.exact)(r, s).stage(EXPERIMENT, "kernel-fidelity")?;
            let err = (approx - exact).abs();
            mean_err += err;
            max_err = max_err.max(err);
        }
        mean_err /= probe.len() as f64;

        let stats = summarize(&eval.finite_log_kls());
        rows.push(KernelCompareRow {
            kernel: spec.name,
            feature_dim: eval.feature_dim,
            improper: eval.improper,
            mean_log_kl: stats.as_ref().map(|s| s.mean),
            sd_log_kl: stats.as_ref().map(|s| s.sd),
            mean_abs_kernel_error: mean_err,
            max_abs_kernel_error: max_err,
        });
    }

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.kernel.to_string(),
                cell_usize(r.feature_dim),
                cell_usize(pool.train.len()),
                cell_usize(pool.test.len()),
                cell_usize(r.improper),
                cell_opt(r.mean_log_kl),
                cell_opt(r.sd_log_kl),
                cell(r.mean_abs_kernel_error),
                cell(r.max_abs_kernel_error),
            ]
        })
        .collect();
    let mut files = Vec::new();
    files.push(
        writer
            .write_csv(
                "kernel_compare.csv",
                &[
                    "kernel",
                    "feature_dim",
                    "train",
                    "test",
                    "improper",
                    "mean_log_kl",
                    "sd_log_kl",
                    "mean_abs_kernel_error",
                    "max_abs_kernel_error",
                ],
                &csv_rows,
            )
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let mut summary = format!(
        "Kernel comparison on {} train / {} held-out message pairs; fidelity over {} tuple pairs.\n\n",
        pool.train.len(),
        pool.test.len(),
        probe.len()
    );
    for r in &rows {
        summary.push_str(&format!(
            "{}: dim {}, mean log KL {}, improper {}, mean |κ̂−κ| {}\n",
            r.kernel,
            r.feature_dim,
            cell_opt(r.mean_log_kl),
            r.improper,
            cell(r.mean_abs_kernel_error),
        ));
    }
    files.push(
        writer
            .write_text("kernel_compare_summary.txt", &summary)
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_text("kernel_compare_timing.txt", &timing.render())
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let best = rows
        .iter()
        .filter_map(|r| r.mean_log_kl.map(|m| (r.kernel, m)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite means"));
    let headline = match best {
        Some((kernel, mean)) => format!("best kernel by mean log KL: {kernel} ({mean:.3})"),
        None => "no kernel produced projectable predictions".to_string(),
    };
    Ok(KernelCompareReport { rows, outcome: RunOutcome { files, headline } })
}
