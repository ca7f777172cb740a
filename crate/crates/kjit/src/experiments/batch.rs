//! Batch message regression: collect (incoming tuple → projected target)
//! pairs from exact EP runs, train a Bayesian linear regression per kernel
//! on a random split, and score each held-out prediction by the log KL
//! divergence between the projected truth and the projected prediction.
//!
//! Artifacts: `batch_log_kl.csv` (one row per kernel × held-out pair),
//! `batch_kernels.csv` (the aggregated per-kernel table), a summary and a
//! timing file.

use super::{
    evaluate_kernel_regression, fail, prepare_kernel_pool, KernelEval, Result, RunOutcome,
    StageExt,
};
use crate::config::ExperimentConfig;
use crate::report::{
    cell_bool, cell_opt, cell_usize, describe, summarize, ArtifactWriter, TimingRecorder,
};
use rayon::prelude::*;

const EXPERIMENT: &str = "batch";

/// Aggregated held-out performance of one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelScore {
    pub kernel: &'static str,
    pub feature_dim: usize,
    /// Held-out predictions that could not be projected to a proper
    /// distribution (excluded from the mean).
    pub improper: usize,
    pub mean_log_kl: Option<f64>,
    pub sd_log_kl: Option<f64>,
}

#[derive(Debug)]
pub struct BatchReport {
    pub scores: Vec<KernelScore>,
    pub train_size: usize,
    pub test_size: usize,
    pub outcome: RunOutcome,
}

impl BatchReport {
    /// The two-stage Gaussian-on-joint-embeddings kernel — the one the
    /// just-in-time operator uses.
    pub fn primary(&self) -> &KernelScore {
        self.scores
            .iter()
            .find(|s| s.kernel == "gaussian-joint")
            .expect("the kernel zoo always contains the two-stage kernel")
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<BatchReport> {
    let mut timing = TimingRecorder::new();
    let writer =
        ArtifactWriter::new(&cfg.resolved_output_dir()).stage(EXPERIMENT, "output-dir")?;
    let pool = prepare_kernel_pool(cfg, EXPERIMENT, &mut timing)?;

    let evals: Vec<KernelEval> = if cfg.parallel {
        timing
            .time("score-kernels", || {
                pool.specs
                    .par_iter()
                    .map(|spec| {
                        evaluate_kernel_regression(
                            &pool.train,
                            &pool.test,
                            spec.featurize.as_ref(),
                            cfg.operator.sigma_02,
                            cfg.operator.sigma_y2,
                        )
                    })
                    .collect::<std::result::Result<_, _>>()
            })
            .stage(EXPERIMENT, "score-kernels")?
    } else {
        let mut evals = Vec::with_capacity(pool.specs.len());
        for spec in &pool.specs {
            let label = format!("score-kernel {}", spec.name);
            evals.push(
                timing
                    .time(&label, || {
                        evaluate_kernel_regression(
                            &pool.train,
                            &pool.test,
                            spec.featurize.as_ref(),
                            cfg.operator.sigma_02,
                            cfg.operator.sigma_y2,
                        )
                    })
                    .stage(EXPERIMENT, "score-kernels")?,
            );
        }
        evals
    };

    let mut rows = Vec::new();
    let mut table = Vec::new();
    let mut scores = Vec::new();
    let mut summary = String::from(
        "Held-out log KL divergence of batch-trained message regression, per kernel.\n",
    );
    summary.push_str(&format!(
        "train pairs: {}, test pairs: {} (activation-direction targets)\n\n",
        pool.train.len(),
        pool.test.len()
    ));
    for (spec, eval) in pool.specs.iter().zip(&evals) {
        for (pair, log_kl) in eval.log_kls.iter().enumerate() {
            rows.push(vec![
                spec.name.to_string(),
                cell_usize(pair),
                cell_opt(*log_kl),
                cell_bool(log_kl.is_some()),
            ]);
        }
        let finite = eval.finite_log_kls();
        let stats = summarize(&finite);
        summary.push_str(&describe(&format!("log KL [{}]", spec.name), &finite));
        summary.push_str(&format!(" — improper {} of {}\n", eval.improper, eval.log_kls.len()));
        table.push(vec![
            spec.name.to_string(),
            cell_usize(eval.feature_dim),
            cell_usize(pool.train.len()),
            cell_usize(eval.log_kls.len()),
            cell_usize(eval.improper),
            cell_opt(stats.as_ref().map(|s| s.mean)),
            cell_opt(stats.as_ref().map(|s| s.sd)),
        ]);
        scores.push(KernelScore {
            kernel: spec.name,
            feature_dim: eval.feature_dim,
            improper: eval.improper,
            mean_log_kl: stats.as_ref().map(|s| s.mean),
            sd_log_kl: stats.as_ref().map(|s| s.sd),
        });
    }

    let mut files = Vec::new();
    files.push(
        writer
            .write_csv("batch_log_kl.csv", &["kernel", "pair", "log_kl", "projectable"], &rows)
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_csv(
                "batch_kernels.csv",
                &["kernel", "feature_dim", "train", "test", "improper", "mean_log_kl", "sd_log_kl"],
                &table,
            )
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer.write_text("batch_summary.txt", &summary).stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_text("batch_timing.txt", &timing.render())
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let primary = scores
        .iter()
        .find(|s| s.kernel == "gaussian-joint")
        .ok_or_else(|| fail(EXPERIMENT, "score-kernels", "no primary kernel score".into()))?;
    let headline = match primary.mean_log_kl {
        Some(mean) => format!(
            "gaussian-joint: mean log KL {mean:.3} over {} held-out pairs",
            pool.test.len() - primary.improper
        ),
        None => "gaussian-joint: no projectable held-out predictions".to_string(),
    };
    Ok(BatchReport {
        scores,
        train_size: pool.train.len(),
        test_size: pool.test.len(),
        outcome: RunOutcome { files, headline },
    })
}
