//! How faithfully the two-stage random features reproduce the kernel they
//! approximate, as a function of both feature counts.
//!
//! A pool of message tuples is collected from quadrature EP, the exact
//! embedding kernel's Gram matrix is computed once, and then each
//! `(d_in, d_out)` grid cell rebuilds the random feature map at that size
//! and measures `‖Ψ̂ᵀΨ̂ − K‖_F / ‖K‖_F` plus the worst single entry. Both
//! errors should shrink as either feature count grows — this is the study
//! that justifies the default sizes used everywhere else.

use super::{collect_logistic_pool, fail, Result, RunOutcome, StageExt};
use crate::config::ExperimentConfig;
use crate::features::{exact_embedding_kernel, median_heuristic, FeatureMap, MessageTuple};
use crate::numeric::derive_seed;
use crate::report::{cell, cell_usize, ArtifactWriter, TimingRecorder};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXPERIMENT: &str = "feature-study";

#[derive(Debug, Clone, Copy)]
pub struct StudyRow {
    pub d_in: usize,
    pub d_out: usize,
    /// `‖Ψ̂ᵀΨ̂ − K‖_F / ‖K‖_F` over the tuple pool.
    pub rel_frobenius: f64,
    pub max_abs: f64,
}

#[derive(Debug)]
pub struct FeatureStudyReport {
    /// Grid rows in `(d_in, d_out)` iteration order.
    pub rows: Vec<StudyRow>,
    pub outcome: RunOutcome,
}

impl FeatureStudyReport {
    pub fn cell(&self, d_in: usize, d_out: usize) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.d_in == d_in && r.d_out == d_out)
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<FeatureStudyReport> {
    let mut timing = TimingRecorder::new();
    let writer =
        ArtifactWriter::new(&cfg.resolved_output_dir()).stage(EXPERIMENT, "output-dir")?;
    if cfg.study.d_in_grid.is_empty() || cfg.study.d_out_grid.is_empty() {
        return Err(fail(EXPERIMENT, "grid", "empty feature-count grid".into()));
    }

    let pool = timing
        .time("collect-messages", || {
            collect_logistic_pool(cfg.model.d, cfg.model.n, 1, cfg.model.collect_iterations, cfg.seed)
        })
        .stage(EXPERIMENT, "collect-messages")?;
    let mut tuples: Vec<MessageTuple> = pool.input.into_iter().map(|r| r.tuple).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    tuples.shuffle(&mut rng);
    tuples.truncate(cfg.study.tuples);
    if tuples.len() < 2 {
        return Err(fail(
            EXPERIMENT,
            "collect-messages",
            format!("only {} tuples collected, need at least 2", tuples.len()),
        ));
    }
    let t = tuples.len();

    let max_d_in = *cfg.study.d_in_grid.iter().max().expect("non-empty grid");
    let widths = median_heuristic(&tuples, max_d_in, derive_seed(cfg.seed, 2))
        .stage(EXPERIMENT, "median-heuristic")?
        .widths;

    // Exact Gram matrix, computed once.
    let mut exact = DMatrix::zeros(t, t);
    timing.time("exact-gram", || -> Result<()> {
        for i in 0..t {
            for j in i..t {
                let k = exact_embedding_kernel(&tuples[i], &tuples[j], &widths)
                    .stage(EXPERIMENT, "exact-gram")?;
                exact[(i, j)] = k;
                exact[(j, i)] = k;
            }
        }
        Ok(())
    })?;
    let exact_norm = exact.norm();

    let mut rows = Vec::new();
    for (i, &d_in) in cfg.study.d_in_grid.iter().enumerate() {
        // One seed per d_in row: the d_out cells of a row then share their
        // inner embedding, so the outer feature count is the only thing
        // changing along the row.
        let seed = derive_seed(cfg.seed, 10 + i as u64);
        for &d_out in &cfg.study.d_out_grid {
            let label = format!("features {d_in}x{d_out}");
            let approx = timing
                .time(&label, || -> std::result::Result<_, crate::features::FeatureError> {
                    let map = FeatureMap::new(seed, d_in, d_out, &widths)?;
                    let psi = map.feature_matrix(&tuples)?;
                    Ok(psi.transpose() * psi)
                })
                .stage(EXPERIMENT, "featurize")?;
            let diff = &approx - &exact;
            rows.push(StudyRow {
                d_in,
                d_out,
                rel_frobenius: diff.norm() / exact_norm,
                max_abs: diff.iter().fold(0.0f64, |acc, v| acc.max(v.abs())),
            });
        }
    }

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                cell_usize(r.d_in),
                cell_usize(r.d_out),
                cell(r.rel_frobenius),
                cell(r.max_abs),
            ]
        })
        .collect();
    let mut files = Vec::new();
    files.push(
        writer
            .write_csv(
                "feature_study.csv",
                &["d_in", "d_out", "rel_frobenius_error", "max_abs_error"],
                &csv_rows,
            )
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let largest = rows.last().expect("non-empty grid");
    let smallest = rows.first().expect("non-empty grid");
    let mut summary = format!(
        "Gram-matrix reconstruction over {t} collected tuples.\n\
         d_in grid: {:?}; d_out grid: {:?}\n\n",
        cfg.study.d_in_grid, cfg.study.d_out_grid,
    );
    for r in &rows {
        summary.push_str(&format!(
            "d_in {:>5}, d_out {:>5}: rel Frobenius {}, max abs {}\n",
            r.d_in,
            r.d_out,
            cell(r.rel_frobenius),
            cell(r.max_abs),
        ));
    }
    summary.push_str(&format!(
        "\nsmallest cell ({}, {}): rel Frobenius {}\nlargest cell ({}, {}): rel Frobenius {}\n",
        smallest.d_in,
        smallest.d_out,
        cell(smallest.rel_frobenius),
        largest.d_in,
        largest.d_out,
        cell(largest.rel_frobenius),
    ));
    files.push(
        writer
            .write_text("feature_study_summary.txt", &summary)
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_text("feature_study_timing.txt", &timing.render())
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let headline = format!(
        "rel Frobenius error {:.4} at ({}, {}) features, {:.4} at ({}, {})",
        smallest.rel_frobenius,
        smallest.d_in,
        smallest.d_out,
        largest.rel_frobenius,
        largest.d_in,
        largest.d_out,
    );
    Ok(FeatureStudyReport { rows, outcome: RunOutcome { files, headline } })
}
