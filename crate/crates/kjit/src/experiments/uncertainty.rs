//! Where does the operator know that it does not know?
//!
//! A just-in-time operator is batch-trained on collected message pairs,
//! then queried — without updating — along two parametric test curves in
//! the (mean, log-variance) plane of the Gaussian incoming message, with
//! the Beta incoming message pinned to Beta(1, 2). Inside the training
//! support the log predictive variance should sit near the observation
//! noise floor; off support it should grow, which is exactly the signal the
//! oracle gate runs on. A second diagnostic shifts real training tuples by
//! a multiple of the training-mean standard deviation and records the
//! variance before and after.
//!
//! The curve equations are config inputs (`[curves]`) because the reference
//! plots do not state them; the defaults are approximate stand-ins.

use super::{collect_logistic_pool, fail, Result, RunOutcome, StageExt};
use crate::config::ExperimentConfig;
use crate::expfam::ExpFamMessage;
use crate::features::MessageTuple;
use crate::graph::TargetMode;
use crate::numeric::derive_seed;
use crate::operator::{JitConfig, JitOperator, OperatorRecord, OracleSpec};
use crate::report::{cell, cell_bool, cell_usize, describe, ArtifactWriter, TimingRecorder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXPERIMENT: &str = "uncertainty";

/// One probed point on a test curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub curve: &'static str,
    pub z_mean: f64,
    pub z_log_variance: f64,
    /// Log predictive variance per output statistic.
    pub log_variances: [f64; 2],
    /// Whether the gate would send this query to the oracle.
    pub gated: bool,
}

#[derive(Debug)]
pub struct UncertaintyReport {
    pub train_size: usize,
    /// Mean and standard deviation of the training tuples' Gaussian means.
    pub train_mean_center: f64,
    pub train_mean_sd: f64,
    pub curve_points: Vec<CurvePoint>,
    /// First-output log predictive variance at real training tuples …
    pub shift_base: Vec<f64>,
    /// … and at the same tuples with the Gaussian mean shifted by
    /// `curves.shift_sds` training standard deviations.
    pub shift_shifted: Vec<f64>,
    pub outcome: RunOutcome,
}

impl UncertaintyReport {
    /// Mean first-output log predictive variance along one curve.
    pub fn mean_log_variance(&self, curve: &str) -> f64 {
        let values: Vec<f64> = self
            .curve_points
            .iter()
            .filter(|p| p.curve == curve)
            .map(|p| p.log_variances[0])
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn run(cfg: &ExperimentConfig) -> Result<UncertaintyReport> {
    let mut timing = TimingRecorder::new();
    let writer =
        ArtifactWriter::new(&cfg.resolved_output_dir()).stage(EXPERIMENT, "output-dir")?;

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
        .stage(EXPERIMENT, "collect-messages")?;
    let mut records = pool.input;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4));
    records.shuffle(&mut rng);
    records.truncate(cfg.model.train_messages);
    if records.len() < 2 {
        return Err(fail(
            EXPERIMENT,
            "collect-messages",
            format!("only {} training pairs collected", records.len()),
        ));
    }

    let mut operator = JitOperator::new(
        JitConfig {
            d_in: cfg.operator.d_in,
            d_out: cfg.operator.d_out,
            threshold: cfg.operator.threshold,
            minibatch_size: records.len(),
            sigma_y2: cfg.operator.sigma_y2,
            sigma_02: cfg.operator.sigma_02,
            seed: derive_seed(cfg.seed, 5),
            target_mode: TargetMode::Belief,
        },
        OracleSpec::LogisticQuadrature,
    );
    timing
        .time("train-operator", || operator.warmup_fit(&records))
        .stage(EXPERIMENT, "train-operator")?;
    let thresholds: Vec<f64> =
        operator.thresholds().expect("operator was just trained").to_vec();

    let train_means: Vec<f64> = records
        .iter()
        .map(|r| r.tuple.messages()[0].mean_variance().expect("collected tuples are proper").0)
        .collect();
    let (center, sd) = mean_and_sd(&train_means);

    // ---- curves ----
    let curves: [(&'static str, [f64; 2], [f64; 3]); 2] = [
        ("line", cfg.curves.line_mean, [cfg.curves.line_logvar[0], cfg.curves.line_logvar[1], 0.0]),
        ("parabola", cfg.curves.parabola_mean, cfg.curves.parabola_logvar),
    ];
    let mut curve_points = Vec::new();
    let mut curve_rows = Vec::new();
    for (name, [lo, hi], coeffs) in curves {
        for k in 0..cfg.curves.points {
            let t = k as f64 / (cfg.curves.points - 1) as f64;
            let m = lo + t * (hi - lo);
            let lv = coeffs[0] + coeffs[1] * m + coeffs[2] * m * m;
            let z = ExpFamMessage::gaussian(m, lv.exp()).stage(EXPERIMENT, "curves")?;
            let p = ExpFamMessage::beta(1.0, 2.0).stage(EXPERIMENT, "curves")?;
            let tuple = MessageTuple::pair(z, p).stage(EXPERIMENT, "curves")?;
            let (_, log_variances) =
                operator.predict_stats(&tuple).stage(EXPERIMENT, "curves")?;
            let gated =
                log_variances.iter().zip(&thresholds).any(|(lv, thr)| lv > thr);
            let point = CurvePoint {
                curve: name,
                z_mean: m,
                z_log_variance: lv,
                log_variances: [log_variances[0], log_variances[1]],
                gated,
            };
            curve_rows.push(vec![
                name.to_string(),
                cell_usize(k),
                cell(point.z_mean),
                cell(point.z_log_variance),
                cell(point.log_variances[0]),
                cell(point.log_variances[1]),
                cell_bool(point.gated),
            ]);
            curve_points.push(point);
        }
    }

    // ---- mean-shift diagnostic ----
    let shift = cfg.curves.shift_sds * sd;
    let probes: Vec<&OperatorRecord> =
        records.iter().take(cfg.curves.shift_pairs).collect();
    let mut shift_base = Vec::with_capacity(probes.len());
    let mut shift_shifted = Vec::with_capacity(probes.len());
    let mut shift_rows = Vec::with_capacity(probes.len());
    for (i, record) in probes.iter().enumerate() {
        let (_, base) =
            operator.predict_stats(&record.tuple).stage(EXPERIMENT, "mean-shift")?;
        let (m, v) =
            record.tuple.messages()[0].mean_variance().expect("collected tuples are proper");
        let moved_z = ExpFamMessage::gaussian(m + shift, v).stage(EXPERIMENT, "mean-shift")?;
        let moved = MessageTuple::pair(moved_z, record.tuple.messages()[1].clone())
            .stage(EXPERIMENT, "mean-shift")?;
        let (_, far) = operator.predict_stats(&moved).stage(EXPERIMENT, "mean-shift")?;
        shift_rows.push(vec![cell_usize(i), cell(base[0]), cell(far[0])]);
        shift_base.push(base[0]);
        shift_shifted.push(far[0]);
    }

    // ---- artifacts ----
    let mut files = Vec::new();
    files.push(
        writer
            .write_csv(
                "uncertainty_curves.csv",
                &[
                    "curve",
                    "point",
                    "z_mean",
                    "z_log_variance",
                    "pred_log_variance_0",
                    "pred_log_variance_1",
                    "oracle_gated",
                ],
                &curve_rows,
            )
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_csv(
                "uncertainty_shift.csv",
                &["pair", "base_log_variance", "shifted_log_variance"],
                &shift_rows,
            )
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let line_values: Vec<f64> = curve_points
        .iter()
        .filter(|p| p.curve == "line")
        .map(|p| p.log_variances[0])
        .collect();
    let parabola_values: Vec<f64> = curve_points
        .iter()
        .filter(|p| p.curve == "parabola")
        .map(|p| p.log_variances[0])
        .collect();
    let summary = format!(
        "Log predictive variance of a batch-trained operator ({} training pairs).\n\n{}\n{}\n{}\n{}\n",
        records.len(),
        describe("line curve log variance", &line_values),
        describe("parabola curve log variance", &parabola_values),
        describe("training tuples (shift base)", &shift_base),
        describe(
            &format!("shifted by {} training sds", cell(cfg.curves.shift_sds)),
            &shift_shifted
        ),
    );
    files.push(
        writer
            .write_text("uncertainty_summary.txt", &summary)
            .stage(EXPERIMENT, "write-artifacts")?,
    );
    files.push(
        writer
            .write_text("uncertainty_timing.txt", &timing.render())
            .stage(EXPERIMENT, "write-artifacts")?,
    );

    let (line_mean, _) = mean_and_sd(&line_values);
    let (parabola_mean, _) = mean_and_sd(&parabola_values);
    let (base_mean, _) = mean_and_sd(&shift_base);
    let (far_mean, _) = mean_and_sd(&shift_shifted);
    let headline = format!(
        "mean log predictive variance: line {line_mean:.2}, parabola {parabola_mean:.2}; \
         mean shift moves training tuples from {base_mean:.2} to {far_mean:.2}"
    );
    Ok(UncertaintyReport {
        train_size: records.len(),
        train_mean_center: center,
        train_mean_sd: sd,
        curve_points,
        shift_base,
        shift_shifted,
        outcome: RunOutcome { files, headline },
    })
}
