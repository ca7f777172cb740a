//! Thin command-line front end over the library: run an experiment from a
//! TOML config, or drive the collect → train → evaluate pipeline for a
//! single operator by hand.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kjit::config::ExperimentConfig;
use kjit::experiments::{collect_message_pools, gaussian_log_kl, oracle_spec_for, run_experiment};
use kjit::graph::TargetMode;
use kjit::numeric::derive_seed;
use kjit::operator::{JitConfig, JitOperator, OperatorRecord};
use kjit::report::{cell, cell_bool, cell_opt, describe, render_report};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "kjit",
    version,
    about = "Just-in-time message operators for expectation propagation",
    long_about = "Runs the bundled experiments (see configs/*.toml) and exposes the \
                  collect → train → evaluate steps of the operator pipeline as \
                  individual verbs for ad-hoc use."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// How an operator applies its predicted statistics during inference.
#[derive(Clone, Copy, ValueEnum)]
enum TargetModeArg {
    /// Predictions are moment-matched beliefs; the outgoing message is the
    /// belief divided by the cavity.
    Belief,
    /// Predictions are the outgoing message's natural parameters directly.
    Outgoing,
}

impl From<TargetModeArg> for TargetMode {
    fn from(mode: TargetModeArg) -> Self {
        match mode {
            TargetModeArg::Belief => TargetMode::Belief,
            TargetModeArg::Outgoing => TargetMode::Outgoing,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config and write its artifacts.
    Run {
        /// TOML experiment config.
        config: PathBuf,
    },
    /// Collect oracle message pairs into JSONL pools in the output directory.
    CollectMessages {
        /// TOML experiment config (the experiment picks the model family).
        config: PathBuf,
    },
    /// Fit a fresh operator on a collected JSONL pool and save it as JSON.
    TrainOperator {
        /// TOML experiment config (supplies sizes, seed and oracle).
        config: PathBuf,
        /// Collected records; defaults to `messages_input.jsonl` (or
        /// `messages_prior.jsonl` for the compound-gamma model) in the
        /// output directory.
        #[arg(long)]
        messages: Option<PathBuf>,
        /// Where to save the operator; defaults to `operator.json` in the
        /// output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "belief")]
        target_mode: TargetModeArg,
    },
    /// Score a saved operator on a JSONL pool of held-out records.
    EvalOperator {
        /// Operator JSON written by `train-operator`.
        operator: PathBuf,
        /// Held-out records to score against.
        messages: PathBuf,
        /// Also write per-record predictions and errors to this CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a digest of an experiment output directory.
    Report {
        /// Directory holding the CSV and summary artifacts.
        dir: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::Run { config } => run(&config),
        Command::CollectMessages { config } => collect(&config),
        Command::TrainOperator { config, messages, out, target_mode } => {
            train(&config, messages, out, target_mode.into())
        }
        Command::EvalOperator { operator, messages, csv } => eval(&operator, &messages, csv),
        Command::Report { dir } => {
            print!("{}", render_report(&dir).with_context(|| format!("reading {}", dir.display()))?);
            Ok(())
        }
    }
}

fn run(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let outcome = run_experiment(&cfg)?;
    println!("{}", outcome.headline);
    for file in &outcome.files {
        println!("wrote {}", file.display());
    }
    Ok(())
}

fn collect(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, pool) in collect_message_pools(&cfg)? {
        let path = dir.join(format!("messages_{name}.jsonl"));
        let mut out = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        for record in &pool {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        println!("wrote {} ({} records)", path.display(), pool.len());
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<OperatorRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: OperatorRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        records.push(record);
    }
    if records.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(records)
}

fn train(
    config: &Path,
    messages: Option<PathBuf>,
    out: Option<PathBuf>,
    target_mode: TargetMode,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = cfg.resolved_output_dir();
    let default_pool = match cfg.experiment {
        kjit::config::ExperimentId::CompoundGamma => "messages_prior.jsonl",
        _ => "messages_input.jsonl",
    };
    let messages = messages.unwrap_or_else(|| dir.join(default_pool));
    let out = out.unwrap_or_else(|| dir.join("operator.json"));

    let mut records = read_records(&messages)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 6));
    records.shuffle(&mut rng);
    records.truncate(cfg.model.train_messages);

    let mut operator = JitOperator::new(
        JitConfig {
            d_in: cfg.operator.d_in,
            d_out: cfg.operator.d_out,
            threshold: cfg.operator.threshold,
            minibatch_size: records.len(),
            sigma_y2: cfg.operator.sigma_y2,
            sigma_02: cfg.operator.sigma_02,
            seed: derive_seed(cfg.seed, 7),
            target_mode,
        },
        oracle_spec_for(&cfg)?,
    );
    operator.warmup_fit(&records)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    operator.save(&out)?;
    println!(
        "fitted on {} records ({} features in, {} out), thresholds {:?}",
        records.len(),
        cfg.operator.d_in,
        cfg.operator.d_out,
        operator.thresholds().unwrap_or(&[]),
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(operator: &Path, messages: &Path, csv: Option<PathBuf>) -> Result<()> {
    let op = JitOperator::load(operator)?;
    if !op.is_trained() {
        bail!("{} holds an unfitted operator; run train-operator first", operator.display());
    }
    let records = read_records(messages)?;
    let thresholds = op.thresholds().map(<[f64]>::to_vec);

    let mut abs_errs = [Vec::new(), Vec::new()];
    let mut log_kls = Vec::new();
    let mut mean_log_vars = Vec::new();
    let mut improper = 0usize;
    let mut gated = 0usize;
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let (pred, log_vars) = op
            .predict_stats(&record.tuple)
            .with_context(|| format!("record {i} in {}", messages.display()))?;
        let errs =
            [0, 1].map(|j| (pred.values[j] - record.targets.values[j]).abs());
        abs_errs[0].push(errs[0]);
        abs_errs[1].push(errs[1]);
        let log_kl = gaussian_log_kl(&record.targets, &pred);
        match log_kl {
            Some(v) => log_kls.push(v),
            None => improper += 1,
        }
        let mean_log_var = log_vars.iter().sum::<f64>() / log_vars.len() as f64;
        mean_log_vars.push(mean_log_var);
        let is_gated = thresholds
            .as_deref()
            .map(|t| log_vars.iter().zip(t).any(|(lv, thr)| lv > thr))
            .unwrap_or(true);
        gated += usize::from(is_gated);
        if csv.is_some() {
            csv_rows.push(vec![
                i.to_string(),
                format!("{:?}", record.targets.family).to_lowercase(),
                cell(record.targets.values[0]),
                cell(record.targets.values[1]),
                cell(pred.values[0]),
                cell(pred.values[1]),
                cell(errs[0]),
                cell(errs[1]),
                cell_opt(log_kl),
                cell(mean_log_var),
                cell_bool(is_gated),
            ]);
        }
    }

    println!("{} records from {}", records.len(), messages.display());
    println!("{}", describe("abs error (first statistic)", &abs_errs[0]));
    println!("{}", describe("abs error (second statistic)", &abs_errs[1]));
    if !log_kls.is_empty() {
        println!("{}", describe("log KL (truth vs prediction)", &log_kls));
    }
    if improper > 0 {
        println!("records without a projectable KL: {improper}");
    }
    println!("{}", describe("mean log predictive variance", &mean_log_vars));
    println!(
        "records above the oracle threshold: {gated}/{} ({:.1}%)",
        records.len(),
        100.0 * gated as f64 / records.len() as f64
    );

    if let Some(path) = csv {
        let mut w = csv::Writer::from_path(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        w.write_record([
            "record",
            "family",
            "target_0",
            "target_1",
            "pred_0",
            "pred_1",
            "abs_err_0",
            "abs_err_1",
            "log_kl",
            "mean_log_variance",
            "gated",
        ])?;
        for row in &csv_rows {
            w.write_record(row)?;
        }
        w.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
