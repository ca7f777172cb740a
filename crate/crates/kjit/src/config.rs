//! Experiment configuration.
//!
//! Every runnable experiment is described by one TOML file with a flat
//! `experiment = "..."` / `seed = ...` header and optional `[model]`,
//! `[operator]`, `[oracle]`, `[data]`, `[curves]` and `[study]` sections.
//! Missing fields fall back to the desk-scale defaults baked in here, so a
//! minimal config is just the header. The seed is deliberately *not*
//! defaulted: every run must state it, which is what makes reruns
//! byte-for-byte reproducible.
//!
//! The output directory can be overridden without touching the file through
//! the `KJIT_OUTPUT_DIR` environment variable (useful for scratch runs and
//! for tests that redirect artifacts into a temp dir).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable that overrides [`ExperimentConfig::output_dir`].
pub const OUTPUT_DIR_ENV: &str = "KJIT_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("referenced dataset file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// The seven runnable experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    /// Batch-train message regressors on EP-collected pairs and score
    /// held-out predictions by log KL divergence, one row set per kernel.
    Batch,
    /// Log predictive variance of a batch-trained operator along parametric
    /// test curves and under mean shifts away from the training support.
    Uncertainty,
    /// A sequence of related logistic-regression problems solved with a
    /// persistent just-in-time operator, compared against oracle EP.
    JitLogistic,
    /// A sequence of compound-gamma precision problems with a just-in-time
    /// operator on the collapsed prior factor.
    CompoundGamma,
    /// Four binary classification datasets in sequence with one persistent
    /// operator pair, tracking uncertainty across dataset switches.
    Uci,
    /// Side-by-side table of the five message kernels on one collected pool.
    KernelCompare,
    /// Kernel approximation error over a grid of feature counts.
    FeatureStudy,
}

impl ExperimentId {
    /// Stable kebab-case name, used as the artifact file prefix and in
    /// diagnostics.
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::Batch => "batch",
            ExperimentId::Uncertainty => "uncertainty",
            ExperimentId::JitLogistic => "jit-logistic",
            ExperimentId::CompoundGamma => "compound-gamma",
            ExperimentId::Uci => "uci",
            ExperimentId::KernelCompare => "kernel-compare",
            ExperimentId::FeatureStudy => "feature-study",
        }
    }
}

impl std::fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Synthetic-model and schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Weight dimension of synthetic logistic problems.
    pub d: usize,
    /// Observations per problem.
    pub n: usize,
    /// Number of problems in sequence experiments.
    pub problems: usize,
    /// EP sweeps per problem.
    pub ep_iterations: usize,
    /// EP damping in `(0, 1]`.
    pub damping: f64,
    /// EP sweeps recorded when collecting training messages.
    pub collect_iterations: usize,
    /// Datasets pooled when collecting training messages.
    pub collect_datasets: usize,
    /// Training pairs drawn from the collected pool.
    pub train_messages: usize,
    /// Held-out pairs scored from the collected pool.
    pub test_messages: usize,
    /// Held-out points per problem for classification error.
    pub test_points: usize,
    /// Also run the sampling-oracle-everywhere baseline in `jit-logistic`
    /// (slow; the learned operator and the exact baseline always run).
    pub sampling_baseline: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 10,
            n: 200,
            problems: 10,
            ep_iterations: 10,
            damping: 1.0,
            collect_iterations: 5,
            collect_datasets: 5,
            train_messages: 2000,
            test_messages: 500,
            test_points: 500,
            sampling_baseline: false,
        }
    }
}

/// Learned-operator hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    /// Inner random-feature count.
    pub d_in: usize,
    /// Outer random-feature count (the regression dimension).
    pub d_out: usize,
    /// Observation noise of the Bayesian linear regression.
    pub sigma_y2: f64,
    /// Prior weight variance of the Bayesian linear regression.
    pub sigma_02: f64,
    /// Log predictive variance above which the oracle is consulted.
    pub threshold: f64,
    /// Oracle pairs buffered before the first fit.
    pub minibatch: usize,
}

impl Default for OperatorSection {
    fn default() -> Self {
        OperatorSection {
            d_in: 300,
            d_out: 500,
            sigma_y2: 1e-4,
            sigma_02: 1.0,
            threshold: -8.5,
            minibatch: 300,
        }
    }
}

/// Which numerical oracle the experiment consults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleChoice {
    Quadrature,
    Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub kind: OracleChoice,
    /// Mean of the Gaussian importance proposal.
    pub proposal_mean: f64,
    /// Variance of the Gaussian importance proposal.
    pub proposal_variance: f64,
    /// Importance-sampling particle count.
    pub particles: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            kind: OracleChoice::Quadrature,
            proposal_mean: 0.0,
            proposal_variance: 200.0,
            particles: 500_000,
        }
    }
}

/// External dataset files (the `uci` experiment; empty means synthetic
/// stand-ins).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV files, processed in order.
    pub paths: Vec<PathBuf>,
    /// Label column index; omitted means the last column.
    pub label_column: Option<usize>,
    /// Stratified training points taken per dataset. Halved automatically
    /// for datasets too small to leave a test remainder.
    pub train_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { paths: Vec::new(), label_column: None, train_size: 200 }
    }
}

/// Test curves for the `uncertainty` experiment, parameterized in the
/// (mean, log-variance) plane of the Gaussian incoming message. The second
/// incoming message stays fixed at Beta(1, 2). The exact curve equations are
/// not load-bearing — the defaults are chosen to start inside the training
/// support and leave it, so the variance map has something to flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSection {
    /// Points per curve.
    pub points: usize,
    /// Mean range `[lo, hi]` of the line curve.
    pub line_mean: [f64; 2],
    /// Log-variance of the line as `[c0, c1]`: `c0 + c1·mean`.
    pub line_logvar: [f64; 2],
    /// Mean range `[lo, hi]` of the parabola curve.
    pub parabola_mean: [f64; 2],
    /// Log-variance of the parabola as `[c0, c1, c2]`:
    /// `c0 + c1·mean + c2·mean²`.
    pub parabola_logvar: [f64; 3],
    /// Training tuples probed in the mean-shift diagnostic.
    pub shift_pairs: usize,
    /// Shift size in multiples of the training-mean standard deviation.
    pub shift_sds: f64,
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection {
            points: 61,
            line_mean: [-5.0, 5.0],
            line_logvar: [1.0, -0.2],
            parabola_mean: [-20.0, 20.0],
            parabola_logvar: [-1.0, 0.0, 0.02],
            shift_pairs: 20,
            shift_sds: 10.0,
        }
    }
}

/// Grids and sizes for `feature-study` and `kernel-compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    /// Inner feature counts to sweep.
    pub d_in_grid: Vec<usize>,
    /// Outer feature counts to sweep.
    pub d_out_grid: Vec<usize>,
    /// Tuples in the Gram matrix under study.
    pub tuples: usize,
    /// Per-message feature count of the product kernel (its regression
    /// dimension is this squared, so keep it modest).
    pub product_dim: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            d_in_grid: vec![100, 300, 500],
            d_out_grid: vec![100, 500, 2000],
            tuples: 80,
            product_dim: 45,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallel() -> bool {
    false
}

/// One fully resolved experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    /// Master seed; all per-problem and per-component seeds derive from it.
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub operator: OperatorSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub curves: CurveSection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Run independent problems on a thread pool (each with its own derived
    /// seed, so results match the single-threaded run).
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

impl ExperimentConfig {
    /// A config with every optional section at its default.
    pub fn new(experiment: ExperimentId, seed: u64) -> Self {
        ExperimentConfig {
            experiment,
            seed,
            model: ModelSection::default(),
            operator: OperatorSection::default(),
            oracle: OracleSection::default(),
            data: DataSection::default(),
            curves: CurveSection::default(),
            study: StudySection::default(),
            output_dir: default_output_dir(),
            parallel: false,
        }
    }

    /// Reads and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a TOML string (no file involved) and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source: Box::new(source),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Where artifacts go: the `KJIT_OUTPUT_DIR` environment variable when
    /// set, the config's `output_dir` otherwise.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Checks value ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || m.n == 0 || m.problems == 0 {
            return Err(ConfigError::Invalid(
                "model.d, model.n and model.problems must be at least 1".into(),
            ));
        }
        if m.ep_iterations == 0 || m.collect_iterations == 0 || m.collect_datasets == 0 {
            return Err(ConfigError::Invalid(
                "model iteration and collection counts must be at least 1".into(),
            ));
        }
        if !(m.damping > 0.0 && m.damping <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "model.damping must lie in (0, 1], got {}",
                m.damping
            )));
        }
        if m.train_messages == 0 || m.test_messages == 0 || m.test_points == 0 {
            return Err(ConfigError::Invalid(
                "model.train_messages, test_messages and test_points must be at least 1".into(),
            ));
        }

        let o = &self.operator;
        if o.d_in == 0 || o.d_out == 0 || o.minibatch == 0 {
            return Err(ConfigError::Invalid(
                "operator.d_in, d_out and minibatch must be at least 1".into(),
            ));
        }
        if !(o.sigma_y2 > 0.0) || !(o.sigma_02 > 0.0) || !o.threshold.is_finite() {
            return Err(ConfigError::Invalid(
                "operator.sigma_y2 and sigma_02 must be positive and threshold finite".into(),
            ));
        }

        let or = &self.oracle;
        if or.particles == 0 || !(or.proposal_variance > 0.0) || !or.proposal_mean.is_finite() {
            return Err(ConfigError::Invalid(
                "oracle.particles must be ≥ 1 and the proposal proper".into(),
            ));
        }

        if self.data.train_size == 0 {
            return Err(ConfigError::Invalid("data.train_size must be at least 1".into()));
        }
        for path in &self.data.paths {
            if !path.exists() {
                return Err(ConfigError::MissingFile(path.clone()));
            }
        }

        let c = &self.curves;
        if c.points < 2 || c.shift_pairs == 0 {
            return Err(ConfigError::Invalid(
                "curves.points must be ≥ 2 and curves.shift_pairs ≥ 1".into(),
            ));
        }
        let ranges_ok = c.line_mean[0] < c.line_mean[1] && c.parabola_mean[0] < c.parabola_mean[1];
        let coeffs_finite = c
            .line_mean
            .iter()
            .chain(c.line_logvar.iter())
            .chain(c.parabola_mean.iter())
            .chain(c.parabola_logvar.iter())
            .all(|v| v.is_finite())
            && c.shift_sds.is_finite();
        if !ranges_ok || !coeffs_finite {
            return Err(ConfigError::Invalid(
                "curve ranges must be increasing and all curve coefficients finite".into(),
            ));
        }

        let s = &self.study;
        if s.d_in_grid.is_empty() || s.d_out_grid.is_empty() {
            return Err(ConfigError::Invalid("study grids must be non-empty".into()));
        }
        if s.d_in_grid.iter().chain(s.d_out_grid.iter()).any(|&v| v == 0) {
            return Err(ConfigError::Invalid("study grid entries must be at least 1".into()));
        }
        if s.tuples < 2 || s.product_dim == 0 {
            return Err(ConfigError::Invalid(
                "study.tuples must be ≥ 2 and study.product_dim ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "experiment = \"jit-logistic\"\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment, ExperimentId::JitLogistic);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.n, 200);
        assert_eq!(cfg.operator.d_out, 500);
        assert_eq!(cfg.oracle.kind, OracleChoice::Quadrature);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert!(!cfg.parallel);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = ExperimentConfig::from_toml_str("experiment = \"batch\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
experiment = "compound-gamma"
seed = 3
output_dir = "scratch"

[model]
problems = 20
ep_iterations = 30

[operator]
minibatch = 10
threshold = -9.0

[oracle]
kind = "importance"
particles = 1000
"#,
        )
        .unwrap();
        assert_eq!(cfg.model.problems, 20);
        assert_eq!(cfg.model.ep_iterations, 30);
        assert_eq!(cfg.model.n, 200, "untouched fields keep their defaults");
        assert_eq!(cfg.operator.minibatch, 10);
        assert_eq!(cfg.operator.threshold, -9.0);
        assert_eq!(cfg.oracle.kind, OracleChoice::Importance);
        assert_eq!(cfg.oracle.particles, 1000);
        assert_eq!(cfg.output_dir, PathBuf::from("scratch"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str(
            "experiment = \"batch\"\nseed = 1\ntypo_key = 2\n",
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
        let err = ExperimentConfig::from_toml_str(
            "experiment = \"batch\"\nseed = 1\n[model]\nnn = 5\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("nn"), "{err}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for (section, line) in [
            ("[model]", "damping = 0.0"),
            ("[model]", "damping = 1.5"),
            ("[model]", "n = 0"),
            ("[operator]", "sigma_y2 = 0.0"),
            ("[operator]", "minibatch = 0"),
            ("[oracle]", "particles = 0"),
            ("[curves]", "points = 1"),
            ("[study]", "d_in_grid = []"),
        ] {
            let text = format!("experiment = \"batch\"\nseed = 1\n{section}\n{line}\n");
            let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
            assert!(matches!(err, ConfigError::Invalid(_)), "{section} {line}: {err}");
        }
    }

    #[test]
    fn missing_dataset_files_fail_validation() {
        let err = ExperimentConfig::from_toml_str(
            "experiment = \"uci\"\nseed = 1\n[data]\npaths = [\"/no/such/file.csv\"]\n",
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(_)), "{err}");
    }

    #[test]
    fn kebab_case_ids_round_trip() {
        for (text, id) in [
            ("batch", ExperimentId::Batch),
            ("uncertainty", ExperimentId::Uncertainty),
            ("jit-logistic", ExperimentId::JitLogistic),
            ("compound-gamma", ExperimentId::CompoundGamma),
            ("uci", ExperimentId::Uci),
            ("kernel-compare", ExperimentId::KernelCompare),
            ("feature-study", ExperimentId::FeatureStudy),
        ] {
            let cfg = ExperimentConfig::from_toml_str(&format!(
                "experiment = \"{text}\"\nseed = 0\n"
            ))
            .unwrap();
            assert_eq!(cfg.experiment, id);
            assert_eq!(id.as_str(), text);
            assert_eq!(id.to_string(), text);
        }
    }

    #[test]
    fn environment_variable_overrides_output_dir() {
        let cfg = ExperimentConfig::new(ExperimentId::FeatureStudy, 1);
        assert_eq!(cfg.resolved_output_dir(), PathBuf::from("out"));
        std::env::set_var(OUTPUT_DIR_ENV, "/tmp/kjit-override");
        let resolved = cfg.resolved_output_dir();
        std::env::remove_var(OUTPUT_DIR_ENV);
        assert_eq!(resolved, PathBuf::from("/tmp/kjit-override"));
    }

    #[test]
    fn config_survives_a_toml_round_trip() {
        let mut cfg = ExperimentConfig::new(ExperimentId::Uncertainty, 99);
        cfg.model.damping = 0.5;
        cfg.curves.parabola_logvar = [0.5, -0.1, 0.01];
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
