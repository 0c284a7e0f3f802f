//! Experiment configs, validation and the runners behind the command line.
//!
//! A config is a flat set of dotted `key = value` pairs. Runs write
//! `config.echo` (every key, fully resolved), `metrics.csv` and
//! experiment-specific artifacts into `output_dir`.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::digits::{self, DigitArch, DigitDatasetSpec, DigitTrialReport, GlyphAtlas};
use crate::divergence;
use crate::gmm::{self, CoverageCriterion, RingMixtureSpec, TrialReport};
use crate::nn::{Activation, OptimizerKind};
use crate::objectives::{self, GradientPenaltyConfig, LossScheme};
use crate::rng::{stream, substream};
use crate::train::{NoiseDistribution, TrialConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Theorem,
    Curves,
    GradMag,
    Gmm,
    Digits,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::Theorem => "theorem",
            ExperimentKind::Curves => "curves",
            ExperimentKind::GradMag => "gradmag",
            ExperimentKind::Gmm => "gmm",
            ExperimentKind::Digits => "digits",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "theorem" => Ok(ExperimentKind::Theorem),
            "curves" => Ok(ExperimentKind::Curves),
            "gradmag" => Ok(ExperimentKind::GradMag),
            "gmm" => Ok(ExperimentKind::Gmm),
            "digits" => Ok(ExperimentKind::Digits),
            _ => Err(format!("unknown experiment `{s}` (expected theorem, curves, gradmag, gmm or digits)")),
        }
    }
}

/// One problem with a config, tied to the key that caused it.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// `error kind=invalid-config field=<key> message="..."`
    pub fn error_line(&self) -> String {
        format!(
            "error kind=invalid-config field={} message={:?}",
            self.field, self.message
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Run(String),
    /// Some trial hit a non-finite value and `halt_on_nan` stopped the run.
    #[error("halted after a non-finite value in {0}")]
    Halted(String),
}

impl ExperimentError {
    /// Machine-readable lines for stderr, one per problem.
    pub fn error_lines(&self) -> Vec<String> {
        match self {
            ExperimentError::Invalid(v) => v.iter().map(Violation::error_line).collect(),
            ExperimentError::Io { path, source } => vec![format!(
                "error kind=io path={:?} message={:?}",
                path.display().to_string(),
                source.to_string()
            )],
            ExperimentError::Run(m) => vec![format!("error kind=run message={m:?}")],
            ExperimentError::Halted(m) => vec![format!("error kind=non-finite message={m:?}")],
        }
    }
}

/// Every setting of a run. Field names match config keys, with `gp.`,
/// `gmm.`, `theorem.` and `digits.` prefixes for the sub-configs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub trials: usize,
    pub schemes: Vec<LossScheme>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub z_dim: usize,
    pub z_distribution: NoiseDistribution,
    pub iters: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub checkpoint_samples: usize,
    pub hidden_width: usize,
    pub n_layers: usize,
    pub hidden_activation: Activation,
    pub generator_batch_norm: bool,
    /// Stop launching trials once one has failed and exit nonzero.
    pub halt_on_nan: bool,
    pub gp_enabled: bool,
    pub gp: GradientPenaltyConfig,
    pub theorem_min_n: usize,
    pub theorem_max_n: usize,
    pub xmin: f64,
    pub xmax: f64,
    pub n: usize,
    /// Least-squares generator target used by the curve tables.
    pub curves_c: f64,
    pub ring: RingMixtureSpec,
    pub criterion: CoverageCriterion,
    /// Trials per scheme, counted from the first, that get sample dumps and
    /// density images.
    pub gmm_kde_trials: usize,
    pub gmm_kde_bandwidth: f64,
    pub gmm_kde_resolution: usize,
    /// Density grids span `[-extent, extent]²`.
    pub gmm_kde_extent: f64,
    pub digits: DigitDatasetSpec,
    pub digits_arch: DigitArch,
    pub digits_write_dataset: bool,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        let trial = TrialConfig::default();
        let digit_trial = digits::default_digit_trial();
        let mut cfg = ExperimentConfig {
            experiment,
            seed: 0,
            output_dir: PathBuf::from(format!("out/{experiment}")),
            trials: 20,
            schemes: vec![LossScheme::NonSaturating, LossScheme::LS_NEG1_1_0],
            optimizer: trial.optimizer,
            lr: trial.lr,
            batch_size: trial.batch_size,
            z_dim: trial.z_dim,
            z_distribution: trial.z_distribution,
            iters: trial.total_iters,
            checkpoint_every: trial.checkpoint_every,
            log_every: trial.log_every,
            checkpoint_samples: trial.checkpoint_samples,
            hidden_width: trial.hidden_width,
            n_layers: trial.n_layers,
            hidden_activation: trial.hidden_activation,
            generator_batch_norm: trial.generator_batch_norm,
            halt_on_nan: false,
            gp_enabled: false,
            gp: GradientPenaltyConfig::default(),
            theorem_min_n: 2,
            theorem_max_n: 16,
            xmin: -10.0,
            xmax: 10.0,
            n: 401,
            curves_c: 0.0,
            ring: RingMixtureSpec::default(),
            criterion: CoverageCriterion::default(),
            gmm_kde_trials: 1,
            gmm_kde_bandwidth: 0.1,
            gmm_kde_resolution: 128,
            gmm_kde_extent: 3.0,
            digits: DigitDatasetSpec::shift_only(0),
            digits_arch: DigitArch::default(),
            digits_write_dataset: false,
        };
        match experiment {
            ExperimentKind::Theorem => cfg.trials = 1000,
            ExperimentKind::Digits => {
                cfg.trials = 5;
                cfg.z_dim = digit_trial.z_dim;
                cfg.z_distribution = digit_trial.z_distribution;
                cfg.iters = digit_trial.total_iters;
                cfg.checkpoint_every = digit_trial.checkpoint_every;
                cfg.checkpoint_samples = digit_trial.checkpoint_samples;
                cfg.generator_batch_norm = digit_trial.generator_batch_norm;
            }
            _ => {}
        }
        cfg
    }

    /// Resolves `pairs` in order. The last `experiment` entry picks the
    /// defaults; every other entry then overrides them.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, Vec<Violation>> {
        let mut violations = Vec::new();
        let mut kind = ExperimentKind::Gmm;
        for (k, v) in pairs {
            if normalize_key(k) == "experiment" {
                match v.parse() {
                    Ok(e) => kind = e,
                    Err(m) => violations.push(Violation::new("experiment", m)),
                }
            }
        }
        let mut cfg = Self::defaults(kind);
        for (k, v) in pairs {
            let key = normalize_key(k);
            if key == "experiment" {
                continue;
            }
            if let Err(m) = cfg.set(&key, v.trim()) {
                violations.push(Violation::new(key, m));
            }
        }
        if violations.is_empty() {
            Ok(cfg)
        } else {
            Err(violations)
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
        }
        fn widths(v: &str) -> Result<Vec<usize>, String> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|w| p(w.trim())).collect()
        }
        match key {
            "seed" => self.seed = p(value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "trials" => self.trials = p(value)?,
            "schemes" | "scheme" => {
                self.schemes = value
                    .split(',')
                    .map(|s| s.trim().parse::<LossScheme>().map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            "optimizer" => self.optimizer = p(value)?,
            "lr" => self.lr = p(value)?,
            "batch_size" => self.batch_size = p(value)?,
            "z_dim" => self.z_dim = p(value)?,
            "z_distribution" => self.z_distribution = p(value)?,
            "iters" => self.iters = p(value)?,
            "checkpoint_every" => self.checkpoint_every = p(value)?,
            "log_every" => self.log_every = p(value)?,
            "checkpoint_samples" => self.checkpoint_samples = p(value)?,
            "hidden_width" => self.hidden_width = p(value)?,
            "n_layers" => self.n_layers = p(value)?,
            "hidden_activation" => self.hidden_activation = p(value)?,
            "generator_batch_norm" => self.generator_batch_norm = p(value)?,
            "halt_on_nan" => self.halt_on_nan = p(value)?,
            "gp.enabled" => self.gp_enabled = p(value)?,
            "gp.c" => self.gp.c = p(value)?,
            "gp.lambda" => self.gp.lambda = p(value)?,
            "gp.perturb_scale" => self.gp.perturb_scale = p(value)?,
            "theorem.min_n" => self.theorem_min_n = p(value)?,
            "theorem.max_n" => self.theorem_max_n = p(value)?,
            "xmin" => self.xmin = p(value)?,
            "xmax" => self.xmax = p(value)?,
            "n" => self.n = p(value)?,
            "curves.c" => self.curves_c = p(value)?,
            "gmm.n_modes" => self.ring.n_modes = p(value)?,
            "gmm.radius" => self.ring.radius = p(value)?,
            "gmm.component_std" => self.ring.component_std = p(value)?,
            "gmm.capture_radius" => self.criterion.capture_radius = p(value)?,
            "gmm.min_frac" => self.criterion.min_frac = p(value)?,
            "gmm.kde_trials" => self.gmm_kde_trials = p(value)?,
            "gmm.kde_bandwidth" => self.gmm_kde_bandwidth = p(value)?,
            "gmm.kde_resolution" => self.gmm_kde_resolution = p(value)?,
            "gmm.kde_extent" => self.gmm_kde_extent = p(value)?,
            "digits.preset" => {
                let preset = DigitDatasetSpec::preset(value, self.digits.seed)
                    .ok_or_else(|| format!("unknown preset {value:?} (expected shift-only or shift+rotate)"))?;
                self.digits.shift_range = preset.shift_range;
                self.digits.rotation_range = preset.rotation_range;
            }
            "digits.shift_range" => self.digits.shift_range = p(value)?,
            "digits.rotation_range" => self.digits.rotation_range = p(value)?,
            "digits.samples_per_class" => self.digits.samples_per_class = p(value)?,
            "digits.g_hidden" => self.digits_arch.generator_hidden = widths(value)?,
            "digits.d_hidden" => self.digits_arch.discriminator_hidden = widths(value)?,
            "digits.d_activation" => self.digits_arch.discriminator_activation = p(value)?,
            "digits.write_dataset" => self.digits_write_dataset = p(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order. Feeding these
    /// back through [`ExperimentConfig::from_pairs`] rebuilds `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("experiment", self.experiment.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("trials", self.trials.to_string()),
            (
                "schemes",
                self.schemes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("optimizer", self.optimizer.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("z_dim", self.z_dim.to_string()),
            ("z_distribution", self.z_distribution.to_string()),
            ("iters", self.iters.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_samples", self.checkpoint_samples.to_string()),
            ("hidden_width", self.hidden_width.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("hidden_activation", self.hidden_activation.to_string()),
            ("generator_batch_norm", self.generator_batch_norm.to_string()),
            ("halt_on_nan", self.halt_on_nan.to_string()),
            ("gp.enabled", self.gp_enabled.to_string()),
            ("gp.c", self.gp.c.to_string()),
            ("gp.lambda", self.gp.lambda.to_string()),
            ("gp.perturb_scale", self.gp.perturb_scale.to_string()),
            ("theorem.min_n", self.theorem_min_n.to_string()),
            ("theorem.max_n", self.theorem_max_n.to_string()),
            ("xmin", self.xmin.to_string()),
            ("xmax", self.xmax.to_string()),
            ("n", self.n.to_string()),
            ("curves.c", self.curves_c.to_string()),
            ("gmm.n_modes", self.ring.n_modes.to_string()),
            ("gmm.radius", self.ring.radius.to_string()),
            ("gmm.component_std", self.ring.component_std.to_string()),
            ("gmm.capture_radius", self.criterion.capture_radius.to_string()),
            ("gmm.min_frac", self.criterion.min_frac.to_string()),
            ("gmm.kde_trials", self.gmm_kde_trials.to_string()),
            ("gmm.kde_bandwidth", self.gmm_kde_bandwidth.to_string()),
            ("gmm.kde_resolution", self.gmm_kde_resolution.to_string()),
            ("gmm.kde_extent", self.gmm_kde_extent.to_string()),
            ("digits.shift_range", self.digits.shift_range.to_string()),
            ("digits.rotation_range", self.digits.rotation_range.to_string()),
            ("digits.samples_per_class", self.digits.samples_per_class.to_string()),
            ("digits.g_hidden", list(&self.digits_arch.generator_hidden)),
            ("digits.d_hidden", list(&self.digits_arch.discriminator_hidden)),
            ("digits.d_activation", self.digits_arch.discriminator_activation.to_string()),
            ("digits.write_dataset", self.digits_write_dataset.to_string()),
        ]
    }

    pub fn echo(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Training settings for trial `t` under `scheme`.
    pub fn trial(&self, scheme: LossScheme, t: usize) -> TrialConfig {
        TrialConfig {
            scheme,
            optimizer: self.optimizer,
            lr: self.lr,
            batch_size: self.batch_size,
            z_dim: self.z_dim,
            z_distribution: self.z_distribution,
            hidden_width: self.hidden_width,
            n_layers: self.n_layers,
            total_iters: self.iters,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            checkpoint_samples: self.checkpoint_samples,
            hidden_activation: self.hidden_activation,
            generator_batch_norm: self.generator_batch_norm,
            penalty: self.gp_enabled.then_some(self.gp),
            seed: self.seed.wrapping_add(t as u64),
        }
    }

    fn dataset_spec(&self) -> DigitDatasetSpec {
        DigitDatasetSpec {
            seed: self.seed,
            ..self.digits
        }
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().trim_start_matches("--").replace('-', "_")
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, Violation> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Violation::new(format!("line {}", i + 1), format!("expected `key = value`, got {line:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Pure check of a resolved config; empty when runnable.
pub fn validate(cfg: &ExperimentConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    if cfg.trials == 0 {
        v.push(Violation::new("trials", "must be at least 1"));
    }
    match cfg.experiment {
        ExperimentKind::Theorem => {
            if cfg.theorem_min_n == 0 || cfg.theorem_min_n > cfg.theorem_max_n {
                v.push(Violation::new(
                    "theorem.min_n",
                    format!(
                        "support sizes need 1 <= min_n <= max_n, got {}..{}",
                        cfg.theorem_min_n, cfg.theorem_max_n
                    ),
                ));
            }
        }
        ExperimentKind::Curves | ExperimentKind::GradMag => {
            if cfg.n < 2 {
                v.push(Violation::new("n", "needs at least 2 points"));
            }
            if !(cfg.xmin < cfg.xmax) || !cfg.xmin.is_finite() || !cfg.xmax.is_finite() {
                v.push(Violation::new("xmin", "needs finite xmin < xmax"));
            }
        }
        ExperimentKind::Gmm | ExperimentKind::Digits => {
            if cfg.schemes.is_empty() {
                v.push(Violation::new("schemes", "at least one scheme required"));
            }
            for s in &cfg.schemes {
                if let Err(e) = s.validate() {
                    v.push(Violation::new("schemes", e.to_string()));
                }
            }
            let trial = cfg.trial(cfg.schemes.first().copied().unwrap_or(LossScheme::NonSaturating), 0);
            for m in trial.violations() {
                v.push(split_violation(&m, |f| {
                    match f {
                        "gp" => "gp.c".into(),
                        "scheme" => "schemes".into(),
                        _ => f.into(),
                    }
                }));
            }
        }
    }
    if cfg.experiment == ExperimentKind::Gmm {
        if let Err(e) = cfg.ring.validate() {
            v.push(Violation::new("gmm.radius", e.to_string()));
        }
        if let Err(e) = cfg.criterion.validate() {
            v.push(Violation::new("gmm.capture_radius", e.to_string()));
        }
        if cfg.checkpoint_samples < 2 {
            v.push(Violation::new("checkpoint_samples", "density estimates need at least 2 samples"));
        }
        if !(cfg.gmm_kde_bandwidth > 0.0) || cfg.gmm_kde_resolution == 0 || !(cfg.gmm_kde_extent > 0.0) {
            v.push(Violation::new(
                "gmm.kde_bandwidth",
                "bandwidth, resolution and extent must be positive",
            ));
        }
    }
    if cfg.experiment == ExperimentKind::Digits {
        for m in cfg.digits.violations() {
            v.push(split_violation(&m, |f| format!("digits.{f}")));
        }
        for m in cfg.digits_arch.violations() {
            v.push(Violation::new("digits.g_hidden", m));
        }
        if cfg.checkpoint_samples < 2 {
            v.push(Violation::new("checkpoint_samples", "diversity needs at least 2 samples"));
        }
    }
    v
}

/// Splits `"field: message"` and maps the field to its config key.
fn split_violation(m: &str, key: impl Fn(&str) -> String) -> Violation {
    match m.split_once(": ") {
        Some((field, message)) => Violation::new(key(field), message),
        None => Violation::new("config", m),
    }
}

/// Output of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    /// Artifact file names relative to the output directory.
    pub files: Vec<String>,
    pub failed_trials: usize,
}

struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn create(dir: &Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Out {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), ExperimentError> {
        let path = self.dir.join(name);
        let io_err = |source| ExperimentError::Io {
            path: path.clone(),
            source,
        };
        let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// Validates, then runs the experiment with trials spread over `workers`
/// threads. All files are written from the calling thread.
pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<RunSummary, ExperimentError> {
    let violations = validate(cfg);
    if !violations.is_empty() {
        return Err(ExperimentError::Invalid(violations));
    }
    let mut out = Out::create(&cfg.output_dir)?;
    let echo = cfg.echo();
    out.write("config.echo", |w| w.write_all(echo.as_bytes()))?;
    let failed = match cfg.experiment {
        ExperimentKind::Theorem => run_theorem(cfg, &mut out)?,
        ExperimentKind::Curves => {
            let rows = objectives::saturation_curves(cfg.xmin, cfg.xmax, cfg.n, cfg.curves_c)
                .map_err(|e| ExperimentError::Run(e.to_string()))?;
            out.write("metrics.csv", |w| objectives::write_curves_csv(&rows, w))?;
            0
        }
        ExperimentKind::GradMag => {
            let rows = objectives::gradient_magnitude_table(cfg.xmin, cfg.xmax, cfg.n, cfg.curves_c)
                .map_err(|e| ExperimentError::Run(e.to_string()))?;
            out.write("metrics.csv", |w| objectives::write_gradmag_csv(&rows, w))?;
            0
        }
        ExperimentKind::Gmm => run_gmm(cfg, workers, &mut out)?,
        ExperimentKind::Digits => run_digits(cfg, workers, &mut out)?,
    };
    let summary = RunSummary {
        output_dir: out.dir.clone(),
        files: out.files,
        failed_trials: failed,
    };
    if cfg.halt_on_nan && failed > 0 {
        return Err(ExperimentError::Halted(format!(
            "{failed} trial(s); partial results in {}",
            summary.output_dir.display()
        )));
    }
    Ok(summary)
}

fn run_theorem(cfg: &ExperimentConfig, out: &mut Out) -> Result<usize, ExperimentError> {
    let rows = divergence::theorem_table(cfg.trials, cfg.seed, cfg.theorem_min_n, cfg.theorem_max_n);
    out.write("metrics.csv", |w| divergence::write_theorem_csv(&rows, w))?;
    Ok(0)
}

/// Runs `jobs` on a pool of `workers` threads, keeping input order. With
/// `halt` set, jobs not yet started after a failure are skipped (`None`).
fn run_jobs<J: Sync, R: Send>(
    jobs: &[J],
    workers: usize,
    halt: bool,
    f: impl Fn(&J) -> R + Sync,
    failed: impl Fn(&R) -> bool + Sync,
) -> Result<Vec<Option<R>>, ExperimentError> {
    let stop = AtomicBool::new(false);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Run(format!("worker pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                if halt && stop.load(Ordering::SeqCst) {
                    return None;
                }
                let r = f(j);
                if failed(&r) {
                    stop.store(true, Ordering::SeqCst);
                }
                Some(r)
            })
            .collect()
    }))
}

fn opt_cell(v: Option<String>) -> String {
    v.unwrap_or_default()
}

fn run_gmm(cfg: &ExperimentConfig, workers: usize, out: &mut Out) -> Result<usize, ExperimentError> {
    let jobs: Vec<(usize, usize, TrialConfig)> = cfg
        .schemes
        .iter()
        .enumerate()
        .flat_map(|(s, &scheme)| (0..cfg.trials).map(move |t| (s, t, cfg.trial(scheme, t))))
        .collect();
    let results = run_jobs(
        &jobs,
        workers,
        cfg.halt_on_nan,
        |(_, _, trial)| gmm::train_gan(&cfg.ring, trial, &cfg.criterion),
        |r| r.as_ref().map(|r| r.status.is_failed()).unwrap_or(true),
    )?;
    let mut by_scheme: Vec<Vec<TrialReport>> = vec![Vec::new(); cfg.schemes.len()];
    let mut skipped = 0;
    for ((s, _, _), r) in jobs.iter().zip(results) {
        match r {
            Some(r) => by_scheme[*s].push(r.map_err(|e| ExperimentError::Run(e.to_string()))?),
            None => skipped += 1,
        }
    }

    let summaries: Vec<_> = cfg
        .schemes
        .iter()
        .zip(&by_scheme)
        .map(|(&scheme, reports)| gmm::summarize(scheme, cfg.optimizer, reports))
        .collect();
    out.write("summary.csv", |w| gmm::write_summary_csv(&summaries, w))?;

    out.write("metrics.csv", |w| {
        writeln!(w, "scheme,trial,seed,iter,d_loss,g_loss,penalty,n_captured,collapse")?;
        for (scheme, reports) in cfg.schemes.iter().zip(&by_scheme) {
            for (t, r) in reports.iter().enumerate() {
                for l in &r.losses {
                    let cov = r.coverage.history.iter().find(|(it, _)| *it == l.iter).map(|(_, c)| c);
                    writeln!(
                        w,
                        "{scheme},{t},{},{},{},{},{},{},{}",
                        r.config.seed,
                        l.iter,
                        l.d_loss,
                        l.g_loss,
                        l.penalty,
                        opt_cell(cov.map(|c| c.n_captured.to_string())),
                        opt_cell(cov.map(|c| c.collapse.to_string())),
                    )?;
                }
            }
        }
        Ok(())
    })?;

    out.write("coverage.csv", |w| {
        write!(w, "scheme,trial,seed,iter,n_captured,collapse")?;
        for k in 0..cfg.ring.n_modes {
            write!(w, ",mode{k}")?;
        }
        writeln!(w)?;
        for (scheme, reports) in cfg.schemes.iter().zip(&by_scheme) {
            for (t, r) in reports.iter().enumerate() {
                for (iter, c) in &r.coverage.history {
                    write!(w, "{scheme},{t},{},{iter},{},{}", r.config.seed, c.n_captured, c.collapse)?;
                    for n in &c.counts {
                        write!(w, ",{n}")?;
                    }
                    writeln!(w)?;
                }
            }
        }
        Ok(())
    })?;

    out.write("trials.csv", |w| {
        writeln!(w, "scheme,trial,seed,status,failed_at,final_n_captured,ever_collapsed")?;
        for (scheme, reports) in cfg.schemes.iter().zip(&by_scheme) {
            for (t, r) in reports.iter().enumerate() {
                let (status, at) = match &r.status {
                    crate::train::TrialStatus::Completed => ("completed", String::new()),
                    crate::train::TrialStatus::Failed { iter, .. } => ("failed", iter.to_string()),
                };
                writeln!(
                    w,
                    "{scheme},{t},{},{status},{at},{},{}",
                    r.config.seed,
                    r.coverage.n_captured(),
                    r.coverage.ever_collapsed()
                )?;
            }
        }
        Ok(())
    })?;

    let e = cfg.gmm_kde_extent;
    for (scheme, reports) in cfg.schemes.iter().zip(&by_scheme) {
        for (t, r) in reports.iter().enumerate().take(cfg.gmm_kde_trials) {
            let tag = format!("{}_t{t}", file_tag(scheme));
            out.write(&format!("samples_{tag}.csv"), |w| gmm::write_samples_csv(&r.checkpoints, w))?;
            for (iter, samples) in &r.checkpoints {
                let grid = gmm::kde(samples, (-e, e), (-e, e), cfg.gmm_kde_resolution, cfg.gmm_kde_bandwidth)
                    .map_err(|e| ExperimentError::Run(e.to_string()))?;
                out.write(&format!("kde_{tag}_{iter:06}.pgm"), |w| grid.write_pgm(w))?;
            }
        }
    }
    let failed: usize = summaries.iter().map(|s| s.failed).sum();
    Ok(failed + skipped)
}

/// Scheme name usable in file names.
fn file_tag(scheme: &LossScheme) -> String {
    scheme.to_string().replace(':', "_")
}

fn run_digits(cfg: &ExperimentConfig, workers: usize, out: &mut Out) -> Result<usize, ExperimentError> {
    let atlas = GlyphAtlas::embedded();
    let dataset = digits::build_dataset(&atlas, &cfg.dataset_spec()).map_err(|e| ExperimentError::Run(e.to_string()))?;
    if cfg.digits_write_dataset {
        out.write("dataset.bin", |w| dataset.write(w))?;
    }
    let real = dataset.sample_batch(&mut substream(cfg.seed, stream::DIVERSITY), cfg.checkpoint_samples);
    let real_diversity = digits::diversity(&real).map_err(|e| ExperimentError::Run(e.to_string()))?;
    out.write("real_grid.pgm", |w| digits::write_grid_pgm(&real, w))?;

    let jobs: Vec<(usize, TrialConfig)> = cfg
        .schemes
        .iter()
        .flat_map(|&scheme| (0..cfg.trials).map(move |t| (t, cfg.trial(scheme, t))))
        .collect();
    let results = run_jobs(
        &jobs,
        workers,
        cfg.halt_on_nan,
        |(_, trial)| digits::train_digit_gan(&dataset, trial, &cfg.digits_arch),
        |r| r.as_ref().map(|r| r.status.is_failed()).unwrap_or(true),
    )?;
    let mut reports: Vec<(usize, DigitTrialReport)> = Vec::new();
    let mut skipped = 0;
    for ((t, _), r) in jobs.iter().zip(results) {
        match r {
            Some(r) => reports.push((*t, r.map_err(|e| ExperimentError::Run(e.to_string()))?)),
            None => skipped += 1,
        }
    }

    out.write("metrics.csv", |w| {
        writeln!(w, "scheme,trial,seed,iter,d_loss,g_loss,penalty,diversity")?;
        for (t, r) in &reports {
            for l in &r.losses {
                let div = r.checkpoints.iter().find(|c| c.iter == l.iter).map(|c| c.diversity.to_string());
                writeln!(
                    w,
                    "{},{t},{},{},{},{},{},{}",
                    r.config.scheme,
                    r.config.seed,
                    l.iter,
                    l.d_loss,
                    l.g_loss,
                    l.penalty,
                    opt_cell(div)
                )?;
            }
        }
        Ok(())
    })?;
    out.write("trials.csv", |w| {
        writeln!(w, "scheme,trial,seed,status,failed_at,final_diversity,real_diversity")?;
        for (t, r) in &reports {
            let (status, at) = match &r.status {
                crate::train::TrialStatus::Completed => ("completed", String::new()),
                crate::train::TrialStatus::Failed { iter, .. } => ("failed", iter.to_string()),
            };
            writeln!(
                w,
                "{},{t},{},{status},{at},{},{real_diversity}",
                r.config.scheme,
                r.config.seed,
                opt_cell(r.final_diversity().map(|d| d.to_string()))
            )?;
        }
        Ok(())
    })?;
    for (t, r) in &reports {
        let tag = format!("{}_t{t}", file_tag(&r.config.scheme));
        for c in &r.checkpoints {
            out.write(&format!("grid_{tag}_{:06}.pgm", c.iter), |w| digits::write_grid_pgm(&c.grid, w))?;
        }
    }
    let failed = reports.iter().filter(|(_, r)| r.status.is_failed()).count();
    Ok(failed + skipped)
}
