use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsgan_lab::experiment::{self, parse_config_text, ExperimentConfig, ExperimentError, Violation};

#[derive(Parser)]
#[command(name = "lsgan-lab", version, about = "Least-squares GAN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Worker threads for independent trials.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Check a config and print the resolved keys.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines, e.g. a previous run's config.echo.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs, e.g. `--gmm.radius 2.0`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn override_pairs(args: &[String]) -> Result<Vec<(String, String)>, Violation> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| Violation {
            field: flag.clone(),
            message: "expected a `--key` flag".into(),
        })?;
        if let Some((k, v)) = key.split_once('=') {
            pairs.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it.next().ok_or_else(|| Violation {
            field: key.to_string(),
            message: "missing value".into(),
        })?;
        pairs.push((key.to_string(), value.clone()));
    }
    Ok(pairs)
}

/// Resolved config plus a `--workers` value found among the overrides.
fn resolve(args: &ConfigArgs) -> Result<(ExperimentConfig, Option<usize>), ExperimentError> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        pairs = parse_config_text(&text).map_err(|v| ExperimentError::Invalid(vec![v]))?;
    }
    let mut workers = None;
    for (k, v) in override_pairs(&args.overrides).map_err(|v| ExperimentError::Invalid(vec![v]))? {
        if k == "workers" {
            let n = v.parse().map_err(|_| {
                ExperimentError::Invalid(vec![Violation {
                    field: "workers".into(),
                    message: format!("expected a positive integer, got {v:?}"),
                }])
            })?;
            workers = Some(n);
        } else {
            pairs.push((k, v));
        }
    }
    let cfg = ExperimentConfig::from_pairs(&pairs).map_err(ExperimentError::Invalid)?;
    let violations = experiment::validate(&cfg);
    if !violations.is_empty() {
        return Err(ExperimentError::Invalid(violations));
    }
    Ok((cfg, workers))
}

fn fail(e: &ExperimentError) -> ExitCode {
    for line in e.error_lines() {
        eprintln!("{line}");
    }
    ExitCode::from(match e {
        ExperimentError::Invalid(_) => 2,
        _ => 1,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match resolve(&config) {
            Ok((cfg, _)) => {
                print!("{}", cfg.echo());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run { config, workers } => {
            let result = resolve(&config).and_then(|(cfg, w)| experiment::run(&cfg, w.unwrap_or(workers)));
            match result {
                Ok(summary) => {
                    for f in &summary.files {
                        println!("{}", summary.output_dir.join(f).display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
