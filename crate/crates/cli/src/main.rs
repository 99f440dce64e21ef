//! `diffplan`: the full trajectory-diffusion planning pipeline as
//! deterministic, file-to-file subcommands.
//!
//! Exit codes: 0 success, 2 config error, 3 data-alignment error,
//! 4 artifact error; stderr carries one machine-parsable error line.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys, or values (exit 2).
    Config(String),
    /// Malformed or misaligned data files (exit 3).
    Data(String),
    /// Unreadable, corrupt, or mismatched model artifacts (exit 4).
    Artifact(String),
    /// Anything else (exit 1).
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Artifact(_) => "artifact",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Artifact(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::Artifact(m)
            | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "diffplan",
    about = "Trajectory-diffusion planning pipeline: generate scenarios, propose paths, verify noise normality, train the denoiser, sample, and evaluate",
    version
)]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Config override, e.g. --set schedule.steps=50 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded scenarios as JSON Lines.
    Gen {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce structured responses: a seeded mock proposer, or --parse to
    /// validate and normalize a recorded response file.
    Propose {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fitted noise model JSON (defaults to the config's noise block).
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Recorded responses to validate and re-emit instead of mocking.
        #[arg(long)]
        parse: Option<PathBuf>,
    },
    /// Kolmogorov-Smirnov normality verification report (CSV).
    KsVerify {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pool k consecutive paths per test for more samples.
        #[arg(long, default_value_t = 1)]
        pool: usize,
        /// Reference parameters: per-path or fitted (default: per-path,
        /// or fitted when pooling).
        #[arg(long)]
        reference: Option<String>,
        /// Decision rule: and (both coordinates pass) or combined (one
        /// test on pooled z-scores; default: and, or combined when
        /// pooling).
        #[arg(long)]
        rule: Option<String>,
    },
    /// Fit the pooled Gaussian noise model from responses (JSON).
    FitNoise {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser and write the model artifact.
    Train {
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        /// Loss curve CSV (default: <out-model stem>.loss.csv).
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        /// Optional JSONL cache of {scenario_id, timestep, seed} refs.
        #[arg(long)]
        dataset_cache: Option<PathBuf>,
    },
    /// Denoise proposals and write the sampled paths (JSONL).
    Sample {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        scenarios: PathBuf,
        /// Recorded responses; mocked from the config noise when omitted.
        #[arg(long)]
        responses: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replace the model with the identity denoiser.
        #[arg(long)]
        oracle_denoiser: bool,
    },
    /// Open-loop metrics CSV for sampled paths and raw proposals.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        responses: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write one SVG overlay per scenario into this directory.
        #[arg(long)]
        svg_dir: Option<PathBuf>,
        /// Replace the model with the identity denoiser.
        #[arg(long)]
        oracle_denoiser: bool,
    },
    /// Train and evaluate one model per conditioning-flag set.
    Ablate {
        #[arg(long)]
        scenarios: PathBuf,
        /// Held-out scenarios; the training set is reused when omitted.
        #[arg(long)]
        eval_scenarios: Option<PathBuf>,
        /// Recorded training responses; mocked when omitted.
        #[arg(long)]
        responses: Option<PathBuf>,
        /// Comma-separated rows: all, no-tse, no-caf, no-cap, no-bfc, none.
        #[arg(long)]
        flags: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = config::load_config(cli.config.as_deref(), &cli.sets, cli.seed, cli.jobs)?;
    if config.jobs > 0 {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build_global();
    }
    match &cli.command {
        Command::Gen { count, out } => commands::cmd_gen(&config, *count, out),
        Command::Propose {
            scenarios,
            out,
            noise,
            parse,
        } => commands::cmd_propose(&config, scenarios, out, noise.as_deref(), parse.as_deref()),
        Command::KsVerify {
            responses,
            scenarios,
            out,
            pool,
            reference,
            rule,
        } => commands::cmd_ks_verify(
            &config,
            responses,
            scenarios,
            out,
            *pool,
            reference.as_deref(),
            rule.as_deref(),
        ),
        Command::FitNoise {
            responses,
            scenarios,
            out,
        } => commands::cmd_fit_noise(&config, responses, scenarios, out),
        Command::Train {
            scenarios,
            responses,
            out_model,
            loss_curve,
            dataset_cache,
        } => {
            let default_curve = commands::default_sibling(out_model, ".loss.csv");
            commands::cmd_train(
                &config,
                scenarios,
                responses,
                out_model,
                Some(loss_curve.as_deref().unwrap_or(&default_curve)),
                dataset_cache.as_deref(),
            )
        }
        Command::Sample {
            model,
            scenarios,
            responses,
            out,
            oracle_denoiser,
        } => commands::cmd_sample(
            &config,
            model.as_deref(),
            scenarios,
            responses.as_deref(),
            out,
            *oracle_denoiser,
        ),
        Command::Eval {
            model,
            scenarios,
            responses,
            out,
            svg_dir,
            oracle_denoiser,
        } => commands::cmd_eval(
            &config,
            model.as_deref(),
            scenarios,
            responses.as_deref(),
            out,
            svg_dir.as_deref(),
            *oracle_denoiser,
        ),
        Command::Ablate {
            scenarios,
            eval_scenarios,
            responses,
            flags,
            out,
        } => commands::cmd_ablate(
            &config,
            scenarios,
            eval_scenarios.as_deref(),
            responses.as_deref(),
            flags,
            out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "diffplan-error code={} kind={} message={:?}",
                e.code(),
                e.kind(),
                e.to_string()
            );
            ExitCode::from(e.code())
        }
    }
}
