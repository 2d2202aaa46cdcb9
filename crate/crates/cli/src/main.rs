//! `protodebias` command-line driver.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 empty
//! corpus, 4 non-finite loss during tuning, 5 dataset parse failure,
//! 6 insufficient word occurrences for `project`.
//! stdout carries output paths only; diagnostics go to stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protodebias::corpus::CorpusError;
use protodebias::evalharness::EvalError;
use protodebias::lexicon::LexiconError;
use protodebias::tuner::TuneError;

use commands::{InsufficientOccurrences, PrepareFlags, PromptSource};
use config::{parse_cap, ConfigError, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "protodebias",
    version,
    about = "Prompt-tuning debiaser for frozen text encoders"
)]
struct Cli {
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true, default_value = "protodebias.conf")]
    config: PathBuf,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine the raw corpus and refine it into slice files.
    Prepare {
        /// Minimum sentences per attribute-word bucket (0 disables).
        #[arg(long)]
        reliability_threshold: Option<usize>,
        #[arg(long, conflicts_with = "no_equalize")]
        equalize: bool,
        #[arg(long)]
        no_equalize: bool,
        /// Per-attribute sentence cap (`none` or `inf` disables).
        #[arg(long, value_parser = cap_arg)]
        cap: Option<Cap>,
    },
    /// Tune the prompt on prepared slices.
    Tune {
        /// Continue from this checkpoint of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the bias benchmarks.
    Eval {
        /// Use one checkpoint for every benchmark.
        #[arg(long, conflicts_with = "trail")]
        checkpoint: Option<PathBuf>,
        /// Pick the early checkpoint for CrowS-Pairs/StereoSet and the final one for SEAT.
        #[arg(long)]
        trail: Option<PathBuf>,
    },
    /// Project word prototypes to 2-D.
    Project {
        /// Comma-separated words; defaults to `project.words`.
        #[arg(long, value_delimiter = ',')]
        words: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge evaluation reports into one comparison table.
    Report {
        /// `report.csv` files to compare.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// `--cap` value; `None` means uncapped.
#[derive(Debug, Clone, Copy)]
struct Cap(Option<usize>);

fn cap_arg(v: &str) -> Result<Cap, String> {
    parse_cap(v)
        .map(Cap)
        .ok_or_else(|| format!("expected a count, `none` or `inf`, got {v:?}"))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() || e.downcast_ref::<LexiconError>().is_some() {
        return 2;
    }
    if e.downcast_ref::<InsufficientOccurrences>().is_some() {
        return 6;
    }
    if let Some(t) = e.downcast_ref::<TuneError>() {
        return match t {
            TuneError::InvalidConfig(_) => 2,
            TuneError::InsufficientCorpus(_) => 3,
            TuneError::NonFiniteLoss { .. } => 4,
            _ => 1,
        };
    }
    if let Some(CorpusError::EmptyCorpus) = e.downcast_ref::<CorpusError>() {
        return 3;
    }
    if let Some(ev) = e.downcast_ref::<EvalError>() {
        return match ev {
            EvalError::Parse { .. } | EvalError::EmptyAfterFilter => 5,
            _ => 1,
        };
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<Vec<PathBuf>> {
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    let cfg = RunConfig::load(&cli.config, &overrides)?;
    Ok(match cli.command {
        Command::Prepare {
            reliability_threshold,
            equalize,
            no_equalize,
            cap,
        } => {
            let flags = PrepareFlags {
                reliability_threshold,
                equalize: if equalize {
                    Some(true)
                } else if no_equalize {
                    Some(false)
                } else {
                    None
                },
                cap: cap.map(|c| c.0),
            };
            commands::prepare(&cfg, &flags)?
        }
        Command::Tune { resume } => vec![commands::tune_cmd(&cfg, resume.as_deref())?],
        Command::Eval { checkpoint, trail } => {
            let source = match (checkpoint, trail) {
                (Some(c), _) => PromptSource::Checkpoint(c),
                (None, Some(t)) => PromptSource::Trail(t),
                (None, None) => PromptSource::Base,
            };
            commands::eval(&cfg, source)?
        }
        Command::Project { words, checkpoint } => vec![commands::project(&cfg, &words, checkpoint.as_deref())?],
        Command::Report { inputs } => vec![commands::report(&cfg, &inputs)?],
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
