use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use demoner::config::require;
use demoner::pipeline::{self, GridSpec, Preset};
use demoner::{CliError, Overrides};
use demoner_core::eval::DEFAULT_TRIALS;

#[derive(Parser, Debug)]
#[command(name = "demoner", version, about = "Demonstration-based few-shot entity tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a CoNLL file and print corpus statistics.
    Ingest {
        input: PathBuf,
        /// Also write the summary as JSON.
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Train the similarity predictor and the tagger.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Tag sentences with a trained model directory.
    Tag {
        /// Sentences to tag (CoNLL, or one token per line); defaults to paths.test.
        input: Option<PathBuf>,
        /// Model directory; defaults to paths.out of the resolved config.
        #[arg(long, short = 'm')]
        model: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score predicted CoNLL against gold CoNLL.
    Evaluate {
        gold: PathBuf,
        pred: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Measure how well the similarity predictor orders candidates.
    EvalFeatsim {
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train one tagger per (gamma, alpha, beta) point and pick the best.
    GridSearch {
        /// Grid file (TOML with `gamma`, `alpha`, `beta` lists).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        /// Include permuted-label validation in the score.
        #[arg(long)]
        permuted: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic labeled corpus.
    GenSynthetic {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the preset's instance count.
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { input, output } => {
            print!("{}", pipeline::cmd_ingest(&input, output.as_deref())?.table());
        }
        Command::Train { overrides } => {
            let config = overrides.resolve()?;
            let trained = pipeline::cmd_train(&config)?;
            println!(
                "trained on {} instances; ADL {}; final loss {:.6}; models in {}",
                trained.split.train.len(),
                if config.adl().is_some() { "enabled" } else { "disabled" },
                trained.run.epoch_losses.last().copied().unwrap_or(f64::NAN),
                config.paths.out.display()
            );
        }
        Command::Tag { input, model, overrides } => {
            // the training manifest supplies defaults unless --config is given
            let base_dir = model.clone().or_else(|| overrides.out.clone());
            let config = match (&overrides.config, &base_dir) {
                (None, Some(dir)) => {
                    let c = overrides.apply(pipeline::model_config(dir)?);
                    c.validate()?;
                    c
                }
                _ => overrides.resolve()?,
            };
            let model_dir = model.unwrap_or_else(|| config.paths.out.clone());
            let input = match input {
                Some(p) => p,
                None => require(&config.paths.test, "test")?,
            };
            let predictions = pipeline::cmd_tag(&config, &model_dir, &input)?;
            println!("tagged {} sentences into {}", predictions.len(), config.paths.out.display());
        }
        Command::Evaluate { gold, pred, json } => {
            let report = pipeline::cmd_evaluate(&gold, &pred)?;
            print!("{}", report.table());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&path, text).map_err(CliError::io(path))?;
            }
        }
        Command::EvalFeatsim { trials, overrides } => {
            let config = overrides.resolve()?;
            let report = pipeline::cmd_eval_featsim(&config, trials)?;
            println!("predictor\n{}\nsemantic baseline\n{}", report.predictor.table(), report.semantic.table());
        }
        Command::GridSearch { grid, gammas, alphas, betas, permuted, overrides } => {
            let config = overrides.resolve()?;
            let mut spec = match grid {
                Some(path) => GridSpec::load(&path)?,
                None => GridSpec::default(),
            };
            spec.gamma = gammas.or(spec.gamma);
            spec.alpha = alphas.or(spec.alpha);
            spec.beta = betas.or(spec.beta);
            spec.permuted |= permuted;
            let report = pipeline::cmd_grid_search(&config, &spec)?;
            print!("{}", report.table());
            let best = report.best_row();
            println!("best: gamma={} alpha={} beta={}", best.gamma, best.alpha, best.beta);
        }
        Command::GenSynthetic { preset, seed, instances, output } => {
            let mut spec = preset.spec();
            if let Some(n) = instances {
                spec.instances = n;
            }
            print!("{}", pipeline::cmd_gen_synthetic(&spec, seed, &output)?.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
