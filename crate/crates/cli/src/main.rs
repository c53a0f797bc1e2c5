//! `dram`: generate phantoms, propose candidates, train, infer and evaluate.

mod overlay;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dram_core::config::{Method, RunConfig};
use dram_core::dataset::{read_dataset, write_dataset};
use dram_core::experiment::{
    ensure_proposals, evaluate_predictions, generate_cases, latest_checkpoint, lesion_masks, predict_cases,
    read_predictions, run_experiment, split, train_run, write_predictions, CONFIG_FILE,
};
use dram_core::metrics::{format_table, TABLE_FILE};
use dram_core::model::load_checkpoint;
use dram_core::{Error, Result};
use log::info;

#[derive(Parser)]
#[command(name = "dram", version, about = "Weakly-supervised lesion segmentation from lobe severity scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML); desk-scale defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantom cases and their severity sidecar.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of cases (default: eval.num_cases).
        #[arg(long)]
        n_cases: Option<usize>,
    },
    /// Compute lesion candidates and vessel masks for every case.
    Propose {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the configured method on the training split.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Run directory for config echo, log and checkpoints.
        #[arg(long)]
        run: PathBuf,
    },
    /// Predict the test split from a run's latest checkpoint.
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Score a run's test-split predictions (inferring them if missing).
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Also write orthogonal-slice PNGs with contours per case.
        #[arg(long)]
        overlays: bool,
    },
    /// Train and evaluate several methods and write a comparison table.
    Experiment {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated methods (default: all).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
    },
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The explicit config, else the run's echo, else the defaults.
fn run_config(arg: &ConfigArg, run: &Path) -> Result<RunConfig> {
    if arg.config.is_none() && run.join(CONFIG_FILE).is_file() {
        return RunConfig::load(&run.join(CONFIG_FILE));
    }
    load_config(arg)
}

fn infer(cfg: &RunConfig, data: &Path, run: &Path) -> Result<()> {
    let (_, path) = latest_checkpoint(run)
        .ok_or_else(|| Error::Config(format!("no checkpoint in {}", run.display())))?;
    let (model, _) = load_checkpoint(&path)?;
    let cases = read_dataset(data)?;
    let proposals = ensure_proposals(data, &cases, &cfg.proposal)?;
    let (_, test) = split(cfg, &cases);
    let (_, test_props) = split(cfg, &proposals);
    info!("predicting {} cases with {}", test.len(), path.display());
    let preds = predict_cases(&model, test, test_props, cfg.method.post())?;
    write_predictions(run, test, &preds)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out, n_cases } => {
            let cfg = load_config(&config)?;
            let cases = generate_cases(&cfg, n_cases.unwrap_or(cfg.eval.num_cases))?;
            write_dataset(&out, &cases)?;
            info!("wrote {} cases to {}", cases.len(), out.display());
        }
        Command::Propose { config, data } => {
            let cfg = load_config(&config)?;
            let cases = read_dataset(&data)?;
            ensure_proposals(&data, &cases, &cfg.proposal)?;
        }
        Command::Train { config, data, run } => {
            let cfg = load_config(&config)?;
            let cases = read_dataset(&data)?;
            let proposals = ensure_proposals(&data, &cases, &cfg.proposal)?;
            let (train, _) = split(&cfg, &cases);
            let (train_props, _) = split(&cfg, &proposals);
            if train.is_empty() {
                return Err(Error::Config("the training split is empty".into()));
            }
            train_run(&cfg, train, train_props, &run)?;
        }
        Command::Infer { config, data, run } => {
            let cfg = run_config(&config, &run)?;
            infer(&cfg, &data, &run)?;
        }
        Command::Evaluate {
            config,
            data,
            run,
            overlays,
        } => {
            let cfg = run_config(&config, &run)?;
            let cases = read_dataset(&data)?;
            let (_, test) = split(&cfg, &cases);
            if test.is_empty() {
                return Err(Error::Config("the test split is empty".into()));
            }
            let preds = match read_predictions(&run, test)? {
                Some(p) => p,
                None => {
                    infer(&cfg, &data, &run)?;
                    read_predictions(&run, test)?.expect("predictions were just written")
                }
            };
            let report = evaluate_predictions(&cfg, test, &preds, &run)?;
            let table = format_table(&[(cfg.method.name(), &report)]);
            let path = run.join(TABLE_FILE);
            std::fs::write(&path, &table).map_err(|e| Error::Io { path, source: e })?;
            print!("{table}");
            if overlays {
                for (case, pred) in test.iter().zip(lesion_masks(&preds)) {
                    let path = run.join("overlays").join(format!("{}.png", case.id));
                    overlay::write_overlay(&path, &case.image, &case.lesion_map.nonzero_mask(), &pred)
                        .map_err(|e| Error::Format {
                            path: path.clone(),
                            detail: e.to_string(),
                        })?;
                }
            }
        }
        Command::Experiment {
            config,
            data,
            out,
            methods,
        } => {
            let cfg = load_config(&config)?;
            let methods = if methods.is_empty() { Method::ALL.to_vec() } else { methods };
            run_experiment(&cfg, &methods, &data, &out)?;
            print!("{}", std::fs::read_to_string(out.join(TABLE_FILE)).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
