//! Pipeline driver for source-free merge adaptation experiments.
//!
//! Stages communicate only through files under one output directory, so any
//! stage can be rerun in isolation and the whole pipeline is scriptable:
//!
//! ```text
//! merge-adapt gen-data --config exp.json --out runs/exp1
//! merge-adapt train-sources --out runs/exp1
//! merge-adapt adapt --method pim --out runs/exp1
//! merge-adapt adapt --method averaging --out runs/exp1
//! merge-adapt evaluate --out runs/exp1
//! merge-adapt report --out runs/exp1
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use merge_adapt::harness::{
    render_text, resolve_out_dir, run_adapt, run_evaluate, run_fit_priors, run_gen_data,
    run_pretrain, run_report, AdaptMethod, ExperimentConfig, HarnessError, CONFIG_FILE,
};

#[derive(Parser)]
#[command(name = "merge-adapt", version, about = "Source-free multi-source model merging")]
struct Cli {
    /// Experiment config JSON; defaults apply for any omitted field.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// For gen-data: overrides the config's master seed.
    /// For adapt: runs a single run seed instead of every configured one.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory; overrides MERGE_ADAPT_OUT and the config's out_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic source and target domains under the output directory.
    GenData,
    /// Train per-source scorers, extract task vectors, and fit score priors.
    TrainSources,
    /// Refit score priors from the stored source models.
    FitPriors,
    /// Search merge coefficients with one method and record the result.
    Adapt {
        /// One of: pim, pim-no-entropy, pim-no-kl, mi-uniform, random-search,
        /// averaging, task-arithmetic, ties.
        #[arg(long, value_parser = parse_method)]
        method: AdaptMethod,
    },
    /// Merge at each recorded coefficient vector and write results/metrics.csv.
    Evaluate,
    /// Rank methods by mean target QWK and write text and JSON reports.
    Report,
}

fn parse_method(s: &str) -> Result<AdaptMethod, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    // The --config flag seeds gen-data; every later stage reads the copy that
    // gen-data wrote into the output directory, so a run's provenance is
    // self-contained. For those stages --config only supplies an out_dir
    // fallback when neither --out nor the environment names one.
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let out = resolve_out_dir(cli.out.clone(), &cfg)?;

    match cli.command {
        Command::GenData => {
            if let Some(seed) = cli.seed {
                cfg.master_seed = seed;
            }
            run_gen_data(&out, &cfg)?;
            println!("generated {} source domains and 1 target domain in {}", cfg.n_sources, out.display());
        }
        Command::TrainSources => {
            run_pretrain(&out)?;
            println!("trained sources and fit priors in {}", out.display());
        }
        Command::FitPriors => {
            run_fit_priors(&out)?;
            println!("refit priors in {}", out.display());
        }
        Command::Adapt { method } => {
            let seeds = match cli.seed {
                Some(s) => vec![s],
                None => ExperimentConfig::load(&out.join(CONFIG_FILE))?.seeds,
            };
            if seeds.is_empty() {
                return Err(HarnessError::Config(
                    "no run seeds: pass --seed or list seeds in the config".into(),
                ));
            }
            for seed in seeds {
                let record = run_adapt(&out, method, seed)?;
                match &record.lambda {
                    Some(lambda) => {
                        let terms: Vec<String> =
                            lambda.iter().map(|l| format!("{l:.4}")).collect();
                        println!("{method} seed {seed}: lambda [{}]", terms.join(", "));
                    }
                    None => println!("{method} seed {seed}: recorded"),
                }
            }
        }
        Command::Evaluate => {
            let path = run_evaluate(&out)?;
            println!("wrote {}", path.display());
        }
        Command::Report => {
            let report = run_report(&out)?;
            print!("{}", render_text(&report));
        }
    }
    Ok(())
}
