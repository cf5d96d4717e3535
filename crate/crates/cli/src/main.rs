use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccmotion_cli::pipeline::{self, Selection};
use ccmotion_cli::{Result, RunConfig};

#[derive(Parser)]
#[command(name = "ccmotion", version, about = "Trajectory prediction with chance-constrained reshaping")]
struct Cli {
    /// Run config (`key = value` lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random stage, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the dataset and grid.
    Simulate,
    /// Fit the continuous occupancy field to the grid.
    FitMap,
    /// Train the mixture network and the NN-naive baseline.
    Train,
    /// Predict prior mixtures for the test split.
    Predict,
    /// Reshape priors that violate the collision limit.
    Optimize,
    /// Score baselines, priors and posteriors; write report.txt.
    Evaluate,
    /// Render SVG overlays for selected test cases.
    Plot {
        /// Comma-separated case ids; defaults to every violating case.
        #[arg(long, value_delimiter = ',')]
        cases: Option<Vec<String>>,
    },
    /// All stages from simulate to evaluate.
    Run,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Simulate => {
            let ds = pipeline::cmd_simulate(&cfg)?;
            println!("wrote {} pairs to {}", ds.pairs.len(), cfg.out_dir.join("dataset").display());
        }
        Command::FitMap => {
            let fit = pipeline::cmd_fit_map(&cfg)?;
            println!("field fitted, cell accuracy {:.4}", fit.accuracy);
        }
        Command::Train => {
            let s = pipeline::cmd_train(&cfg)?;
            println!("mixture NLL {:.4} -> {:.4}", s.initial_nll, s.final_nll);
            println!("NN-naive MSE {:.4} -> {:.4}", s.nn_initial_mse, s.nn_final_mse);
        }
        Command::Predict => {
            let priors = pipeline::cmd_predict(&cfg)?;
            println!("predicted {} priors", priors.len());
        }
        Command::Optimize => {
            let recs = pipeline::cmd_optimize(&cfg)?;
            let solved = recs.iter().filter(|r| r.prior_cost > cfg.epsilon).count();
            let feasible = recs.iter().filter(|r| r.feasible).count();
            println!("{solved} of {} priors needed reshaping; {feasible} feasible", recs.len());
        }
        Command::Evaluate => print!("{}", pipeline::cmd_evaluate(&cfg)?.render()),
        Command::Plot { cases } => {
            let selection = match cases {
                Some(ids) => Selection::Ids(ids.iter().filter(|s| !s.is_empty()).cloned().collect()),
                None => Selection::Violating,
            };
            for rec in pipeline::cmd_plot(&cfg, &selection)? {
                println!("{} ({} colliding abscissae)", rec.path.display(), rec.stats.colliding);
            }
        }
        Command::Run => print!("{}", pipeline::cmd_run(&cfg)?.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
