use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cfbase_cli::config::RunConfig;
use cfbase_cli::stages::{open_run, render_run, run_all, run_stage};
use cfbase_cli::PipelineError;

#[derive(Parser)]
#[command(
    name = "cfbase",
    version,
    about = "Counterfactual-guided baselines for path attribution, with a faithfulness evaluation battery on synthetic imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Comma-separated subset of baselines to run (default: all configured).
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    baselines: Option<Vec<String>>,
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and split it.
    GenData(CommonArgs),
    /// Train the band/blob classifier.
    TrainClassifier(CommonArgs),
    /// Train the generative model used for counterfactual search.
    TrainVae(CommonArgs),
    /// Find counterfactuals and compute attributions for every baseline.
    Attribute(CommonArgs),
    /// Score attributions: localization metrics and ablation curves.
    Evaluate(CommonArgs),
    /// Aggregate per-sample metrics into the final reports.
    Report(CommonArgs),
    /// Render stored inputs, counterfactuals, and maps to PGM/PPM images.
    Render(CommonArgs),
    /// Run the whole pipeline in order, skipping completed stages.
    Run(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::GenData(a)
            | Command::TrainClassifier(a)
            | Command::TrainVae(a)
            | Command::Attribute(a)
            | Command::Evaluate(a)
            | Command::Report(a)
            | Command::Render(a)
            | Command::Run(a) => a,
        }
    }

    fn stage(&self) -> Option<&'static str> {
        match self {
            Command::GenData(_) => Some("gen-data"),
            Command::TrainClassifier(_) => Some("train-classifier"),
            Command::TrainVae(_) => Some("train-vae"),
            Command::Attribute(_) => Some("attribute"),
            Command::Evaluate(_) => Some("evaluate"),
            Command::Report(_) => Some("report"),
            Command::Render(_) | Command::Run(_) => None,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(cfbase_cli::exit_code(&err));
    }
}

fn run(cli: &Cli) -> Result<()> {
    let args = cli.command.common();
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(PipelineError::Config("--jobs must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = RunConfig::load(
        &args.config,
        args.out.as_deref(),
        args.seed,
        args.baselines.as_deref(),
    )
    .map_err(|e| PipelineError::Config(format!("{e:#}")))?;
    let mut manifest = open_run(&cfg)?;

    match (&cli.command, cli.command.stage()) {
        (_, Some(stage)) => {
            run_stage(&cfg, &mut manifest, stage)?;
        }
        (Command::Run(_), None) => run_all(&cfg, &mut manifest)?,
        (Command::Render(_), None) => render_run(&cfg, &mut manifest)?,
        _ => unreachable!("every subcommand maps to an action"),
    }
    Ok(())
}
