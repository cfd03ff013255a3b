use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use slidewin::experiment::{self, ExperimentConfig, Layout};

#[derive(Parser)]
#[command(name = "slidewin", version, about = "Windowing experiments for next-item recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML or JSON). Defaults to the bundled config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the neighbour cutoff for embedding metrics.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus, similarity sets and test suite.
    Gen(Common),
    /// Train one treatment on the generated corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        treatment: String,
    },
    /// Evaluate one trained treatment.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        treatment: String,
        /// Model file; defaults to the treatment's model under --out.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write window coverage statistics for every treatment.
    Coverage(Common),
    /// Build the comparison table from the per-treatment reports.
    Compare(Common),
    /// Generate, train, evaluate and compare every treatment.
    RunAll(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::bundled_default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(k) = common.k {
        config.eval.k = k;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(common) => {
            let config = load_config(&common)?;
            let layout = Layout::new(&common.out);
            let prepared = experiment::write_generated(&config, &layout)?;
            log::info!(
                "wrote {} users and {} test sequences to {}",
                prepared.corpus.len(),
                prepared.suite.future.len() + prepared.suite.recent.len() + prepared.suite.old.len(),
                common.out.display()
            );
        }
        Command::Train { common, treatment } => {
            let config = load_config(&common)?;
            let layout = Layout::new(&common.out);
            let t = config.treatment(&treatment)?.clone();
            let prepared = experiment::load_prepared(&config, &layout)?;
            let (_, log) = experiment::write_trained(&config, &prepared, &t, &layout)?;
            println!("{log}");
        }
        Command::Eval {
            common,
            treatment,
            model,
        } => {
            let config = load_config(&common)?;
            let layout = Layout::new(&common.out);
            let t = config.treatment(&treatment)?.clone();
            let model_path = model.unwrap_or_else(|| layout.model(&t.name));
            let params = experiment::load_model(&model_path)?;
            let prepared = experiment::load_prepared(&config, &layout)?;
            let report = experiment::evaluate_treatment(&config, &prepared, &t, &params)?;
            experiment::write_report(&layout, &t, &report)?;
            println!("{}", report.to_json());
        }
        Command::Coverage(common) => {
            let config = load_config(&common)?;
            let layout = Layout::new(&common.out);
            let prepared = experiment::load_prepared(&config, &layout)?;
            let report = experiment::coverage(&config, &prepared)?;
            experiment::write_coverage(&layout, &report)?;
        }
        Command::Compare(common) => {
            let config = load_config(&common)?;
            let table = experiment::write_comparison(&config, &Layout::new(&common.out))?;
            println!("{}", table.to_markdown());
        }
        Command::RunAll(common) => {
            let config = load_config(&common)?;
            let table = experiment::run_all(&config, &Layout::new(&common.out))
                .with_context(|| format!("run-all into {}", common.out.display()))?;
            println!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SLIDEWIN_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
