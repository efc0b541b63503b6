use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mvpad_cli::{evaluate, filters, Experiment, ExperimentConfig, Method, Stage};
use mvpad_core::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "mvpad", version, about = "Multi-view BSIF presentation attack detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment config plus command-line overrides.
#[derive(Args)]
struct ExpArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

impl ExpArgs {
    fn load(&self) -> Result<Experiment> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Experiment::new(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn the 60 BSIF filter banks from a directory of natural images.
    GenFilters {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build and cache every view's input map for every sample.
    Transform(ExpArgs),
    /// Train one network per view; existing checkpoints are kept.
    Train(ExpArgs),
    /// Score validation and test samples with every view.
    Predict(ExpArgs),
    /// Rank views and pick complementary ones on the validation split.
    Select(ExpArgs),
    /// Fit fusion rules on validation and apply them to the test partitions.
    Fuse {
        #[command(flatten)]
        exp: ExpArgs,
        /// Restrict to these methods (default: the config's list).
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
    },
    /// Join test labels and write reports.csv.
    Evaluate(ExpArgs),
    /// Run every stage in order and write the report.
    Run(ExpArgs),
    /// Render markdown and CSV tables from one or more results directories.
    Report {
        results: Vec<PathBuf>,
        /// Where report.md and reduction.csv go (default: first results dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "mv")]
        baseline: String,
        #[arg(long, default_value = "meta")]
        method: String,
    },
    /// Write the synthetic two-class texture corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (JSON); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenFilters { corpus, out, seed } => {
            let files = filters::gen_filters(&corpus, &out, seed)?;
            println!("wrote {} filter banks to {}", files.len(), out.display());
        }
        Command::Transform(a) => a.load()?.run(Stage::Transform)?,
        Command::Train(a) => a.load()?.run(Stage::Train)?,
        Command::Predict(a) => a.load()?.run(Stage::Predict)?,
        Command::Select(a) => a.load()?.run(Stage::Select)?,
        Command::Fuse { exp, method } => {
            let mut e = exp.load()?;
            if !method.is_empty() {
                e.config.methods = method;
            }
            e.run(Stage::Fuse)?;
        }
        Command::Evaluate(a) => a.load()?.run(Stage::Evaluate)?,
        Command::Run(a) => print!("{}", a.load()?.run_all()?),
        Command::Report { results, out, baseline, method } => {
            anyhow::ensure!(!results.is_empty(), "no results directories given");
            let out = out.unwrap_or_else(|| results[0].clone());
            print!("{}", evaluate::run_report(&results, &out, &baseline, &method)?);
        }
        Command::Synth { out, config, seed } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = synth::generate(&cfg, &out)?;
            println!("wrote {} images and {}", ds.len(), out.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = mvpad_cli::init_worker_pool() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
