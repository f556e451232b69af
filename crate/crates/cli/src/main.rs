//! `gemfm` command-line runner.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::{RunConfig, Settings};

#[derive(Debug, Parser)]
#[command(
    name = "gemfm",
    version,
    about = "Factorization machines with graph-convolved embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the feature co-occurrence graph from the training data.
    BuildGraph(Flags),
    /// Train an FM (layers = 0) or GEM model.
    Train(Flags),
    /// Print RMSE/MAE of a saved model on a libFM file.
    Evaluate(Flags),
    /// Write one prediction per line for a libFM file.
    Predict(Flags),
}

/// Shared flags. Each one overrides the matching key from `--config`.
#[derive(Debug, clap::Args)]
struct Flags {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Worker threads for parsing, graph building and scoring.
    #[arg(long)]
    threads: Option<String>,
    /// Single libFM file (split with --split), or the file to score.
    #[arg(long)]
    data: Option<String>,
    /// Train/validation/test ratios for --data, e.g. 0.8,0.1,0.1.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    validation: Option<String>,
    #[arg(long)]
    test: Option<String>,
    /// Tab-separated `name start end` field map.
    #[arg(long)]
    field_map: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    report: Option<String>,
    /// Clamp predictions into [0, 1] (true/false).
    #[arg(long)]
    clip: Option<String>,
    /// Edge-list file produced by build-graph.
    #[arg(long)]
    graph: Option<String>,
    /// all_pairs or pairs.
    #[arg(long)]
    graph_mode: Option<String>,
    /// Comma-separated field names to include in the graph.
    #[arg(long)]
    graph_fields: Option<String>,
    /// Comma-separated field pairs, e.g. user:item,item:city.
    #[arg(long)]
    graph_pairs: Option<String>,
    /// Write the graph built during training here.
    #[arg(long)]
    save_graph: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    /// identity or relu.
    #[arg(long)]
    activation: Option<String>,
    /// adam or adagrad.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    l2_lambda: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    sampling_ratio: Option<String>,
}

impl Flags {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => Settings::load(path)?,
            None => Settings::default(),
        };
        for pair in &self.set {
            s.set_pair(pair).context("in --set")?;
        }
        let flags = [
            ("seed", &self.seed),
            ("threads", &self.threads),
            ("data", &self.data),
            ("split", &self.split),
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
            ("field_map", &self.field_map),
            ("model", &self.model),
            ("out", &self.out),
            ("report", &self.report),
            ("clip", &self.clip),
            ("graph", &self.graph),
            ("graph_mode", &self.graph_mode),
            ("graph_fields", &self.graph_fields),
            ("graph_pairs", &self.graph_pairs),
            ("save_graph", &self.save_graph),
            ("dim", &self.dim),
            ("layers", &self.layers),
            ("activation", &self.activation),
            ("optimizer", &self.optimizer),
            ("learning_rate", &self.learning_rate),
            ("l2_lambda", &self.l2_lambda),
            ("dropout", &self.dropout),
            ("batch_size", &self.batch_size),
            ("max_epochs", &self.max_epochs),
            ("patience", &self.patience),
            ("sampling_ratio", &self.sampling_ratio),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                s.set(key, v)?;
            }
        }
        Ok(s)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (Command::BuildGraph(flags)
    | Command::Train(flags)
    | Command::Evaluate(flags)
    | Command::Predict(flags)) = &cli.command;
    let cfg = RunConfig::from_settings(&flags.settings()?)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .context("starting the thread pool")?;
    match cli.command {
        Command::BuildGraph(_) => commands::build_graph_cmd(&cfg),
        Command::Train(_) => commands::train_cmd(&cfg),
        Command::Evaluate(_) => commands::evaluate_cmd(&cfg).map(drop),
        Command::Predict(_) => commands::predict_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
