//! Argument parsing and dispatch.

use std::path::PathBuf;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use crate::commands::{cmd_collect, cmd_pipeline, cmd_report, cmd_search, cmd_synth, cmd_train};
use crate::config::{Ablation, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(
    name = "latentfs",
    version,
    about = "Feature selection by gradient search over learned subset embeddings",
    after_help = "Any config key can also be given as a flag, e.g. --model.batch_size 64 or --search.eta=0.05."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file with `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the split, collection, model and evaluation protocol.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (for `synth`, the CSV file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Apply an ablation; repeatable.
    #[arg(long, global = true, value_enum)]
    pub ablation: Vec<Ablation>,
    /// Downstream metric (e.g. f1, roc_auc, 1-mae); `auto` picks the task default.
    #[arg(long, global = true)]
    pub metric: Option<String>,
    /// Number of seed records to search from.
    #[arg(long = "top-k", global = true)]
    pub top_k: Option<usize>,
    /// Initial ascent step size.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Weight of the reconstruction loss.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Random orderings added per base record.
    #[arg(long = "augment-factor", global = true)]
    pub augment_factor: Option<usize>,
    /// `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label feature subsets and write the record store.
    Collect,
    /// Train the embedding model on the record store.
    Train {
        /// Record store (default: <out>/records.jsonl).
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Search from the best records and write the run report.
    Search {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// collect, train and search in one go.
    Run,
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Write the configured synthetic dataset as CSV.
    Synth,
}

/// A failure together with its process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration: exit code 1.
    Usage(anyhow::Error),
    /// The command itself failed: exit code 2.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

/// Turns `--section.key value` and `--section.key=value` into `--set`
/// pairs so clap only sees its own flags.
pub fn extract_dotted(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(name) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (name.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("flag --{key} needs a value"))?,
        };
        pairs.push((key, value));
    }
    Ok((rest, pairs))
}

/// Config file, then named flags, then `--set` and dotted flags.
pub fn build_config(cli: &Cli, dotted: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    for &a in &cli.ablation {
        cfg.apply_ablation(a);
    }
    if let Some(m) = &cli.metric {
        cfg.set("protocol.metric", m)?;
    }
    if let Some(k) = cli.top_k {
        cfg.search_top_k = k;
    }
    if let Some(eta) = cli.eta {
        cfg.search_eta = eta;
    }
    if let Some(l) = cli.lambda {
        cfg.model_lambda = l;
    }
    if let Some(e) = cli.epochs {
        cfg.model_epochs = e;
    }
    if let Some(a) = cli.augment_factor {
        cfg.collection_augment_factor = a;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v)?;
    }
    for (k, v) in dotted {
        cfg.set(k, v)?;
    }
    cfg.train().validate()?;
    cfg.search().validate()?;
    cfg.model().validate()?;
    cfg.protocol().validate()?;
    cfg.metric().check_task(cfg.data_task)?;
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command,
/// returning what it printed.
pub fn run(args: Vec<String>) -> std::result::Result<String, Failure> {
    let (rest, dotted) = extract_dotted(args).map_err(Failure::Usage)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => return Ok(e.to_string()),
        Err(e) => {
            let text = e.to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text).trim_end().to_string();
            return Err(Failure::Usage(anyhow!(text)));
        }
    };
    let cfg = build_config(&cli, &dotted).map_err(Failure::Usage)?;
    execute(&cli.command, &cfg, cli.out.as_deref()).map_err(Failure::Runtime)
}

fn execute(command: &Command, cfg: &ExperimentConfig, out: Option<&std::path::Path>) -> Result<String> {
    Ok(match command {
        Command::Collect => {
            let s = cmd_collect(cfg)?;
            let sources: Vec<String> = s.by_source.iter().map(|(k, n)| format!("{k} {n}")).collect();
            format!(
                "{} records ({} base): {}\nwrote {}\n",
                s.records,
                s.base_records,
                sources.join(", "),
                cfg.output_dir.join("records.jsonl").display()
            )
        }
        Command::Train { store } => {
            let s = cmd_train(cfg, store.as_deref())?;
            format!(
                "{} epochs, loss {:.5} -> {:.5}, {} parameters, {:.1}s\nwrote {}\n",
                s.epochs_run,
                s.initial_loss,
                s.final_loss,
                s.parameter_count,
                s.seconds,
                cfg.output_dir.join("checkpoint.json").display()
            )
        }
        Command::Search { checkpoint, store } => cmd_search(cfg, checkpoint.as_deref(), store.as_deref())?.to_text(),
        Command::Run => cmd_pipeline(cfg)?.to_text(),
        Command::Report { runs } => cmd_report(runs, out)?.to_text(),
        Command::Synth => {
            let path = out.map_or_else(|| PathBuf::from("synthetic.csv"), |p| p.to_path_buf());
            let informative = cmd_synth(cfg, &path)?;
            format!("wrote {} (informative columns {informative:?})\n", path.display())
        }
    })
}
