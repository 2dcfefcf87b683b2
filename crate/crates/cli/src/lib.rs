//! Experiment harness: `gen-data`, `train`, `attack`, `evaluate` and
//! `ablate` over one output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, Method, Shift};
pub use error::{CliError, ErrorReport, Result};
pub use layout::Layout;

#[derive(Debug, Parser)]
#[command(name = "ifgmi", version, about = "Intermediate-feature model inversion lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed; every stage derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the private corpus and the public corpora.
    GenData(Common),
    /// Train the prior and/or the classifiers.
    Train {
        #[command(flatten)]
        common: Common,
        /// prior, target, eval, indep or all.
        #[arg(long, default_value = "all")]
        model: String,
    },
    /// Run every configured method against the target classifier.
    Attack(Common),
    /// Score attack outputs and write the report and comparison grids.
    Evaluate(Common),
    /// Sweep depth (`L`), radii scale or decomposition point.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train { .. } => "train",
            Command::Attack(_) => "attack",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate { .. } => "ablate",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Attack(c) | Command::Evaluate(c) => c,
            Command::Train { common, .. } | Command::Ablate { common, .. } => common,
        }
    }
}

/// Everything a command needs: the validated config, its hash, the
/// output layout and the master seed.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub config_hash: String,
    pub layout: Layout,
    pub seed: u64,
}

impl Context {
    /// Loads and validates the config, then echoes it into the output directory.
    pub fn prepare(common: &Common) -> Result<Self> {
        let cfg = ExperimentConfig::load(common.config.as_deref())?;
        let layout = Layout::new(&common.out);
        layout.create(&layout.root)?;
        let (text, config_hash) = cfg.echo()?;
        layout::write_text(&layout.config(), &text)?;
        Ok(Context { cfg, config_hash, layout, seed: common.seed })
    }
}

pub fn init_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))
}

/// Runs one command; the value is the success summary printed on stdout.
pub fn run(command: &Command) -> Result<serde_json::Value> {
    init_threads(command.common().threads)?;
    let ctx = Context::prepare(command.common())?;
    match command {
        Command::GenData(_) => commands::gen_data::run(&ctx),
        Command::Train { model, .. } => commands::train::run(&ctx, model),
        Command::Attack(_) => commands::attack::run(&ctx),
        Command::Evaluate(_) => commands::evaluate::run(&ctx),
        Command::Ablate { axis, .. } => commands::ablate::run(&ctx, axis),
    }
}
