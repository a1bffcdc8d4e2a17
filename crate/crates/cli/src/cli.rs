//! Argument parsing and dispatch.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use vlminv_core::{LossKind, Strategy};

use crate::commands;
use crate::layout::{CellKey, RunRoot};
use crate::settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "vlminv", version, about = "Model-inversion attacks on a toy vision-language model")]
pub struct Cli {
    /// Directory holding build/, attacks/ and reports/.
    #[arg(long, global = true, env = "VLMINV_RUN_ROOT", default_value = "runs")]
    pub run_root: PathBuf,
    /// TOML config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy dataset and train the target, generator and classifier.
    Build(BuildArgs),
    /// Run the attack grid.
    Attack(AttackArgs),
    /// Aggregate finished runs into reports/metrics.json.
    Evaluate(GridArgs),
    /// Write summary tables and plots from the evaluated report.
    Report,
    /// Recompute a finished run and compare its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Print the full config with defaults and exit.
    #[arg(long)]
    pub emit_config: bool,
    /// Master seed of the toy stack.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Retrain even if a matching build exists.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args, Default)]
pub struct GridArgs {
    #[arg(long, value_delimiter = ',')]
    pub strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',')]
    pub losses: Vec<LossKind>,
    /// Private identity ids.
    #[arg(long, value_delimiter = ',')]
    pub targets: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Cells run at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Rerun cells that already finished.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub p_thres: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub augmentations: Option<usize>,
    /// Public pairs used for the anchor.
    #[arg(long)]
    pub anchor_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A run directory; alternatively give the cell coordinates.
    pub dir: Option<PathBuf>,
    #[arg(long, requires_all = ["loss", "target", "seed"])]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub target: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl GridArgs {
    fn apply(&self, settings: &mut Settings) {
        let g = &mut settings.grid;
        if !self.strategies.is_empty() {
            g.strategies = self.strategies.clone();
        }
        if !self.losses.is_empty() {
            g.losses = self.losses.clone();
        }
        if !self.targets.is_empty() {
            g.targets = self.targets.clone();
        }
        if !self.seeds.is_empty() {
            g.seeds = self.seeds.clone();
        }
    }
}

impl AttackArgs {
    fn apply(&self, settings: &mut Settings) {
        self.grid.apply(settings);
        let a = &mut settings.attack;
        if let Some(v) = self.steps {
            a.steps = v;
        }
        if let Some(v) = self.beta {
            a.beta = v;
        }
        if let Some(v) = self.p_thres {
            a.p_thres = v;
        }
        if let Some(v) = self.lambda {
            a.lambda = v;
        }
        if let Some(v) = self.pool_size {
            a.pool_size = v;
        }
        if let Some(v) = self.candidates {
            a.n_candidates = v;
        }
        if let Some(v) = self.augmentations {
            a.n_augmentations = v;
        }
        if let Some(v) = self.anchor_count {
            settings.anchor.count = v;
        }
    }
}

/// Runs one command. `Ok(false)` means it finished but something it was
/// asked to do failed.
pub fn run(cli: &Cli) -> Result<bool> {
    let mut settings = Settings::load_or_default(cli.config.as_deref())?;
    let root = RunRoot::new(&cli.run_root);
    match &cli.command {
        Command::Build(args) => {
            if let Some(seed) = args.seed {
                settings.stack.seed = seed;
            }
            if args.emit_config {
                print!("{}", settings.to_toml()?);
                return Ok(true);
            }
            let stack = commands::build(&root, &settings, args.overwrite)?;
            println!("{}", stack.dir.display());
            Ok(true)
        }
        Command::Attack(args) => {
            args.apply(&mut settings);
            let summary = commands::attack(&root, &settings, args.jobs, args.force)?;
            println!(
                "{} ran, {} skipped, {} failed",
                summary.ran.len(),
                summary.skipped.len(),
                summary.failed.len()
            );
            for (key, err) in &summary.failed {
                eprintln!("{}/{}/{}/{}: {err}", key.strategy, key.loss, key.target, key.seed);
            }
            Ok(summary.ok())
        }
        Command::Evaluate(grid) => {
            grid.apply(&mut settings);
            let report = commands::evaluate(&root, &settings)?;
            for c in &report.cells {
                let shown = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{}/{}: match {} runs {}{}",
                    c.strategy,
                    c.loss,
                    shown(c.match_rate),
                    c.n_runs,
                    if c.missing { " (missing)" } else { "" }
                );
            }
            Ok(true)
        }
        Command::Report => {
            for path in commands::report(&root)? {
                println!("{}", path.display());
            }
            Ok(true)
        }
        Command::Replay(args) => {
            let dir = match (&args.dir, args.strategy) {
                (Some(dir), None) => dir.clone(),
                (None, Some(strategy)) => root.cell_dir(&CellKey {
                    strategy,
                    loss: args.loss.expect("required by clap"),
                    target: args.target.expect("required by clap"),
                    seed: args.seed.expect("required by clap"),
                }),
                _ => bail!("give either a run directory or --strategy, --loss, --target and --seed"),
            };
            let check = commands::replay(&root, &dir)?;
            println!(
                "trace {}, metrics {}",
                if check.trace_identical { "identical" } else { "DIFFERENT" },
                if check.metrics_identical { "identical" } else { "DIFFERENT" }
            );
            Ok(check.ok())
        }
    }
}
