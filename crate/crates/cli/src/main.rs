use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gcdisc::{RunConfig, RunManifest, SimKind};
use gcdisc_core::selector::LagMode;
use gcdisc_core::train::Ablation;

/// Granger-causal graph discovery with sparse sLSTM component models.
#[derive(Parser)]
#[command(name = "gcdisc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark series with its ground-truth graph.
    Simulate {
        #[arg(value_enum)]
        kind: KindArg,
        #[command(flatten)]
        common: Common,
    },
    /// Train one component model per variate and extract the graph.
    Train {
        /// CSV file, rows are time steps and columns are variates.
        data: PathBuf,
        /// Ground-truth graph JSON; adds accuracy metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// The CSV has no header row.
        #[arg(long)]
        no_header: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train over a lambda grid and score edges by survival.
    Sweep {
        data: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        no_header: bool,
        /// Comma-separated lambda values (default 5..=15).
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a graph with a ground truth graph.
    Evaluate {
        graph: PathBuf,
        truth: PathBuf,
        /// Leave self-edges out of the scored cells.
        #[arg(long)]
        exclude_diagonal: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun a command from its manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long, value_enum)]
    lag_mode: Option<LagModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Lorenz96,
    Var,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Lstm,
    GroupLasso,
}

#[derive(Clone, Copy, ValueEnum)]
enum LagModeArg {
    Shared,
    PerLag,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(lambda) = self.lambda {
            cfg.train.lambda = lambda;
        }
        if let Some(a) = self.ablation {
            cfg.train.ablation = match a {
                AblationArg::Lstm => Ablation::Lstm,
                AblationArg::GroupLasso => Ablation::GroupLasso,
            };
        }
        if let Some(m) = self.lag_mode {
            cfg.train.lag_mode = match m {
                LagModeArg::Shared => LagMode::Shared,
                LagModeArg::PerLag => LagMode::PerLag,
            };
        }
        Ok(cfg)
    }
}

fn report(manifest: &RunManifest, out: &std::path::Path) {
    println!(
        "wrote {} files to {} in {:.1}s",
        manifest.artifacts.len(),
        out.display(),
        manifest.wall_clock_secs
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { kind, common } => {
            let kind = match kind {
                KindArg::Lorenz96 => SimKind::Lorenz96,
                KindArg::Var => SimKind::Var,
            };
            let m = gcdisc::cmd_simulate(kind, &common.config()?, &common.out)?;
            report(&m, &common.out);
        }
        Command::Train {
            data,
            truth,
            no_header,
            common,
        } => {
            let cfg = common.config()?;
            let m = gcdisc::cmd_train(&data, truth.as_deref(), !no_header, &cfg, common.workers, &common.out)?;
            report(&m, &common.out);
        }
        Command::Sweep {
            data,
            truth,
            no_header,
            lambdas,
            common,
        } => {
            let mut cfg = common.config()?;
            if let Some(l) = lambdas {
                cfg.sweep.lambdas = l;
            }
            let m = gcdisc::cmd_sweep(&data, truth.as_deref(), !no_header, &cfg, common.workers, &common.out)?;
            report(&m, &common.out);
        }
        Command::Evaluate {
            graph,
            truth,
            exclude_diagonal,
            out,
        } => {
            let mut cfg = RunConfig::default();
            cfg.eval.include_diagonal = !exclude_diagonal;
            let r = gcdisc::cmd_evaluate(&graph, &truth, &cfg, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Replay { manifest, out } => {
            let recorded = RunManifest::load(&manifest)?;
            let m = gcdisc::replay(&recorded, &out)?;
            report(&m, &out);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCDISC_LOG", "info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
