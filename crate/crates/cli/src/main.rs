use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vibre::training::Method;
use vibre_cli::{analyze, eval, gen_data, train, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "vibre", version, about = "Entity-debiased relation extraction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenData(Common),
    /// Train one model per (method, seed).
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue interrupted runs from their last epoch snapshot.
        #[arg(long)]
        resume: bool,
    },
    /// Score checkpoints on the ID and OOD test sets.
    Eval(Common),
    /// Variance bins, sorted-F1 curves and attributions for vib runs.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed (overrides `seeds`).
    #[arg(long)]
    seed: Option<u64>,
    /// Run a single method (overrides `methods`).
    #[arg(long)]
    method: Option<String>,
}

impl Common {
    fn load(&self) -> vibre::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let method = self.method.as_deref().map(str::parse::<Method>).transpose()?;
        cfg.apply(&Overrides {
            out_dir: self.out.clone(),
            seed: self.seed,
            method,
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> vibre::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let m = gen_data(&c.load()?)?;
            for (name, hash) in &m.files {
                println!("{hash}  {name}");
            }
        }
        Command::Train { common, resume } => {
            for s in train(&common.load()?, resume)? {
                let dev = s.best_dev_micro_f1.map_or("-".into(), |d| format!("{:.4}", d));
                println!("{}-seed{}: {} epochs, best dev micro-F1 {dev}", s.method, s.seed, s.epochs_run);
            }
        }
        Command::Eval(c) => print!("{}", eval(&c.load()?)?.table),
        Command::Analyze(c) => {
            for p in analyze(&c.load()?)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
