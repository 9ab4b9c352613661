//! Command-line front end: config layering, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use checkpoint::Checkpoint;
use config::{parse_override, parse_pairs, RunConfig};
use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ctxdiff", about = "In-context conditional diffusion on synthetic scenes")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Train,
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    Sandbox,
    Ablate,
    GenData,
}

impl Cli {
    /// Config file pairs, then overrides, then the dedicated flags.
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        for o in &self.overrides {
            pairs.push(parse_override(o)?);
        }
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        if let Some(out) = &self.out {
            pairs.push(("out".into(), out.display().to_string()));
        }
        Ok(pairs)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply(&self.pairs()?)?;
        Ok(cfg)
    }

    fn resolve_from(&self, ckpt: &std::path::Path) -> Result<RunConfig> {
        commands::config_for_checkpoint(&Checkpoint::load(ckpt)?, &self.pairs()?)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let s = commands::train(&cli.resolve()?)?;
            println!("wrote {}", s.checkpoint.display());
        }
        Command::Sample { checkpoint } => {
            let s = commands::sample(&cli.resolve_from(checkpoint)?, checkpoint)?;
            println!("wrote {} ({} denoiser calls per image)", s.dir.display(), s.denoiser_calls_per_image);
        }
        Command::Eval { checkpoint } => {
            for r in commands::eval(&cli.resolve_from(checkpoint)?, checkpoint)? {
                println!("{r}");
            }
        }
        Command::Sandbox => {
            for r in commands::sandbox(&cli.resolve()?)? {
                println!("{}", r.csv_row());
            }
        }
        Command::Ablate => {
            for r in commands::ablate(&cli.resolve()?)? {
                println!("{}", r.csv_row());
            }
        }
        Command::GenData => {
            let dir = commands::gen_data(&cli.resolve()?)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}
