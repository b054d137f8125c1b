//! Batch driver for voidkit: configuration, the worker pool, report
//! persistence and the `protect`, `evaluate`, `selftest` and `dump-masks`
//! commands.

pub mod commands;
pub mod config;
pub mod io;
pub mod pool;
pub mod selftest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use voidkit::victim::VictimBundle;

use crate::config::{parse_fraction, Overrides, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_SELFTEST: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "voidkit", version, about = "Latent-space identity protection for face images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Protect every input image and write PNGs, run logs and a summary.
    Protect,
    /// Swap clean and protected sources onto targets and score them.
    Evaluate,
    /// Run gradient, mask, loss and metric invariant checks.
    Selftest,
    /// Write the saliency and adaptive maps of every input as PNGs.
    DumpMasks,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Input directory, file or glob pattern.
    #[arg(long, global = true)]
    pub input: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Bundle manifest (falls back to $VOIDKIT_BUNDLE, then the built-in surrogate).
    #[arg(long, global = true)]
    pub bundle: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// L∞ budget in [0, 1]; fractions such as 12/255 are accepted.
    #[arg(long, global = true, value_parser = parse_fraction)]
    pub epsilon: Option<f64>,
    /// Step size; fractions such as 1/255 are accepted.
    #[arg(long, global = true, value_parser = parse_fraction)]
    pub alpha: Option<f64>,
    /// Iteration count.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    /// Disable the perceptual modulation map.
    #[arg(long, global = true)]
    pub no_adaptive: bool,
    /// Dump masks and per-iteration adaptive maps during `protect`.
    #[arg(long, global = true)]
    pub dump_masks: bool,
}

impl Flags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            input: self.input.clone(),
            output: self.output.clone(),
            bundle: self.bundle.clone(),
            seed: self.seed,
            jobs: self.jobs,
            epsilon: self.epsilon,
            alpha: self.alpha,
            iterations: self.iters,
            no_adaptive: self.no_adaptive,
            dump_masks: self.dump_masks,
        }
    }
}

fn report(e: &anyhow::Error) {
    eprintln!("error: {e:#}");
}

fn prepare(flags: &Flags) -> anyhow::Result<(RunConfig, VictimBundle, String)> {
    let cfg = RunConfig::resolve(flags.config.as_deref(), &flags.overrides())?;
    let manifest = cfg.manifest()?;
    let bundle = VictimBundle::surrogate(&manifest)?;
    Ok((cfg, bundle, manifest.to_toml()))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (cfg, bundle, manifest_toml) = match prepare(&cli.flags) {
        Ok(v) => v,
        Err(e) => {
            report(&e);
            return EXIT_CONFIG;
        }
    };
    log::debug!("resolved config:\n{}", cfg.to_toml());
    match cli.command {
        Command::Protect => match commands::cmd_protect(&cfg, &bundle, &manifest_toml) {
            Ok(batch) => {
                let failures = batch.failures();
                println!(
                    "protected {} of {} inputs into {}",
                    batch.records.iter().filter(|r| r.output.is_some()).count(),
                    batch.records.len(),
                    cfg.output.display()
                );
                if failures > 0 {
                    eprintln!("error: {failures} inputs failed; see summary.csv");
                    EXIT_RUNTIME
                } else {
                    EXIT_OK
                }
            }
            Err(e) => {
                report(&e);
                EXIT_RUNTIME
            }
        },
        Command::Evaluate => {
            if cfg.evaluate.targets.is_none() {
                eprintln!("error: config field `evaluate.targets`: a directory of swap targets is required");
                return EXIT_CONFIG;
            }
            match commands::cmd_evaluate(&cfg, &bundle) {
                Ok(rows) => {
                    println!("wrote {} metric rows to {}", rows.len(), cfg.output.display());
                    EXIT_OK
                }
                Err(e) => {
                    report(&e);
                    EXIT_RUNTIME
                }
            }
        }
        Command::Selftest => {
            if selftest::run_and_print(&bundle, cfg.seed) {
                EXIT_OK
            } else {
                EXIT_SELFTEST
            }
        }
        Command::DumpMasks => match commands::cmd_dump_masks(&cfg, &bundle) {
            Ok(n) => {
                println!("dumped masks for {n} inputs into {}", cfg.output.join("masks").display());
                EXIT_OK
            }
            Err(e) => {
                report(&e);
                EXIT_RUNTIME
            }
        },
    }
}
