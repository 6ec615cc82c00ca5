use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "cxnn", version, about = "Real vs complex-valued CNN experiments on synthetic images")]
#[command(after_long_help = config::keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (manifest plus .cxt tensors).
    #[command(after_help = config::keys_help())]
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print features and trainable parameters for CNN, CNNx2 and CV-CNN.
    CountParams {
        #[arg(long)]
        arch: Option<String>,
        /// Report a single variant instead of the triplet.
        #[arg(long)]
        variant: Option<String>,
        /// Use canonical widths and depths.
        #[arg(long)]
        canonical: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one variant on the first fold and save a checkpoint.
    #[command(after_help = config::keys_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-validate every configured variant and write the report.
    #[command(after_help = config::keys_help())]
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Concurrent fold jobs (overridden by CXNN_THREADS).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write predicted masks and error overlays for a segmentation checkpoint.
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<config::RunConfig, commands::Failure> {
    let Some(path) = path else {
        return Ok(config::RunConfig::for_family(cxnn::models::Family::ResNet18));
    };
    let text = std::fs::read_to_string(path).map_err(|e| commands::Failure::usage(format!("{}: {e}", path.display())))?;
    config::RunConfig::parse(&text).map_err(|e| commands::Failure::usage(format!("{}: {e}", path.display())))
}

fn jobs(flag: usize) -> usize {
    std::env::var("CXNN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(flag)
        .max(1)
}

fn run(cli: Cli) -> Result<(), commands::Failure> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut c = load_config(config.as_deref())?;
            if let Some(s) = seed {
                c.set_seed(s);
            }
            commands::gen_data(&c, out.as_deref().unwrap_or(&c.out))
        }
        Command::CountParams {
            arch,
            variant,
            canonical,
            config,
        } => {
            let c = load_config(config.as_deref())?;
            commands::count_params(&c.arch, arch.as_deref(), variant.as_deref(), canonical)
        }
        Command::Train {
            config,
            variant,
            out,
            seed,
        } => {
            let mut c = load_config(Some(&config))?;
            if let Some(s) = seed {
                c.set_seed(s);
            }
            let out = out.unwrap_or_else(|| c.out.clone());
            commands::train(&c, variant.as_deref(), &out)
        }
        Command::Compare { config, out, seed, jobs: j } => {
            let mut c = load_config(Some(&config))?;
            if let Some(s) = seed {
                c.set_seed(s);
            }
            let out = out.unwrap_or_else(|| c.out.clone());
            commands::compare(&c, &out, jobs(j))
        }
        Command::ExportMasks { checkpoint, data, out } => commands::export_masks(&checkpoint, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
