use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vseg::{Error, Result};
use vseg_cli::{cmd_ablate, cmd_eval, cmd_phantom, cmd_segment, cmd_slices, cmd_train, Grid, RunConfig};

#[derive(Parser)]
#[command(name = "vseg", version, about = "Volumetric organ-at-risk segmentation toolkit")]
struct Cli {
    /// Run configuration JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configured one).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Zero-pad volumes whose dims the network cannot down-sample evenly.
    #[arg(long, global = true)]
    pad: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom volume/label pairs and a manifest.
    Phantom {
        #[arg(long, default_value_t = 10)]
        n: u64,
    },
    /// Train a network; phantoms are generated on the fly unless --data is given.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score predictions (or a checkpoint's segmentations) against a data directory.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Directory of label files named like the data directory's.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Segment one volume file.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Output label file; defaults to segmentation.vol in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a grid of variants and tabulate held-out DSC.
    Ablate {
        #[arg(long, value_enum)]
        grid: Grid,
    },
    /// Export tinted slice images.
    Slices {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        axis: usize,
        /// Restrict tinting to one class ID.
        #[arg(long)]
        class: Option<u8>,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("VSEG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("VSEG_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::Phantom { n } => {
            let m = cmd_phantom(&cfg, n, &out)?;
            println!(
                "wrote {} phantoms to {} (background fraction {:.4})",
                m.files.len(),
                out.display(),
                m.background_fraction
            );
        }
        Command::Train { data } => {
            let r = cmd_train(&cfg, data.as_deref(), &out)?;
            let last = r.history.steps.last().map_or(f64::NAN, |s| s.loss);
            println!("trained {} steps, final loss {last:.5}", r.history.steps.len());
            println!("checkpoint {}", r.checkpoint.display());
            if let Some(m) = r.held_out.and_then(|a| a.mean_dsc) {
                println!("held-out mean DSC {m:.4}");
            }
        }
        Command::Eval {
            checkpoint,
            data,
            predictions,
        } => {
            let r = cmd_eval(checkpoint.as_deref(), &data, predictions.as_deref(), &out, cli.pad)?;
            for (file, reason) in &r.failures {
                eprintln!("skipped {file}: {reason}");
            }
            print!("{}", r.aggregate.to_csv());
            if !r.failures.is_empty() {
                return Err(Error::Config(format!("{} file(s) failed", r.failures.len())));
            }
        }
        Command::Segment {
            checkpoint,
            volume,
            output,
        } => {
            let output = match output {
                Some(o) => o,
                None => {
                    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                    out.join("segmentation.vol")
                }
            };
            let r = cmd_segment(&checkpoint, &volume, &output, cli.pad)?;
            println!("segmented {:?} in {:.3} s -> {}", r.dims, r.seconds, r.output.display());
        }
        Command::Ablate { grid } => {
            let t = cmd_ablate(&cfg, grid, cli.jobs, &out)?;
            for f in t.failures() {
                eprintln!("cell {} seed {} failed: {}", f.variant, f.seed, f.error.as_deref().unwrap_or(""));
            }
            print!("{}", t.to_csv());
        }
        Command::Slices {
            volume,
            labels,
            pred,
            axis,
            class,
        } => {
            let r = cmd_slices(&volume, &labels, pred.as_deref(), axis, class, &out)?;
            println!("wrote {} slices to {}", r.files.len(), out.display());
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
