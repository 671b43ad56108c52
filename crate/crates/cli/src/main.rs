//! `octgan`: phantom datasets, GAN training, sampling, gradient checks and
//! loss plots.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 usage or configuration
//! error, 3 runtime or data error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use octgan_core::nn::{gradcheck_suite, LayerKind};
use octgan_core::phantom::{build_dataset, ClassMix, Pathology};
use octgan_core::{dataio, gan, Error};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "octgan", version, about = "GAN training on synthetic retinal OCT B-scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset: one PGM per image plus manifest.tsv.
    Phantom {
        /// Number of images [default: dataset_count from the config, else 2000].
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: Option<u64>,
        /// Class proportions, e.g. "normal=0.5,detachment=0.5".
        #[arg(long)]
        mix: Option<ClassMix>,
        #[arg(long)]
        seed: Option<u64>,
        /// Config file supplying augmentation and noise settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a phantom dataset, writing losses, sample grids and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by `phantom`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory [default: `out` from the config].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a grid of generator samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every layer's backward pass with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
        /// Negate one layer kind's analytic gradients (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Plot a loss CSV over an inclusive step window as SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        from: usize,
        /// Last step to include [default: last step in the file].
        #[arg(long)]
        to: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    GradCheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Proportions(_) | Error::Audit(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
        }
        _ => Ok(()),
    }
}

fn cmd_phantom(count: Option<u64>, mix: Option<ClassMix>, seed: Option<u64>, config: Option<&Path>, out: &Path) -> CmdResult {
    let mut cfg = load_config(config)?.dataset;
    if let Some(count) = count {
        cfg.count = count as usize;
    }
    if let Some(mix) = mix {
        cfg.mix = mix;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dataset = build_dataset(&cfg)?;
    dataio::write_dataset(out, &dataset)?;
    let counts = dataset.class_counts();
    for class in Pathology::ALL {
        println!("{:<18} {}", class.name(), counts[class.index()]);
    }
    println!("{:<18} {}", "total", dataset.len());
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config)?;
    let out = out
        .or(cfg.out)
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set `out` in the config".into()))?;
    if !data.join(dataio::MANIFEST).is_file() {
        return Err(Failure::Usage(format!(
            "no dataset at {} (missing {})",
            data.display(),
            dataio::MANIFEST
        )));
    }
    let dataset = match dataio::read_dataset(data) {
        Err(Error::EmptyDataset) => return Err(Failure::Usage(format!("dataset {} is empty", data.display()))),
        other => other?,
    };
    let every = cfg.train.sample_every;
    let start = Instant::now();
    gan::train(&cfg.train, &dataset, &out, |r| {
        if (r.step + 1) % every == 0 {
            eprintln!(
                "step {:>6}  d_loss {:.4}  g_loss {:.4}  {:.0?}",
                r.step + 1,
                r.d_loss,
                r.g_loss,
                start.elapsed()
            );
        }
    })?;
    println!("{} steps in {:.1?}; artifacts in {}", cfg.train.steps, start.elapsed(), out.display());
    Ok(())
}

fn cmd_sample(ckpt: &Path, n: usize, seed: u64, out: &Path) -> CmdResult {
    let tensors = dataio::load_checkpoint(ckpt)?;
    let generator = gan::generator_from_checkpoint(&tensors)?;
    let grid = gan::sample_grid(&generator, n, seed)?;
    ensure_parent(out)?;
    dataio::write_image(out, &grid)?;
    Ok(())
}

fn cmd_gradcheck(seeds: u64, inject_fault: Option<&str>) -> CmdResult {
    let fault = inject_fault
        .map(|name| LayerKind::from_name(name).ok_or_else(|| Failure::Usage(format!("unknown layer kind `{name}`"))))
        .transpose()?;
    let seeds: Vec<u64> = (1..=seeds).collect();
    let start = Instant::now();
    let entries = gradcheck_suite(&seeds, fault)?;
    println!("{:<18} {:>13} {:>10}  status", "layer", "max_rel_error", "tolerance");
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<18} {:>13.3e} {:>10.0e}  {status}", e.kind.name(), e.max_error, e.tolerance);
    }
    println!("{} seeds in {:.1?}", seeds.len(), start.elapsed());
    if entries.iter().all(|e| e.passed()) {
        Ok(())
    } else {
        Err(Failure::GradCheck)
    }
}

fn cmd_plot(csv: &Path, from: usize, to: Option<usize>, out: &Path) -> CmdResult {
    let records = dataio::read_loss_csv(csv)?;
    let to = to.unwrap_or_else(|| records.last().map_or(0, |r| r.step));
    if from > to {
        return Err(Failure::Usage(format!("--from {from} is after --to {to}")));
    }
    ensure_parent(out)?;
    dataio::write_loss_svg(&records, out, from, to)?;
    Ok(())
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Phantom { count, mix, seed, config, out } => cmd_phantom(count, mix, seed, config.as_deref(), &out),
        Command::Train { config, data, out } => cmd_train(config.as_deref(), &data, out),
        Command::Sample { ckpt, n, seed, out } => cmd_sample(&ckpt, n as usize, seed, &out),
        Command::Gradcheck { seeds, inject_fault } => cmd_gradcheck(seeds, inject_fault.as_deref()),
        Command::Plot { csv, from, to, out } => cmd_plot(&csv, from, to, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradCheck) => {
            eprintln!("gradient check failed");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
