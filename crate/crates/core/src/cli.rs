//! Command-line entry points. Each command returns a `Result`; `main`
//! maps errors onto the exit-code contract via [`exit_code`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attention::cost_csv;
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_data, load_dataset, SynthParams};
use crate::error::{Error, Result};
use crate::mvol::{read_volume, write_mvol};
use crate::network::{build_model, ModelConfig};
use crate::trainer::{evaluate, grad_check, grad_check_config, register, train, MetricsReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_VAR: &str = "PLANEMORPH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "planemorph", version, about = "Plane-attention transformer for 3D deformable registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        labels: usize,
        #[arg(long)]
        max_disp: f64,
        /// Smoothing width of the ground-truth field, in voxels.
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Register one pair, writing the warped moving image and the field.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        field: PathBuf,
    },
    /// Attention cost table for one token lattice.
    BenchAttn {
        /// Token lattice as H,W,D.
        #[arg(long, value_parser = parse_grid)]
        grid: [usize; 3],
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter count of the model in a run config.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference gradient check on a tiny model.
    GradCheck {
        /// Run config whose `model` section is checked; defaults to a tiny EM-11.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        per_tensor: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fail with exit code 3 above this error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected H,W,D, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("bad extent {p:?}"))?;
        if *o == 0 {
            return Err("extents must be >= 1".into());
        }
    }
    Ok(out)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Shape(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_IO,
    }
}

/// Worker cap from the environment; compute is currently serial, so any
/// valid value behaves like 1.
pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(THREADS_VAR, format!("expected a positive integer, got {s:?}"))),
        },
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(out: &Path, p: &SynthParams) -> Result<()> {
    let m = gen_data(out, p)?;
    eprintln!("wrote {} pairs to {}", m.pairs.len(), out.display());
    Ok(())
}

pub fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dataset = load_dataset(data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("resolved-config.json"), &cfg.resolved_json())?;
    let run = train(&cfg.model, &cfg.train_config(), &cfg.loss.weights(), &dataset, Some(out))?;
    if let Some(last) = run.metrics.last() {
        eprintln!(
            "{} epochs, {} steps; final loss {:.6}, val dice {:.4}",
            run.metrics.len(),
            run.steps,
            last.total,
            last.val_dice
        );
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, report: &Path) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let r = evaluate(&model, &dataset)?;
    let mut text = serde_json::to_string_pretty(&r).expect("report serializes");
    text.push('\n');
    write_text(report, &text)?;
    if let Some(d) = r.dice {
        eprintln!("dice {:.4} +- {:.4} over {} pairs", d.mean, d.sd, d.n);
    }
    Ok(r)
}

pub fn cmd_register(checkpoint: &Path, fixed: &Path, moving: &Path, out: &Path, field: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let (f, m) = (read_volume(fixed)?, read_volume(moving)?);
    if f.shape() != m.shape() {
        return Err(Error::shape(format!("fixed {:?} vs moving {:?}", f.shape(), m.shape())));
    }
    let (phi, warped) = register(&model, &f, &m)?;
    write_mvol(out, warped)?;
    write_mvol(field, phi)
}

pub fn cmd_bench_attn(grid: [usize; 3], dim: usize, out: &Path) -> Result<String> {
    if dim == 0 {
        return Err(Error::invalid("--dim must be >= 1"));
    }
    let csv = cost_csv(grid, dim);
    write_text(out, &csv)?;
    Ok(csv)
}

fn model_section(config: Option<&Path>) -> Result<ModelConfig> {
    match config {
        Some(p) => Ok(RunConfig::load(p)?.model),
        None => Ok(grad_check_config()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    threads()?;
    match cli.command {
        Command::GenData { out, n, size, labels, max_disp, sigma, seed } => {
            cmd_gen_data(&out, &SynthParams { n, size, labels, max_disp, sigma, seed })
        }
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Eval { checkpoint, data, report } => cmd_eval(&checkpoint, &data, &report).map(drop),
        Command::Register { checkpoint, fixed, moving, out, field } => {
            cmd_register(&checkpoint, &fixed, &moving, &out, &field)
        }
        Command::BenchAttn { grid, dim, out } => cmd_bench_attn(grid, dim, &out).map(drop),
        Command::CountParams { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", build_model(&cfg.model)?.count_params());
            Ok(())
        }
        Command::GradCheck { config, per_tensor, seed, tolerance } => {
            let r = grad_check(&model_section(config.as_deref())?, per_tensor, seed)?;
            println!("max_rel_err {:.3e} checked {} skipped {}", r.max_rel_err, r.checked, r.skipped);
            if r.max_rel_err > tolerance {
                return Err(Error::Diverged { epoch: 0, step: 0, loss: r.max_rel_err });
            }
            Ok(())
        }
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
