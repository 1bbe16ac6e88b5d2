mod experiment;
mod files;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reconvset::extractors::Activation;
use reconvset::kernel_matrix::Scheme;
use reconvset::noise::NoiseKind;

/// Hyperspectral denoising experiments and kernel-matrix rank analysis.
#[derive(Parser, Debug)]
#[command(name = "reconvset", version)]
struct Cli {
    /// Worker threads for parallel-safe operations (training). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic hyperspectral phantoms.
    GenData {
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Cube size as BANDSxHEIGHTxWIDTH.
        #[arg(long, default_value = "31x256x256", value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a cube, or every cube in a directory, with a noise case.
    AddNoise {
        /// g30, g50, g70, gN, blind, blind:A:B, c1..c5.
        #[arg(long)]
        case: NoiseKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a U-Net denoiser on clean cubes with on-the-fly noise.
    Train(TrainArgs),
    /// Run a trained checkpoint over a cube or a directory of cubes.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a test cube to a reference (PSNR per band, MPSNR, MSSIM, SAM).
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicted vs measured rank of random kernel matrices.
    RankReport {
        #[command(flatten)]
        schemes: SchemeChoice,
        #[arg(long = "M", default_value_t = 16)]
        m: usize,
        #[arg(long = "C", default_value_t = 16)]
        c: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Number of random draws per scheme.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// First seed of the draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative singular-value tolerance.
        #[arg(long, default_value_t = reconvset::tensor::DEFAULT_RANK_TOL)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalized singular spectrum of pre-compression features on random input.
    SpectrumReport {
        #[command(flatten)]
        schemes: SchemeChoice,
        #[arg(long = "M", default_value_t = 16)]
        m: usize,
        #[arg(long = "C", default_value_t = 16)]
        c: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Random input size as BxHxW.
        #[arg(long, default_value = "8x12x12", value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weight and bias count of one feature-extraction block.
    CountParams {
        #[command(flatten)]
        schemes: SchemeChoice,
        /// Output channels M.
        #[arg(long)]
        channels: usize,
        /// Input channels C; defaults to M.
        #[arg(long)]
        in_channels: Option<usize>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Train and evaluate all five extractors on the same data and seed.
    Ablation {
        #[command(flatten)]
        train: TrainArgs,
        /// Directory of clean held-out cubes.
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long, default_value = "blind")]
        eval_noise: NoiseKind,
        #[arg(long, default_value_t = 99)]
        eval_seed: u64,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct SchemeChoice {
    /// Every extractor scheme.
    #[arg(long)]
    all: bool,
    /// conv3d, seq1d, seq1d2d, par1d2d or reconvset.
    #[arg(long)]
    extractor: Option<Scheme>,
}

impl SchemeChoice {
    fn list(&self) -> Vec<Scheme> {
        match self.extractor {
            Some(s) => vec![s],
            None => Scheme::ALL.to_vec(),
        }
    }
}

/// Training options. Unset flags fall back to `--config`, then to defaults.
#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// key=value file, e.g. an `experiment.cfg` written by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of clean `.hsc` cubes.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    extractor: Option<Scheme>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Training noise, e.g. blind or g50.
    #[arg(long)]
    noise: Option<NoiseKind>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    blocks_per_level: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    /// Square patch side in pixels.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    patches_per_cube: Option<usize>,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || format!("expected BxHxW with positive integers, got '{s}'");
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut dims = [0; 3];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.parse().ok().filter(|&v| v > 0).ok_or_else(bad)?;
    }
    Ok(dims)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { count, dims, seed, out } => files::gen_data(count, dims, seed, &out),
        Command::AddNoise { case, seed, input, out } => files::add_noise(case, seed, &input, &out),
        Command::Train(args) => experiment::train_command(&args, cli.threads),
        Command::Denoise { checkpoint, input, out } => files::denoise(&checkpoint, &input, &out),
        Command::Eval { reference, test, out } => files::eval(&reference, &test, out.as_deref()),
        Command::RankReport { schemes, m, c, k, seeds, seed, tol, out } => {
            reports::rank_report(&schemes.list(), [m, c, k], seed, seeds, tol, out.as_deref())
        }
        Command::SpectrumReport { schemes, m, c, k, dims, seed, out } => {
            reports::spectrum_report(&schemes.list(), [m, c, k], dims, seed, out.as_deref())
        }
        Command::CountParams { schemes, channels, in_channels, k } => {
            reports::param_counts(&schemes.list(), schemes.all, channels, in_channels.unwrap_or(channels), k);
            Ok(())
        }
        Command::Ablation { train, eval_data, eval_noise, eval_seed } => {
            experiment::ablation(&train, &eval_data, eval_noise, eval_seed, cli.threads)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
