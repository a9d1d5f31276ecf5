//! `gsvq`: compress, decompress, render and evaluate 3DGS models.
//!
//! JSON reports go to stdout and logs to stderr. Exit codes: 0 success,
//! 1 usage, 2 input I/O, 3 format or corruption, 4 numeric failure.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, Failure};

#[derive(Debug, Parser)]
#[command(
    name = "gsvq",
    version,
    about = "Vector-quantized compression for 3D Gaussian splat models"
)]
struct Cli {
    /// Worker thread cap; outputs do not depend on it.
    #[arg(long, global = true, env = "GSVQ_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a 3DGS PLY into an .nvqg file.
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cameras for the render loss.
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[command(flatten)]
        opts: CompressArgs,
    },
    /// Expand an .nvqg file back into a standard 3DGS PLY.
    Decompress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a PLY or .nvqg model from each camera to PNG.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        /// Output directory; files are named view_000.png, view_001.png, ...
        #[arg(long)]
        out: PathBuf,
        /// Also write raw little-endian f32 RGB next to each PNG.
        #[arg(long)]
        raw: bool,
        #[arg(long, value_parser = parse_rgb)]
        background: Option<[f64; 3]>,
    },
    /// Compare a compressed model with its original.
    Eval {
        #[arg(long)]
        original: PathBuf,
        /// Compressed model; not used with --sizes.
        #[arg(long = "in", required_unless_present = "sizes")]
        input: Option<PathBuf>,
        /// Cameras for image metrics, and for the render loss with --sizes.
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Compress the original at each named size and print one CSV row per size.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<String>>,
        /// Write the report as a CSV header and row to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Compare renders after rounding to 8 bits.
        #[arg(long)]
        eight_bit: bool,
        #[command(flatten)]
        opts: CompressArgs,
    },
    /// Generate a synthetic scene and optional orbit cameras.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, value_enum, default_value = "random")]
        preset: PresetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        sh_degree: u8,
        #[arg(long, default_value_t = 1.0)]
        extent: f32,
        /// Write orbit cameras to this JSON file.
        #[arg(long)]
        cameras_out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        #[arg(long, default_value_t = 64)]
        image_size: u32,
    },
    /// Print the header and size breakdown of an .nvqg file, or a PLY summary.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum PresetArg {
    Random,
    BlobGrid,
}

/// Pipeline settings; flags override the config file, which overrides defaults.
#[derive(Debug, Clone, Args)]
struct CompressArgs {
    /// TOML file with any CompressionConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named codebook size: 0.5k, 1k, 2k, 4k, 8k or 16k.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prune_lambda: Option<f64>,
    #[arg(long)]
    prune_threshold: Option<f64>,
    #[arg(long)]
    vq_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    /// Train colour/SH codebooks through the render loss (needs --cameras).
    #[arg(long)]
    render_loss: bool,
    /// Background colour as r,g,b in [0, 1].
    #[arg(long, value_parser = parse_rgb)]
    background: Option<[f64; 3]>,
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [r, g, b] if parts.iter().all(|v| v.is_finite()) => Ok([r, g, b]),
        _ => Err(format!("expected three finite numbers r,g,b, got {s:?}")),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::new(Failure::Usage, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(Failure::Usage, e.to_string()))?;
    }
    match cli.command {
        Command::Compress {
            input,
            out,
            cameras,
            opts,
        } => commands::compress(&input, &out, cameras.as_deref(), &opts),
        Command::Decompress { input, out } => commands::decompress(&input, &out),
        Command::Render {
            input,
            cameras,
            out,
            raw,
            background,
        } => commands::render(&input, &cameras, &out, raw, background.unwrap_or([0.0; 3])),
        Command::Eval {
            original,
            input,
            cameras,
            sizes,
            csv,
            eight_bit,
            opts,
        } => commands::eval(commands::EvalArgs {
            original: &original,
            input: input.as_deref(),
            cameras: cameras.as_deref(),
            sizes: sizes.as_deref(),
            csv: csv.as_deref(),
            eight_bit,
            opts: &opts,
        }),
        Command::Synth {
            out,
            count,
            preset,
            seed,
            sh_degree,
            extent,
            cameras_out,
            views,
            radius,
            image_size,
        } => {
            let spec = gsvq::synth::SceneSpec {
                splat_count: count,
                preset: match preset {
                    PresetArg::Random => gsvq::synth::Preset::Random,
                    PresetArg::BlobGrid => gsvq::synth::Preset::BlobGrid,
                },
                seed,
                sh_degree,
                extent,
                ..Default::default()
            };
            commands::synth(&spec, &out, cameras_out.as_deref(), views, radius, image_size)
        }
        Command::Inspect { input } => commands::inspect(&input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Failure::Usage.code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.kind.code())
        }
    }
}
