//! `bevda`: simulate, encode, train, adapt and evaluate.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bevda", version, about = "Semantic CycleGAN domain adaptation for LiDAR bird's-eye views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArg {
    /// Experiment configuration (TOML); see `bevda init-config`.
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration file with every key at its default.
    InitConfig {
        #[arg(long)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate scenes and ray-cast source-domain frames.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Number of frames.
        #[arg(long, short)]
        n: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Degrade source frames into the pseudo-real target domain.
    Perturb {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Encode clouds into BEV images, semantic grids and PNG previews.
    Encode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train the BEV segmenter on encoded, labelled frames.
    TrainCls {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train the translation networks on encoded source and target frames.
    TrainDa {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Segmenter checkpoint; required when `train.lambda_sem > 0`.
        #[arg(long)]
        cls: Option<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Translate encoded frames with the source-to-target generator.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// BEV and 3D average precision of KITTI detections.
    Eval {
        /// Directory of scored detection label files.
        #[arg(long)]
        det: PathBuf,
        /// Directory of ground-truth label files.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        car: Option<f64>,
        #[arg(long)]
        pedestrian: Option<f64>,
        #[arg(long)]
        cyclist: Option<f64>,
        #[arg(long, value_enum)]
        interpolation: Option<Points>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// How often segmenter predictions survive translation.
    Consistency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cls: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Points {
    #[value(name = "40")]
    Forty,
    #[value(name = "11")]
    Eleven,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands as c;
    match cli.command {
        Command::InitConfig { seed, out } => c::init_config(seed, &out),
        Command::Simulate { config, n, out } => c::simulate(&config.config, n, out),
        Command::Perturb { config, input, out } => c::perturb(&config.config, &input, out),
        Command::Encode { config, input, out } => c::encode(&config.config, &input, out),
        Command::TrainCls { config, data, out } => c::train_cls(&config.config, &data, out),
        Command::TrainDa {
            config,
            source,
            target,
            cls,
            out,
        } => c::train_da(&config.config, &source, &target, cls.as_deref(), out),
        Command::Adapt { checkpoint, input, out } => c::adapt(&checkpoint, &input, &out),
        Command::Eval {
            det,
            gt,
            config,
            car,
            pedestrian,
            cyclist,
            interpolation,
            out,
        } => c::eval(
            &det,
            &gt,
            config.as_deref(),
            c::Thresholds {
                car,
                pedestrian,
                cyclist,
                interpolation,
            },
            out,
        ),
        Command::Consistency {
            checkpoint,
            cls,
            data,
            out,
        } => c::consistency(&checkpoint, &cls, &data, out),
    }
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = matches!(e.downcast_ref::<bevda_core::Error>(), Some(bevda_core::Error::Config(_)));
            if usage {
                eprintln!("usage error: {}", describe(&e));
                ExitCode::from(2)
            } else {
                eprintln!("error: {}", describe(&e));
                ExitCode::from(1)
            }
        }
    }
}
