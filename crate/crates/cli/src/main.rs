//! `meshcorr` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure (I/O), 2 usage or invalid
//! configuration, 3 malformed input files, 4 numerical failure.

mod commands;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshcorr::config::KvConfig;

#[derive(Parser)]
#[command(name = "meshcorr", version, about = "Mesh feature rasterization and learned depth correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args)]
pub struct Common {
    /// Output directory; replaced atomically on success.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override or add a configuration key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    pub fn load_config(&self) -> Result<KvConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => KvConfig::load(path)?,
            None => KvConfig::parse("", "command line")?,
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic reference / corrupted mesh pair with a trajectory.
    GenSynthetic {
        /// Scene preset: clean, bias or street.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Render feature images of a mesh for every pose.
    Rasterize {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Inverse-depth error between camera and reference renders.
    GenGt {
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        laser: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train an error-prediction network.
    Train {
        /// Camera feature root; repeat together with --gt.
        #[arg(long, required = true)]
        features: Vec<PathBuf>,
        /// Error root matching the preceding --features.
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict error images with a trained network.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Apply predicted errors to camera inverse depth.
    Correct {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Baseline and corrected metrics of a network on labelled frames.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-feature ablation table.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Training data for faithful mode and the fine-tuned row.
        #[arg(long)]
        train_features: Vec<PathBuf>,
        #[arg(long)]
        train_gt: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Color-coded PPM of signed error images.
    RenderOverlay {
        #[arg(long)]
        errors: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(meshcorr::Error),
}

impl From<meshcorr::Error> for CliError {
    fn from(e: meshcorr::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use meshcorr::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(e) if e.is_input_format() || matches!(e, E::Empty(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Missing inputs are reported before anything is written.
pub fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input {} does not exist", path.display())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenSynthetic { task, seed, common } => commands::gen_synthetic(task, seed, &common),
        Command::Rasterize {
            mesh,
            poses,
            intrinsics,
            common,
        } => commands::rasterize(&mesh, &poses, &intrinsics, &common),
        Command::GenGt { camera, laser, common } => commands::gen_gt(&camera, &laser, &common),
        Command::Train { features, gt, common } => commands::train(&features, &gt, &common),
        Command::Infer {
            checkpoint,
            features,
            common,
        } => commands::infer(&checkpoint, &features, &common),
        Command::Correct { features, pred, common } => commands::correct(&features, &pred, &common),
        Command::Eval {
            checkpoint,
            features,
            gt,
            common,
        } => commands::eval(&checkpoint, &features, &gt, &common),
        Command::Ablate {
            checkpoint,
            features,
            gt,
            train_features,
            train_gt,
            common,
        } => commands::ablate(&checkpoint, &features, &gt, &train_features, &train_gt, &common),
        Command::RenderOverlay { errors, common } => commands::render_overlay(&errors, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("meshcorr: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
