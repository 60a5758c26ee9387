use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fusebox_cli::eval::evaluate_ap;
use fusebox_cli::pipeline::{cmd_evolve, cmd_generate, discover_frames};
use fusebox_cli::synth::{cmd_synth, SceneSpec};
use fusebox_cli::{CliError, IouMode, PipelineConfig};
use fusebox_core::io::{read_boxes, BoxRecord};

#[derive(Parser)]
#[command(
    name = "fusebox",
    version,
    about = "3D pseudo-box generation from LiDAR and camera masks"
)]
struct Cli {
    /// Pipeline config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit initial pseudo-boxes for every frame directory.
    Generate {
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine pseudo-boxes with a replayed detector.
    Evolve {
        /// Directory of box files from `generate`.
        #[arg(long)]
        boxes: PathBuf,
        /// Directory with loss.csv and phase_<p>/ detection files.
        #[arg(long)]
        detector: PathBuf,
        /// Frame directories used to densify; optional.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision of predicted boxes against truth.
    Eval {
        /// Box file or directory of box files.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = IouArg::Bev)]
        iou: IouArg,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic scene with ground truth.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene spec (JSON); defaults to one empty frame.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum IouArg {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

fn read_records(path: &Path) -> Result<Vec<BoxRecord>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut all = Vec::new();
        for file in files {
            all.extend(read_boxes(&file).map_err(|e| CliError::Input(e.to_string()))?);
        }
        Ok(all)
    } else {
        read_boxes(path).map_err(|e| CliError::Input(e.to_string()))
    }
}

fn frame_dirs(config: &PipelineConfig, frames: Option<PathBuf>) -> Result<Vec<PathBuf>, CliError> {
    match frames.or_else(|| config.dataset_root.clone()) {
        Some(root) => discover_frames(&root),
        None => Ok(Vec::new()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Generate { frames, out } => {
            let dirs = frame_dirs(&config, frames)?;
            let manifest = cmd_generate(&config, &dirs, &out)?;
            let boxes: usize = manifest.frames.iter().map(|f| f.boxes).sum();
            println!(
                "{} frames, {boxes} boxes -> {}",
                manifest.frames.len(),
                out.display()
            );
        }
        Command::Evolve {
            boxes,
            detector,
            frames,
            out,
        } => {
            let dirs = match frames {
                Some(root) => discover_frames(&root)?,
                None => Vec::new(),
            };
            print!("{}", cmd_evolve(&config, &dirs, &boxes, &detector, &out)?);
        }
        Command::Eval {
            pred,
            truth,
            iou,
            out,
        } => {
            let mode = match iou {
                IouArg::Bev => IouMode::Bev,
                IouArg::ThreeD => IouMode::ThreeD,
            };
            let report = evaluate_ap(
                &read_records(&pred)?,
                &read_records(&truth)?,
                &config.eval_params(mode),
            );
            print!("{report}");
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
                std::fs::write(&path, json)
                    .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Synth { seed, spec, out } => {
            let spec = match spec {
                Some(path) => SceneSpec::load(&path)?,
                None => SceneSpec::default(),
            };
            let report = cmd_synth(seed, &spec, &out)?;
            println!(
                "{} frames, {} objects -> {}",
                spec.frames,
                report.objects.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
