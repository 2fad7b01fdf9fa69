use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::{error, info};

use overlay_core::pipeline::{self, ConfigError, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "overlay", version, about = "Race car tracking and overlay-anchor streaming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the live pipeline and serve consoles.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long)]
        record: Option<PathBuf>,
        /// Conflicts with --record; use the replay command to play a recording.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Timestamps derived from frame ids so recordings are byte-comparable.
        #[arg(long)]
        fixed_clock: bool,
        /// Stop after this many frames.
        #[arg(long)]
        frames: Option<u64>,
    },
    /// Publish a recorded session.
    Replay {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        listen: String,
        #[arg(long)]
        fps: f64,
    },
    /// Run the per-frame computation flat out and report throughput.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        frames: u64,
    },
    /// Write an auto-tagged dataset of ground truth and noisy detections.
    ExportDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        frames: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("OVERLAY_LOG_LEVEL", "info");
    env_logger::Builder::from_env(env).format_timestamp_millis().init();
}

fn stop_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let handler_stop = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || handler_stop.store(true, Ordering::SeqCst)) {
        error!("cannot install interrupt handler: {e}");
    }
    stop
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run { config, listen, fps, record, replay, seed, fixed_clock, frames } => {
            let mut cfg = PipelineConfig::from_file(&config)?;
            if let Some(listen) = listen {
                cfg.listen = listen;
            }
            if let Some(fps) = fps {
                cfg.fps = fps;
            }
            if record.is_some() {
                cfg.record = record;
            }
            if replay.is_some() {
                cfg.replay = replay;
            }
            if let Some(seed) = seed {
                cfg.scenario.seed = seed;
            }
            cfg.fixed_clock |= fixed_clock;
            cfg.validate()?;
            if cfg.replay.is_some() {
                return Err(ConfigError::Invalid {
                    path: "replay".into(),
                    reason: "use the replay command to play a recording".into(),
                }
                .into());
            }
            let summary = pipeline::run(&cfg, &stop_flag(), frames)?;
            info!("stopped after {} frames", summary.frames);
        }
        Command::Replay { input, listen, fps } => {
            let published = pipeline::replay(&input, &listen, fps, &stop_flag())?;
            info!("replayed {published} frames");
        }
        Command::Bench { config, frames } => {
            let cfg = PipelineConfig::from_file(&config)?;
            let report = pipeline::bench(&cfg, frames)?;
            print!("{}", report.to_line());
        }
        Command::ExportDataset { config, frames, out } => {
            let cfg = PipelineConfig::from_file(&config)?;
            let written = pipeline::export(&cfg, frames, &out)?;
            info!("wrote {written} records to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
