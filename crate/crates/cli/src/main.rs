use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use rigvo::eval::MetricReport;
use rigvo::geometry::RigConfig;
use rigvo::io;
use rigvo::pipeline::{run_pipeline, train_vocabulary, InputMode, PipelineError, RunConfig};
use rigvo::sim::{Scenario, TrajectoryKind};

#[derive(Parser, Debug)]
#[command(name = "rigvo", version, about = "Metric-scale multi-camera visual odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a rig run and write rig.txt and tracks.txt.
    Simulate {
        /// Rig file; the built-in four-camera vehicle rig when absent.
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Run odometry on a tracks file, or on a fresh simulation when no tracks are given.
    Run {
        #[arg(long)]
        rig: PathBuf,
        #[arg(long)]
        tracks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "loop", value_enum, default_value_t = Switch::Off)]
        loop_closure: Switch,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        scale_correction: Switch,
        /// Comma-separated camera indices to keep, e.g. `0,1`.
        #[arg(long, value_delimiter = ',')]
        cameras: Option<Vec<usize>>,
        /// Vocabulary file; trained from the run's descriptors when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Compare an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a descriptor vocabulary from a tracks file.
    MakeVocab {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Shape::Circle)]
    trajectory: Shape,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Path length in meters.
    #[arg(long, default_value_t = 100.0)]
    length: f64,
    /// Laps for closed trajectories.
    #[arg(long, default_value_t = 1.0)]
    laps: f64,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0.02)]
    dropout: f64,
}

impl ScenarioArgs {
    fn scenario(&self) -> Scenario {
        let mut sc = Scenario::circle(self.length, self.frames, self.noise, self.dropout, self.seed);
        sc.trajectory.kind = match self.trajectory {
            Shape::Circle => TrajectoryKind::Circle { laps: self.laps },
            Shape::Lemniscate => TrajectoryKind::Lemniscate { laps: self.laps },
            Shape::Line => TrajectoryKind::StraightLine,
            Shape::Random => TrajectoryKind::SmoothRandom,
        };
        sc
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Shape {
    Circle,
    Lemniscate,
    Line,
    Random,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Simulate { rig, out, scenario } => simulate(rig.as_deref(), &out, &scenario),
        Command::Run {
            rig,
            tracks,
            out,
            loop_closure,
            scale_correction,
            cameras,
            vocab,
            scenario,
        } => {
            let config = RunConfig {
                rig,
                input: match tracks {
                    Some(path) => InputMode::Ingest(path),
                    None => InputMode::Simulate(scenario.scenario()),
                },
                loop_closure: loop_closure.enabled(),
                scale_correction: scale_correction.enabled(),
                out_dir: out,
                seed: scenario.seed,
                cameras,
                vocabulary: vocab,
            };
            let (output, report) = run_pipeline(&config)?;
            for d in &output.diagnostics {
                warn!("{d}");
            }
            info!("initialized at frame {:?}, {} loops", output.init_frame, output.loops.len());
            match report {
                Some(r) => print!("{}", r.to_text()),
                None => println!("{} poses estimated (no ground truth)", output.trajectory.len()),
            }
            Ok(())
        }
        Command::Eval { est, gt, out } => {
            let est = io::load_trajectory(&est)?;
            let gt = io::load_trajectory(&gt)?;
            let text = MetricReport::evaluate(&est, &gt)?.to_text();
            match out {
                Some(path) => std::fs::write(path, text).map_err(io::IoError::from)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::MakeVocab { tracks, out, seed } => {
            let loaded = io::load_tracks(&tracks)?;
            let vocab = train_vocabulary(&loaded.dataset, seed);
            vocab.save(&out)?;
            println!("{} words written to {}", vocab.len(), out.display());
            Ok(())
        }
    }
}

fn simulate(rig: Option<&Path>, out: &Path, args: &ScenarioArgs) -> Result<(), PipelineError> {
    let rig = match rig {
        Some(path) => io::load_rig_config(path)?,
        None => RigConfig::vehicle_four_camera(),
    };
    let sim = args.scenario().simulate(&rig);
    for w in &sim.warnings {
        warn!("{w}");
    }
    std::fs::create_dir_all(out).map_err(io::IoError::from)?;
    io::write_rig_config(&rig, &out.join("rig.txt"))?;
    io::write_tracks(&sim.to_dataset(), &out.join("tracks.txt"))?;
    println!(
        "{} frames, {} observations written to {}",
        sim.gt_body_trajectory.len(),
        sim.observations.len(),
        out.display()
    );
    Ok(())
}
