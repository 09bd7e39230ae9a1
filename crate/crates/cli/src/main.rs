use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ctlio::dataset::read_toml;
use ctlio::eval::EvalOptions;
use ctlio::pipeline::{cmd_eval, cmd_run, cmd_sim, RunConfig};
use ctlio::simulator::ScenarioSpec;
use ctlio::state_filter::{FitErrorMode, Mode};
use ctlio::Error;

#[derive(Parser)]
#[command(name = "ctlio", version, about = "Continuous-time LiDAR-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Sim {
        /// Scenario TOML; overrides --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Benign)]
        preset: Preset,
        /// Drop all sensor noise, biases and outliers.
        #[arg(long)]
        noise_free: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Estimate a trajectory from IMU and scan files.
    Run {
        /// Run TOML with paths and estimator settings; `sim` writes one
        /// next to each dataset.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Absolute position error of an estimate against ground truth (TUM files).
    Eval {
        ground_truth: PathBuf,
        estimate: PathBuf,
        /// Align the first associated poses before scoring.
        #[arg(long)]
        align_origin: bool,
        /// Largest timestamp gap for association, s.
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Benign,
    Aggressive,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Lio,
    Lo,
}

fn sim(
    config: Option<&Path>,
    preset: Preset,
    noise_free: bool,
    seed: Option<u64>,
    duration: Option<f64>,
    output: &Path,
) -> ctlio::Result<()> {
    let mut spec = match (config, preset) {
        (Some(p), _) => read_toml::<ScenarioSpec>(p)?,
        (None, Preset::Benign) => ScenarioSpec::benign(0),
        (None, Preset::Aggressive) => ScenarioSpec::aggressive(0),
    };
    if noise_free {
        spec = spec.noise_free();
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(d) = duration {
        spec.duration = d;
    }
    let data = cmd_sim(&spec, output)?;
    println!("wrote {} IMU samples and {} scans to {}", data.imu.len(), data.scans.len(), output.display());
    Ok(())
}

fn run(config: &Path, mode: Option<CliMode>, output: Option<PathBuf>) -> ctlio::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    match mode {
        Some(CliMode::Lio) => cfg.estimator.mode = Mode::Lio,
        Some(CliMode::Lo) => {
            cfg.estimator.mode = Mode::Lo;
            if cfg.estimator.fitting_error == FitErrorMode::Online {
                cfg.estimator.fitting_error = FitErrorMode::Fixed;
            }
        }
        None => {}
    }
    if let Some(o) = output {
        cfg.output = o;
    }
    if cfg.output.as_os_str().is_empty() {
        return Err(Error::Config("no output directory; set `output` or pass --output".into()));
    }
    let out = cmd_run(&cfg)?;
    println!(
        "{} frames, {:.2} ms/frame, trajectory in {}",
        out.trajectory.len(),
        out.mean_frame_time().as_secs_f64() * 1e3,
        cfg.output.display()
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::OutOfSpan { .. } | Error::Antipodal | Error::BackwardPrediction { .. } => 1,
        Error::InvalidInput(_) | Error::Config(_) | Error::Parse { .. } | Error::Io { .. } => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Sim { config, preset, noise_free, seed, duration, output } => {
            sim(config.as_deref(), preset, noise_free, seed, duration, &output)
        }
        Cmd::Run { config, mode, output } => run(&config, mode, output),
        Cmd::Eval { ground_truth, estimate, align_origin, tolerance } => {
            cmd_eval(&ground_truth, &estimate, &EvalOptions { tolerance, align_origin }).map(|s| {
                println!("APE_RMSE {:.9}\nAPE_MAX {:.9}\nAPE_MEAN {:.9}\nN {}", s.rmse, s.max, s.mean, s.n);
            })
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
