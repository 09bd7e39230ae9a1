//! End-to-end drivers behind the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    read_imu_csv, read_scan_dir, read_toml, scan_file_name, write_imu_csv, write_scan_csv, write_toml, write_tum, Frame,
    StampedPose,
};
use crate::error::{Error, Result};
use crate::eval::{ape, ApeStats, EvalOptions};
use crate::imu_observation::ImuSample;
use crate::lidar_observation::write_diagnostics_csv;
use crate::simulator::{generate, ScenarioSpec, SimData};
use crate::state_filter::{Estimator, EstimatorConfig, Mode, ScanReport};

/// Paths plus estimator settings, read from TOML.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// IMU CSV; required in LIO mode.
    pub imu: Option<PathBuf>,
    /// Directory of per-scan CSVs.
    pub scans: PathBuf,
    pub output: PathBuf,
    /// Also write the final map as CSV.
    pub write_map: bool,
    pub estimator: EstimatorConfig,
}

impl RunConfig {
    /// Reads a config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.imu.as_mut() {
            fix(p);
        }
        fix(&mut cfg.scans);
        fix(&mut cfg.output);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        if self.estimator.mode == Mode::Lio && self.imu.is_none() {
            return Err(Error::Config("LIO mode needs an `imu` path".into()));
        }
        if self.scans.as_os_str().is_empty() {
            return Err(Error::Config("`scans` directory is required".into()));
        }
        Ok(())
    }
}

pub struct RunOutput {
    /// Poses at the end of every processed frame.
    pub trajectory: Vec<StampedPose>,
    pub reports: Vec<ScanReport>,
    pub estimator: Option<Estimator>,
    /// Set when the run stopped early; `trajectory` holds what was done.
    pub failure: Option<Error>,
}

impl RunOutput {
    /// Mean estimation time per frame.
    pub fn mean_frame_time(&self) -> Duration {
        if self.reports.is_empty() {
            return Duration::ZERO;
        }
        self.reports.iter().map(|r| r.elapsed).sum::<Duration>() / self.reports.len() as u32
    }
}

/// Runs the estimator over frames. Only start-up problems are returned as
/// errors; failures mid-run end up in `failure`.
pub fn run_frames(cfg: &EstimatorConfig, imu: &[ImuSample], frames: &[Frame]) -> Result<RunOutput> {
    let lio = cfg.mode == Mode::Lio;
    let first_point = frames.iter().find_map(|f| f.points.first().map(|p| p.t));
    let start = match (lio, imu.first(), first_point) {
        (true, Some(s), _) => s.t,
        (true, None, _) => return Err(Error::InvalidInput("LIO mode needs IMU samples".into())),
        (false, _, Some(t)) => t,
        (false, _, None) => return Err(Error::InvalidInput("no LiDAR points".into())),
    };
    let static_window: Vec<ImuSample> =
        if lio { imu.iter().take_while(|s| s.t <= start + cfg.static_init_duration).copied().collect() } else { Vec::new() };
    let mut est = Estimator::new(cfg.clone(), start, &static_window)?;

    let mut out = RunOutput { trajectory: Vec::new(), reports: Vec::new(), estimator: None, failure: None };
    let mut pushed = 0;
    for frame in frames {
        if frame.t_end <= start {
            continue;
        }
        if lio {
            let upto = pushed + imu[pushed..].partition_point(|s| s.t <= frame.t_end + 1e-9);
            est.push_imu(&imu[pushed..upto]);
            pushed = upto;
        }
        match est.run_scan(&frame.points, frame.t_end).and_then(|r| {
            let (rot, pos) = est.pose_at(frame.t_end)?;
            Ok((r, StampedPose { t: frame.t_end, rot, pos }))
        }) {
            Ok((report, pose)) => {
                out.reports.push(report);
                out.trajectory.push(pose);
            }
            Err(e) => {
                out.failure = Some(e);
                break;
            }
        }
    }
    out.estimator = Some(est);
    Ok(out)
}

/// Frames of simulated data, ending at each scan period.
pub fn sim_frames(data: &SimData) -> Vec<Frame> {
    data.scans.iter().map(|s| Frame { t_end: s.t_end, points: s.points.clone() }).collect()
}

/// Ground truth sampled at the IMU rate.
pub fn sim_truth(data: &SimData) -> Vec<StampedPose> {
    data.truth.iter().map(|s| StampedPose { t: s.t, rot: s.rot, pos: s.pos }).collect()
}

pub const IMU_FILE: &str = "imu.csv";
pub const SCANS_DIR: &str = "scans";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.tum";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const TRAJECTORY_FILE: &str = "trajectory.tum";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MAP_FILE: &str = "map.csv";
pub const RUN_FILE: &str = "run.toml";

/// Run config for a simulated dataset: its paths, the true extrinsics and
/// default estimator settings.
pub fn sim_run_config(spec: &ScenarioSpec) -> RunConfig {
    let mut estimator = EstimatorConfig::default();
    estimator.extrinsic_rpy_deg = spec.lidar.extrinsic_rpy_deg;
    estimator.extrinsic_trans = spec.lidar.extrinsic_trans;
    RunConfig {
        imu: Some(IMU_FILE.into()),
        scans: SCANS_DIR.into(),
        output: "out".into(),
        write_map: false,
        estimator,
    }
}

/// Writes a simulated dataset: IMU CSV, one CSV per scan, TUM ground truth,
/// the scenario it came from and a run config to process it.
pub fn cmd_sim(spec: &ScenarioSpec, out_dir: &Path) -> Result<SimData> {
    let data = generate(spec)?;
    fs::create_dir_all(out_dir.join(SCANS_DIR)).map_err(|e| Error::io(out_dir, e))?;
    write_imu_csv(&out_dir.join(IMU_FILE), &data.imu)?;
    for (i, scan) in data.scans.iter().enumerate() {
        write_scan_csv(&out_dir.join(SCANS_DIR).join(scan_file_name(i)), &scan.points)?;
    }
    write_tum(&out_dir.join(GROUND_TRUTH_FILE), &sim_truth(&data))?;
    write_toml(&out_dir.join(SCENARIO_FILE), spec)?;
    write_toml(&out_dir.join(RUN_FILE), &sim_run_config(spec))?;
    Ok(data)
}

/// Reads inputs, runs, and writes the trajectory, per-pass diagnostics and
/// per-frame timing. Outputs are flushed even when the run fails midway,
/// in which case the failure is returned afterwards.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let imu = match (&cfg.estimator.mode, &cfg.imu) {
        (Mode::Lio, Some(p)) => read_imu_csv(p)?,
        _ => Vec::new(),
    };
    let frames = read_scan_dir(&cfg.scans)?;
    let mut out = run_frames(&cfg.estimator, &imu, &frames)?;

    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    write_tum(&cfg.output.join(TRAJECTORY_FILE), &out.trajectory)?;
    let diag: Vec<_> = out.reports.iter().flat_map(|r| r.passes.iter().map(|p| p.diagnostics())).collect();
    write_diagnostics_csv(&cfg.output.join(DIAGNOSTICS_FILE), &diag)?;
    write_timing(&cfg.output.join(TIMING_FILE), &out.reports)?;
    if cfg.write_map {
        if let Some(est) = &out.estimator {
            est.map().write_csv(&cfg.output.join(MAP_FILE))?;
        }
    }
    match out.failure.take() {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Serialize)]
struct TimingRow {
    t_end: f64,
    n_points: usize,
    passes: usize,
    n_truncated: usize,
    ms: f64,
}

fn write_timing(path: &Path, reports: &[ScanReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in reports {
        let row = TimingRow {
            t_end: r.t_end,
            n_points: r.n_points,
            passes: r.passes.len(),
            n_truncated: r.n_truncated,
            ms: r.elapsed.as_secs_f64() * 1e3,
        };
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_eval(gt: &Path, est: &Path, opts: &EvalOptions) -> Result<ApeStats> {
    ape(&crate::dataset::read_tum(gt)?, &crate::dataset::read_tum(est)?, opts)
}
