//! Scan driver: one prediction per interval, then sample–estimate–resample
//! passes over the interval's points, each followed by a map update.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::iekf::{iekf_update, IekfConfig, Observation};
use super::state::{layout, Filter, HybridState, InitialUncertainty, ProcessNoise, StateCov};
use crate::error::{Error, Result};
use crate::imu_observation::{
    build_imu_residuals, estimate_fitting_error, imu_forward_propagate, static_initialize, FittingErrorModel, ImuConfig,
    ImuSample, NavState, RefPose, ReferencePoseBuffer, StateSnapshot,
};
use crate::lidar_observation::{build_scan_residuals, LidarConfig, PassDiagnostics, PointStatus, TimedPoint};
use crate::lie_math::{GravityDir, Mat3, Rot3, Vec3};
use crate::spline::{SegmentIncrements, SplineSample, SplineTrajectory, ORDER};
use crate::voxel_map::{project_point_uncertainty, Extrinsics, MapConfig, TimedPointWorld, UncertainPose, VoxelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// LiDAR with IMU residuals and online fitting error.
    Lio,
    /// LiDAR only, fixed fitting-error hyperparameters.
    Lo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitErrorMode {
    /// Estimated from IMU forward propagation and stored poses.
    Online,
    /// `fixed_fit_rot_var`, `fixed_fit_pos_var`.
    Fixed,
    /// Ignored.
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ReEstimationConfig {
    /// Prediction interval in seconds; 0 means one knot interval.
    pub delta_t: f64,
    /// Points per estimation pass.
    pub n_thre: usize,
    /// Passes per prediction interval.
    pub k_max: usize,
}

impl Default for ReEstimationConfig {
    fn default() -> Self {
        Self { delta_t: 0.0, n_thre: 1000, k_max: 5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub mode: Mode,
    pub knot_frequency_hz: f64,
    pub reestimation: ReEstimationConfig,
    pub iekf: IekfConfig,
    pub process_noise: ProcessNoise,
    pub initial: InitialUncertainty,
    pub imu: ImuConfig,
    pub lidar: LidarConfig,
    pub map: MapConfig,
    pub fitting_error: FitErrorMode,
    /// Isotropic fitting-error variances used when the model is fixed, and
    /// as the starting model otherwise (rad², m²).
    pub fixed_fit_rot_var: f64,
    pub fixed_fit_pos_var: f64,
    /// Length of the initial window assumed static, s.
    pub static_init_duration: f64,
    pub extrinsic_rpy_deg: [f64; 3],
    pub extrinsic_trans: [f64; 3],
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lio,
            knot_frequency_hz: 50.0,
            reestimation: ReEstimationConfig::default(),
            iekf: IekfConfig::default(),
            process_noise: ProcessNoise::default(),
            initial: InitialUncertainty::default(),
            imu: ImuConfig::default(),
            lidar: LidarConfig::default(),
            map: MapConfig::default(),
            fitting_error: FitErrorMode::Online,
            fixed_fit_rot_var: 1e-5,
            fixed_fit_pos_var: 1e-5,
            static_init_duration: 0.5,
            extrinsic_rpy_deg: [0.0; 3],
            extrinsic_trans: [0.0; 3],
        }
    }
}

impl EstimatorConfig {
    /// LiDAR-only settings: fixed fitting error and no IMU.
    pub fn lo() -> Self {
        Self { mode: Mode::Lo, fitting_error: FitErrorMode::Fixed, ..Self::default() }
    }

    pub fn knot_interval(&self) -> f64 {
        1.0 / self.knot_frequency_hz
    }

    pub fn delta_t(&self) -> f64 {
        if self.reestimation.delta_t > 0.0 {
            self.reestimation.delta_t
        } else {
            self.knot_interval()
        }
    }

    pub fn extrinsics(&self) -> Extrinsics {
        Extrinsics::from_rpy_deg(self.extrinsic_rpy_deg, self.extrinsic_trans)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.knot_frequency_hz > 0.0 && self.knot_frequency_hz.is_finite()) {
            return bad("knot_frequency_hz must be positive");
        }
        if self.reestimation.delta_t < 0.0 || self.reestimation.k_max == 0 || self.reestimation.n_thre == 0 {
            return bad("reestimation: delta_t >= 0, k_max >= 1 and n_thre >= 1 required");
        }
        if !(self.iekf.epsilon > 0.0) {
            return bad("iekf.epsilon must be positive");
        }
        if self.mode == Mode::Lo && self.fitting_error == FitErrorMode::Online {
            return bad("LO mode needs a fixed fitting-error model (no IMU to estimate it)");
        }
        if self.fixed_fit_rot_var < 0.0 || self.fixed_fit_pos_var < 0.0 {
            return bad("fitting-error variances must be non-negative");
        }
        self.map.validate()
    }

    fn initial_fit(&self) -> FittingErrorModel {
        match self.fitting_error {
            FitErrorMode::Zero => FittingErrorModel::zero(),
            _ => FittingErrorModel::fixed(self.fixed_fit_rot_var, self.fixed_fit_pos_var),
        }
    }
}

/// Splits `n` points into at most `k_max` passes of at most `n_thre`
/// points each by evenly strided sampling of what is left. Returns the
/// index sets and the indices never used.
pub fn plan_passes(n: usize, n_thre: usize, k_max: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut passes = Vec::new();
    while !remaining.is_empty() && passes.len() < k_max {
        if remaining.len() <= n_thre {
            passes.push(std::mem::take(&mut remaining));
            break;
        }
        let r = remaining.len();
        let mut take = vec![false; r];
        for j in 0..n_thre {
            take[j * r / n_thre] = true;
        }
        let (picked, rest): (Vec<_>, Vec<_>) = remaining.iter().zip(&take).partition(|(_, t)| **t);
        passes.push(picked.into_iter().map(|(i, _)| *i).collect());
        remaining = rest.into_iter().map(|(i, _)| *i).collect();
    }
    (passes, remaining)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PassReport {
    /// End of the prediction interval the pass belongs to.
    pub t: f64,
    pub pass_index: usize,
    pub n_points: usize,
    pub n_plane: usize,
    pub n_voxel: usize,
    pub n_gated: usize,
    pub n_unmatched: usize,
    pub imu_rows: usize,
    pub iterations: usize,
    pub converged: bool,
    /// The update failed and the predicted state was kept.
    pub aborted: bool,
}

impl PassReport {
    pub fn diagnostics(&self) -> PassDiagnostics {
        PassDiagnostics {
            pass_index: self.pass_index,
            n_total: self.n_points,
            n_plane: self.n_plane,
            n_voxel: self.n_voxel,
            n_gated: self.n_gated,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScanReport {
    pub t_end: f64,
    pub n_points: usize,
    /// Points older than the filter time, dropped.
    pub n_stale: usize,
    /// Points left over after `k_max` passes.
    pub n_truncated: usize,
    pub intervals: usize,
    pub passes: Vec<PassReport>,
    /// Final matching outcome of each input point.
    pub status: Vec<PointStatus>,
    /// Estimation time, excluding I/O.
    pub elapsed: Duration,
}

impl ScanReport {
    pub fn max_passes_per_interval(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        for p in &self.passes {
            run = if p.pass_index == 0 { 1 } else { run + 1 };
            best = best.max(run);
        }
        best
    }
}

const TIME_TOL: f64 = 1e-9;

pub struct Estimator {
    cfg: EstimatorConfig,
    ext: Extrinsics,
    filter: Filter,
    map: VoxelMap,
    fit: FittingErrorModel,
    refs: ReferencePoseBuffer,
    snapshots: VecDeque<StateSnapshot>,
    imu: Vec<ImuSample>,
    start_time: f64,
}

impl Estimator {
    /// Starts at `start_time` with the body frame as world frame. In LIO mode
    /// gravity and gyro bias come from `static_imu`, assumed motionless.
    pub fn new(cfg: EstimatorConfig, start_time: f64, static_imu: &[ImuSample]) -> Result<Self> {
        cfg.validate()?;
        let (gravity, bias_gyro) = match cfg.mode {
            Mode::Lio if !static_imu.is_empty() => static_initialize(static_imu)?,
            _ => (GravityDir::up(), Vec3::zeros()),
        };
        let incr = SegmentIncrements::zeros();
        let traj = SplineTrajectory::new(start_time, cfg.knot_interval(), Rot3::identity(), Vec3::zeros(), incr)?;
        let state = HybridState::new(incr, bias_gyro, Vec3::zeros(), gravity);
        let filter = Filter::new(state, cfg.initial.covariance(), traj, start_time, cfg.process_noise.clone());
        Ok(Self {
            ext: cfg.extrinsics(),
            map: VoxelMap::new(cfg.map.clone())?,
            fit: cfg.initial_fit(),
            refs: ReferencePoseBuffer::new(),
            snapshots: VecDeque::new(),
            imu: Vec::new(),
            filter,
            start_time,
            cfg,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn state(&self) -> &HybridState {
        &self.filter.state
    }

    pub fn covariance(&self) -> &StateCov {
        &self.filter.cov
    }

    pub fn trajectory(&self) -> &SplineTrajectory {
        &self.filter.traj
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn fitting_error(&self) -> &FittingErrorModel {
        &self.fit
    }

    /// Time the filter has been propagated to.
    pub fn time(&self) -> f64 {
        self.filter.time
    }

    pub fn pose_at(&self, t: f64) -> Result<(Rot3, Vec3)> {
        let s = self.filter.traj.evaluate(t)?;
        Ok((s.rot, s.pos))
    }

    /// Buffers IMU samples newer than the last one held.
    pub fn push_imu(&mut self, samples: &[ImuSample]) {
        let last = self.imu.last().map_or(f64::NEG_INFINITY, |s| s.t);
        self.imu.extend(samples.iter().filter(|s| s.t > last));
    }

    /// Processes time-sorted sensor-frame points up to `scan_end`. IMU
    /// samples up to `scan_end` must have been pushed.
    pub fn run_scan(&mut self, points: &[TimedPoint], scan_end: f64) -> Result<ScanReport> {
        let clock = Instant::now();
        let mut report =
            ScanReport { n_points: points.len(), status: vec![PointStatus::Unused; points.len()], ..Default::default() };
        let scan_end = points.last().map_or(scan_end, |p| p.t.max(scan_end));
        let mut cursor = points.partition_point(|p| p.t < self.filter.time - TIME_TOL);
        report.n_stale = cursor;
        let seed = self.map.is_empty() && (self.filter.time - self.start_time).abs() < TIME_TOL;
        if seed {
            self.seed_map(&points[cursor..]);
            cursor = points.len();
        }

        while self.filter.time < scan_end - TIME_TOL {
            let start = self.filter.time;
            let mut end = (start + self.cfg.delta_t()).min(scan_end);
            if scan_end - end < TIME_TOL {
                end = scan_end;
            }
            let stop = cursor + points[cursor..].partition_point(|p| p.t <= end + TIME_TOL);
            let (passes, truncated) = self.run_interval(start, end, &points[cursor..stop], &mut report.status[cursor..stop])?;
            cursor = stop;
            report.passes.extend(passes);
            report.n_truncated += truncated;
            report.intervals += 1;
        }
        if !seed {
            report.n_stale += points.len() - cursor;
        }
        report.t_end = self.filter.time;
        report.elapsed = clock.elapsed();
        Ok(report)
    }

    fn imu_range(&self, from: f64, to: f64, include_from: bool) -> &[ImuSample] {
        let lo = if include_from {
            self.imu.partition_point(|s| s.t < from - TIME_TOL)
        } else {
            self.imu.partition_point(|s| s.t <= from + TIME_TOL)
        };
        let hi = self.imu.partition_point(|s| s.t <= to + TIME_TOL);
        &self.imu[lo..hi.max(lo)]
    }

    fn run_interval(
        &mut self,
        start: f64,
        end: f64,
        points: &[TimedPoint],
        status: &mut [PointStatus],
    ) -> Result<(Vec<PassReport>, usize)> {
        let lio = self.cfg.mode == Mode::Lio;
        let first = (start - self.start_time).abs() < TIME_TOL;
        self.filter.predict(end)?;
        let affected = self.filter.traj.affected_start();

        if lio && self.cfg.fitting_error == FitErrorMode::Online {
            let seed_sample = self.filter.traj.evaluate(start)?;
            let seed = NavState { t: start, rot: seed_sample.rot, pos: seed_sample.pos, vel: seed_sample.vel };
            let st = &self.filter.state;
            let g = st.gravity.scaled(self.cfg.imu.gravity_magnitude);
            let from = self.imu.partition_point(|s| s.t <= start + TIME_TOL).saturating_sub(1);
            for nav in imu_forward_propagate(&self.imu[from..], seed, end, &st.bias_gyro, &st.bias_acc, &g) {
                self.refs.push(RefPose { t: nav.t, rot: nav.rot, pos: nav.pos });
            }
            self.refs.prune_before(affected);
        }
        while self.snapshots.front().is_some_and(|s| s.t < affected) {
            self.snapshots.pop_front();
        }

        let (plan, truncated) = plan_passes(points.len(), self.cfg.reestimation.n_thre, self.cfg.reestimation.k_max);
        let mut reports = Vec::with_capacity(plan.len().max(1));
        let passes: Vec<Vec<usize>> = if plan.is_empty() { vec![Vec::new()] } else { plan };
        for (k, idx) in passes.iter().enumerate() {
            let batch: Vec<TimedPoint> = idx.iter().map(|&i| points[i]).collect();
            let imu: Vec<ImuSample> = if lio && k == 0 { self.imu_range(start, end, first).to_vec() } else { Vec::new() };
            let snaps: Vec<StateSnapshot> = if lio && k == 0 { self.snapshots.iter().copied().collect() } else { Vec::new() };
            let (mut r, st) = self.estimate_pass(&batch, &imu, &snaps)?;
            for (&i, s) in idx.iter().zip(st) {
                status[i] = s;
            }
            r.t = end;
            r.pass_index = k;
            reports.push(r);
        }

        if lio {
            let times: Vec<f64> = self.imu_range(start, end, first).iter().map(|s| s.t).collect();
            for t in times {
                let s = self.filter.traj.evaluate(t)?;
                self.refs.push(RefPose { t, rot: s.rot, pos: s.pos });
            }
            self.snapshots.push_back(StateSnapshot::from_filter(end, &self.filter.state, &self.filter.cov));
            let keep_from = self.filter.traj.affected_start() - self.cfg.knot_interval();
            let drop = self.imu.partition_point(|s| s.t < keep_from);
            self.imu.drain(..drop.saturating_sub(1));
        }
        Ok((reports, truncated.len()))
    }

    fn estimate_pass(
        &mut self,
        points: &[TimedPoint],
        imu: &[ImuSample],
        snaps: &[StateSnapshot],
    ) -> Result<(PassReport, Vec<PointStatus>)> {
        let mut report = PassReport { n_points: points.len(), ..Default::default() };
        if points.is_empty() && imu.is_empty() && snaps.is_empty() {
            return Ok((report, Vec::new()));
        }
        let prior = self.filter.state;
        let prior_cov = self.filter.cov;
        let online = self.cfg.fitting_error == FitErrorMode::Online;
        let mut fit = self.fit;
        let mut status = vec![PointStatus::Unmatched; points.len()];

        let (map, refs, cfg, ext) = (&self.map, &self.refs, &self.cfg, &self.ext);
        let outcome = iekf_update(&prior, &prior_cov, &mut self.filter.traj, &cfg.iekf, |state, traj| {
            let mut obs = Observation::new();
            if !imu.is_empty() || !snaps.is_empty() {
                let r = build_imu_residuals(traj, state, imu, snaps, &cfg.imu)?;
                report.imu_rows = r.obs.len();
                obs.append(r.obs);
            }
            if online {
                fit = estimate_fitting_error(traj, refs.iter(), &fit, &cfg.imu);
            }
            if !map.is_empty() && !points.is_empty() {
                let s = build_scan_residuals(points, map, traj, &fit, ext, &cfg.lidar);
                report.n_plane = s.n_plane;
                report.n_voxel = s.n_voxel;
                report.n_gated = s.n_gated;
                report.n_unmatched = s.n_unmatched + s.n_out_of_span;
                status = s.status;
                obs.append(s.obs);
            } else {
                report.n_unmatched = points.len();
            }
            Ok(obs)
        });

        match outcome {
            Ok(out) if !out.aborted => {
                if !out.state.is_finite() {
                    return Err(Error::Numerical(format!("state became non-finite at t={}", self.filter.time)));
                }
                self.filter.state = out.state;
                self.filter.cov = out.cov;
                report.iterations = out.iterations;
                report.converged = out.converged;
            }
            Ok(_) | Err(Error::Numerical(_)) => {
                self.filter.set_state(prior);
                self.filter.cov = prior_cov;
                report.aborted = true;
            }
            Err(e) => return Err(e),
        }
        if online {
            fit = estimate_fitting_error(&self.filter.traj, self.refs.iter(), &fit, &self.cfg.imu);
        }
        self.fit = fit;

        let keep: Vec<bool> = status.iter().map(|s| *s != PointStatus::Gated).collect();
        let world = self.project(points, &keep);
        self.map.insert_points(&world);
        Ok((report, status))
    }

    /// Builds the first map from the first scan at the start pose; the
    /// platform is assumed still while that scan is taken.
    fn seed_map(&mut self, points: &[TimedPoint]) {
        let pose = UncertainPose {
            rot: Rot3::identity(),
            pos: Vec3::zeros(),
            cov_rot: self.fit.rot,
            cov_pos: self.fit.pos,
        };
        let world: Vec<_> = points
            .iter()
            .map(|pt| project_point_uncertainty(pt.t, &pt.p, &self.cfg.lidar.point_covariance(&pt.p), &pose, &self.ext))
            .collect();
        self.map.insert_points(&world);
    }

    /// World points with covariance from the point model, the pose
    /// covariance `J P Jᵀ` and the fitting error.
    fn project(&self, points: &[TimedPoint], keep: &[bool]) -> Vec<TimedPointWorld> {
        let mut out = Vec::with_capacity(points.len());
        let mut cached: Option<(SplineSample, UncertainPose)> = None;
        for (pt, _) in points.iter().zip(keep).filter(|(_, k)| **k) {
            if cached.as_ref().is_none_or(|(s, _)| s.t != pt.t) {
                cached = self.filter.traj.evaluate(pt.t).ok().map(|s| {
                    let pose = self.uncertain_pose(&s);
                    (s, pose)
                });
            }
            let Some((_, pose)) = cached.as_ref().filter(|(s, _)| s.t == pt.t) else { continue };
            let cov_l = self.cfg.lidar.point_covariance(&pt.p);
            out.push(project_point_uncertainty(pt.t, &pt.p, &cov_l, pose, &self.ext));
        }
        out
    }

    fn uncertain_pose(&self, s: &SplineSample) -> UncertainPose {
        let p = &self.filter.cov;
        let mut cov_rot = self.fit.rot;
        let mut cov_pos = self.fit.pos;
        for k in (0..ORDER).filter(|&k| s.live[k]) {
            for l in (0..ORDER).filter(|&l| s.live[l]) {
                let prr: Mat3 = p.fixed_view::<3, 3>(layout::rot(k), layout::rot(l)).into_owned();
                cov_rot += s.d_rot[k] * prr * s.d_rot[l].transpose();
                let ppp: Mat3 = p.fixed_view::<3, 3>(layout::pos(k), layout::pos(l)).into_owned();
                cov_pos += ppp * (s.pos_coef[k] * s.pos_coef[l]);
            }
        }
        UncertainPose { rot: s.rot, pos: s.pos, cov_rot, cov_pos }
    }
}
