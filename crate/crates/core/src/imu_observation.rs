//! IMU residuals against the spline, historical-state priors and the online
//! fitting-error estimate.

use std::collections::VecDeque;

use nalgebra::{SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie_math::{exp_so3, log_so3, s2_boxminus, s2_boxminus_jacobian, skew, GravityDir, Mat3, Rot3, Vec3};
use crate::spline::{SplineTrajectory, ORDER};
use crate::state_filter::{layout, HybridState, Observation, StateCov, StateVec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Measured angular rate, rad/s.
    pub gyro: Vec3,
    /// Measured specific force, m/s².
    pub acc: Vec3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuConfig {
    /// Gyroscope white-noise std per sample, rad/s.
    pub gyro_noise: f64,
    /// Accelerometer white-noise std per sample, m/s².
    pub acc_noise: f64,
    pub gravity_magnitude: f64,
    /// Use every `stride`-th sample.
    pub stride: usize,
    /// Variance multiplier applied to the stored marginals of historical
    /// bias/gravity estimates.
    pub prior_inflation: f64,
    /// Eigenvalue caps of the fitting-error covariances (rad², m²).
    pub fit_rot_cap: f64,
    pub fit_pos_cap: f64,
}

impl Default for ImuConfig {
    fn default() -> Self {
        Self {
            gyro_noise: 0.005,
            acc_noise: 0.05,
            gravity_magnitude: 9.81,
            stride: 1,
            prior_inflation: 10.0,
            fit_rot_cap: 0.05,
            fit_pos_cap: 0.05,
        }
    }
}

/// Bias/gravity estimate kept from an earlier update, with its marginal
/// covariance ordered `[b_ω, b_a, g]`.
#[derive(Clone, Copy, Debug)]
pub struct StateSnapshot {
    pub t: f64,
    pub bias_gyro: Vec3,
    pub bias_acc: Vec3,
    pub gravity: GravityDir,
    pub cov: SMatrix<f64, 8, 8>,
}

impl StateSnapshot {
    pub fn from_filter(t: f64, state: &HybridState, cov: &StateCov) -> Self {
        Self {
            t,
            bias_gyro: state.bias_gyro,
            bias_acc: state.bias_acc,
            gravity: state.gravity,
            cov: cov.fixed_view::<8, 8>(layout::BIAS_GYRO, layout::BIAS_GYRO).into_owned(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ImuResiduals {
    pub obs: Observation,
    /// Samples turned into rows.
    pub used: usize,
    /// Samples dropped because they fall outside the trajectory span.
    pub skipped: usize,
}

/// Stacks `h_a`, `h_ω` for every `stride`-th sample and one `h_I` block per
/// snapshot. `traj` must carry `state.increments` as its live increments.
pub fn build_imu_residuals(
    traj: &SplineTrajectory,
    state: &HybridState,
    samples: &[ImuSample],
    snapshots: &[StateSnapshot],
    cfg: &ImuConfig,
) -> Result<ImuResiduals> {
    let mut out = ImuResiduals::default();
    let g = state.gravity.scaled(cfg.gravity_magnitude);
    let g_jac = -cfg.gravity_magnitude * skew(state.gravity.dir()) * state.gravity.basis();
    let var_a = cfg.acc_noise.powi(2);
    let var_w = cfg.gyro_noise.powi(2);

    for sample in samples.iter().step_by(cfg.stride.max(1)) {
        let s = match traj.evaluate(sample.t) {
            Ok(s) => s,
            Err(Error::OutOfSpan { .. }) => {
                out.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let rt = s.rot.matrix().transpose();
        let f = rt * (s.acc + g);
        let h_a = f + state.bias_acc - sample.acc;
        let h_w = s.omega + state.bias_gyro - sample.gyro;
        let f_skew = skew(&f);

        for r in 0..3 {
            let mut ja = StateVec::zeros();
            let mut jw = StateVec::zeros();
            for k in 0..ORDER {
                if !s.live[k] {
                    continue;
                }
                let dr = f_skew * s.d_rot[k];
                for c in 0..3 {
                    ja[layout::rot(k) + c] = dr[(r, c)];
                    ja[layout::pos(k) + c] = rt[(r, c)] * s.acc_coef[k];
                    jw[layout::rot(k) + c] = s.d_omega[k][(r, c)];
                }
            }
            ja[layout::BIAS_ACC + r] = 1.0;
            ja[layout::GRAVITY] = (rt * g_jac)[(r, 0)];
            ja[layout::GRAVITY + 1] = (rt * g_jac)[(r, 1)];
            jw[layout::BIAS_GYRO + r] = 1.0;
            out.obs.push(h_a[r], ja, var_a);
            out.obs.push(h_w[r], jw, var_w);
        }
        out.used += 1;
    }

    for snap in snapshots {
        let infl = cfg.prior_inflation.max(f64::MIN_POSITIVE);
        let db_w = state.bias_gyro - snap.bias_gyro;
        let db_a = state.bias_acc - snap.bias_acc;
        for r in 0..3 {
            let mut j = StateVec::zeros();
            j[layout::BIAS_GYRO + r] = 1.0;
            out.obs.push(db_w[r], j, snap.cov[(r, r)].max(1e-12) * infl);
            let mut j = StateVec::zeros();
            j[layout::BIAS_ACC + r] = 1.0;
            out.obs.push(db_a[r], j, snap.cov[(3 + r, 3 + r)].max(1e-12) * infl);
        }
        let dg = s2_boxminus(&state.gravity, &snap.gravity)?;
        let jg = s2_boxminus_jacobian(&state.gravity, &snap.gravity);
        for r in 0..2 {
            let mut j = StateVec::zeros();
            j[layout::GRAVITY] = jg[(r, 0)];
            j[layout::GRAVITY + 1] = jg[(r, 1)];
            out.obs.push(dg[r], j, snap.cov[(6 + r, 6 + r)].max(1e-12) * infl);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefPose {
    pub t: f64,
    pub rot: Rot3,
    pub pos: Vec3,
}

/// Time-sorted reference poses: stored optimal estimates followed by IMU
/// forward-propagated poses.
#[derive(Clone, Debug, Default)]
pub struct ReferencePoseBuffer {
    poses: VecDeque<RefPose>,
}

impl ReferencePoseBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a pose, replacing any stored poses at or after its time.
    pub fn push(&mut self, pose: RefPose) {
        while self.poses.back().is_some_and(|p| p.t >= pose.t) {
            self.poses.pop_back();
        }
        self.poses.push_back(pose);
    }

    pub fn prune_before(&mut self, t: f64) {
        while self.poses.front().is_some_and(|p| p.t < t) {
            self.poses.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RefPose> {
        self.poses.iter()
    }
}

/// Empirical covariances of the spline-versus-reference discrepancy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FittingErrorModel {
    pub rot: Mat3,
    pub pos: Mat3,
}

impl Default for FittingErrorModel {
    fn default() -> Self {
        Self::zero()
    }
}

impl FittingErrorModel {
    pub fn zero() -> Self {
        Self { rot: Mat3::zeros(), pos: Mat3::zeros() }
    }

    /// Isotropic model from fixed variances.
    pub fn fixed(rot_var: f64, pos_var: f64) -> Self {
        Self { rot: Mat3::identity() * rot_var, pos: Mat3::identity() * pos_var }
    }
}

fn cap_psd(m: &Mat3, cap: f64) -> Mat3 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.clamp(0.0, cap));
    eig.eigenvectors * Mat3::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `Σ_R = (1/N) Σ δθ δθᵀ` with `δθ = R̄ ⊟ R(t)`, and the position analogue.
/// Fewer than two usable references keep `previous`.
pub fn estimate_fitting_error<'a>(
    traj: &SplineTrajectory,
    refs: impl IntoIterator<Item = &'a RefPose>,
    previous: &FittingErrorModel,
    cfg: &ImuConfig,
) -> FittingErrorModel {
    let mut rot = Mat3::zeros();
    let mut pos = Mat3::zeros();
    let mut n = 0usize;
    for r in refs {
        let Ok(s) = traj.evaluate(r.t) else { continue };
        let dtheta = log_so3(&(s.rot.inverse() * r.rot));
        let dp = r.pos - s.pos;
        rot += dtheta * dtheta.transpose();
        pos += dp * dp.transpose();
        n += 1;
    }
    if n < 2 {
        return *previous;
    }
    let inv = 1.0 / n as f64;
    FittingErrorModel { rot: cap_psd(&(rot * inv), cfg.fit_rot_cap), pos: cap_psd(&(pos * inv), cfg.fit_pos_cap) }
}

/// Pose and velocity at a time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    pub t: f64,
    pub rot: Rot3,
    pub pos: Vec3,
    pub vel: Vec3,
}

/// `Σ_{n≥0} Kⁿ/(n+2)!` for `K = ⌊φ⌋`, i.e. `∫₀¹ ∫₀ˢ Exp(rφ) dr ds`.
fn gamma2(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-8 {
        return Mat3::identity() * 0.5 + k / 6.0 + k * k / 24.0;
    }
    let theta = theta2.sqrt();
    Mat3::identity() * 0.5
        + k * ((theta - theta.sin()) / (theta2 * theta))
        + k * k * ((theta2 + 2.0 * theta.cos() - 2.0) / (2.0 * theta2 * theta2))
}

/// Advances `state` by `dt` under constant body rate and specific force.
fn propagate_step(state: &NavState, w: &Vec3, f: &Vec3, g: &Vec3, dt: f64) -> NavState {
    let phi = w * dt;
    let r = state.rot.matrix();
    // ∫₀^dt Exp(ωs) ds = dt · J_l(φ).
    let j1 = crate::lie_math::left_jacobian_so3(&phi);
    NavState {
        t: state.t + dt,
        rot: state.rot * exp_so3(&phi),
        vel: state.vel + r * j1 * f * dt - g * dt,
        pos: state.pos + state.vel * dt + r * gamma2(&phi) * f * dt * dt - 0.5 * g * dt * dt,
    }
}

/// Integrates the bias-corrected measurements from `seed` to `t_end`,
/// holding each sample constant until the next one. Returns the state at
/// every sample time in `(seed.t, t_end]` and at `t_end`.
pub fn imu_forward_propagate(
    samples: &[ImuSample],
    seed: NavState,
    t_end: f64,
    bias_gyro: &Vec3,
    bias_acc: &Vec3,
    gravity: &Vec3,
) -> Vec<NavState> {
    let mut out = Vec::new();
    if samples.is_empty() || t_end <= seed.t {
        return out;
    }
    let mut idx = samples.partition_point(|s| s.t <= seed.t).saturating_sub(1);
    let mut cur = seed;
    while cur.t < t_end - 1e-12 {
        let active = &samples[idx];
        let next_t = samples.get(idx + 1).map_or(t_end, |s| s.t.min(t_end));
        let dt = next_t - cur.t;
        if dt > 0.0 {
            cur = propagate_step(&cur, &(active.gyro - bias_gyro), &(active.acc - bias_acc), gravity, dt);
            cur.t = next_t;
            out.push(cur);
        }
        if idx + 1 < samples.len() && samples[idx + 1].t <= next_t {
            idx += 1;
        } else if next_t >= t_end {
            break;
        }
    }
    out
}

/// Gravity direction from the mean specific force and gyro bias from the
/// mean angular rate over a window assumed static.
pub fn static_initialize(samples: &[ImuSample]) -> Result<(GravityDir, Vec3)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("static initialization needs IMU samples".into()));
    }
    let n = samples.len() as f64;
    let acc: Vec3 = samples.iter().map(|s| s.acc).sum::<Vec3>() / n;
    let gyro: Vec3 = samples.iter().map(|s| s.gyro).sum::<Vec3>() / n;
    Ok((GravityDir::new(acc)?, gyro))
}
