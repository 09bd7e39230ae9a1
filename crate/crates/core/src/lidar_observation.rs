//! Point-to-plane and point-to-voxel residuals with propagated noise and
//! 3σ gating.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu_observation::FittingErrorModel;
use crate::lie_math::{skew, Mat3, Vec3};
use crate::spline::{SplineSample, SplineTrajectory, ORDER};
use crate::state_filter::{layout, ObsRow, Observation, StateVec};
use crate::voxel_map::{Extrinsics, Feature, FeatureClass, VoxelMap};

/// LiDAR return in the sensor frame with its own timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPoint {
    pub t: f64,
    pub p: Vec3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    /// Range noise std, m.
    pub range_std: f64,
    /// Bearing noise std, degrees.
    pub bearing_std_deg: f64,
    /// Isotropic variance of the feature mean, m².
    pub mean_variance: f64,
    /// Floor on voxel-feature eigenvalues; `None` uses `(0.1 σ_r)²`.
    pub lambda_floor: Option<f64>,
    /// Gate width in standard deviations.
    pub gate_sigma: f64,
    /// Cap on rows per pass; 0 disables the cap.
    pub max_rows: usize,
    pub use_voxel_features: bool,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            range_std: 0.02,
            bearing_std_deg: 0.05,
            mean_variance: 0.0,
            lambda_floor: None,
            gate_sigma: 3.0,
            max_rows: 4000,
            use_voxel_features: true,
        }
    }
}

impl LidarConfig {
    pub fn lambda_floor(&self) -> f64 {
        self.lambda_floor.unwrap_or((0.1 * self.range_std).powi(2))
    }

    /// Range noise along the beam, bearing noise across it.
    pub fn point_covariance(&self, p: &Vec3) -> Mat3 {
        let r = p.norm();
        let var_r = self.range_std.powi(2);
        if r < 1e-9 {
            return Mat3::identity() * var_r;
        }
        let b = p / r;
        let bb = b * b.transpose();
        let var_t = (r * self.bearing_std_deg.to_radians()).powi(2);
        bb * var_r + (Mat3::identity() - bb) * var_t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    /// Outside the 3σ neighbourhood.
    Gated,
    /// Feature unusable (e.g. wrong class).
    Unsupported,
}

/// World point and the rotation terms of its derivatives.
struct Projection {
    p_w: Vec3,
    /// `R ⌊s⌋`.
    r_skew: Mat3,
    /// `R R_IL`.
    r_l: Mat3,
}

fn project(sample: &SplineSample, p_l: &Vec3, ext: &Extrinsics) -> Projection {
    let s = ext.apply(p_l);
    let r = sample.rot.matrix();
    Projection { p_w: sample.rot * s + sample.pos, r_skew: r * skew(&s), r_l: r * ext.rot.matrix() }
}

/// Row `a = ∂(vᵀ p_w)/∂χ` for a fixed direction `v`.
fn direction_jacobian(v: &Vec3, proj: &Projection, sample: &SplineSample) -> StateVec {
    let mut h = StateVec::zeros();
    let jr = -(v.transpose() * proj.r_skew);
    for k in 0..ORDER {
        if !sample.live[k] {
            continue;
        }
        let dr = jr * sample.d_rot[k];
        for c in 0..3 {
            h[layout::rot(k) + c] = dr[c];
            h[layout::pos(k) + c] = v[c] * sample.pos_coef[k];
        }
    }
    h
}

/// Variance of `u_kᵀ (p_w − q)` from the feature, mean, sensor and
/// fitting-error uncertainties.
fn projected_variance(
    feature: &Feature,
    k: usize,
    proj: &Projection,
    cov_l: &Mat3,
    fit: &FittingErrorModel,
    mean_variance: f64,
) -> f64 {
    let u = feature.u(k);
    let d = proj.p_w - feature.mean;
    let j_lp = u.transpose() * proj.r_l;
    let j_r = -(u.transpose() * proj.r_skew);
    let v = d.dot(&(feature.cov_u(k) * d))
        + mean_variance * u.norm_squared()
        + (j_lp * cov_l * j_lp.transpose())[0]
        + (j_r * fit.rot * j_r.transpose())[0]
        + u.dot(&(fit.pos * u));
    v.max(0.0)
}

/// `u₁ᵀ (p_w − q)` against a plane feature.
pub fn point_to_plane_residual(
    p_l: &Vec3,
    cov_l: &Mat3,
    feature: &Feature,
    sample: &SplineSample,
    ext: &Extrinsics,
    fit: &FittingErrorModel,
    cfg: &LidarConfig,
) -> std::result::Result<ObsRow, Rejection> {
    let proj = project(sample, p_l, ext);
    let u = feature.normal();
    let residual = u.dot(&(proj.p_w - feature.mean));
    let variance = projected_variance(feature, 0, &proj, cov_l, fit, cfg.mean_variance).max(1e-12);
    if residual.abs() > cfg.gate_sigma * variance.sqrt() {
        return Err(Rejection::Gated);
    }
    Ok(ObsRow { residual, jacobian: direction_jacobian(&u, &proj, sample), variance })
}

/// `k_i u_iᵀ (p_w − q)` for `i = 1..3`, `k_i = max(λ_i, λ_floor)^{-1/2}`.
///
/// Each row's variance includes the feature's own spread `λ_i` along `u_i`,
/// so a point drawn from the voxel distribution has unit-scale rows. All
/// three rows must pass the gate.
pub fn point_to_voxel_residual(
    p_l: &Vec3,
    cov_l: &Mat3,
    feature: &Feature,
    sample: &SplineSample,
    ext: &Extrinsics,
    fit: &FittingErrorModel,
    cfg: &LidarConfig,
) -> std::result::Result<[ObsRow; 3], Rejection> {
    let proj = project(sample, p_l, ext);
    let floor = cfg.lambda_floor();
    let rows: [ObsRow; 3] = std::array::from_fn(|i| {
        let u = feature.u(i);
        let lam = feature.eigenvalues[i].max(floor);
        let w = 1.0 / lam.sqrt();
        let meas = projected_variance(feature, i, &proj, cov_l, fit, cfg.mean_variance);
        ObsRow {
            residual: w * u.dot(&(proj.p_w - feature.mean)),
            jacobian: direction_jacobian(&u, &proj, sample) * w,
            variance: w * w * (lam + meas),
        }
    });
    if rows.iter().any(|r| r.residual.abs() > cfg.gate_sigma * r.variance.sqrt()) {
        return Err(Rejection::Gated);
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default)]
pub struct ScanResiduals {
    pub obs: Observation,
    pub n_total: usize,
    pub n_plane: usize,
    pub n_voxel: usize,
    pub n_gated: usize,
    /// No classified feature at the projected location.
    pub n_unmatched: usize,
    pub n_out_of_span: usize,
    /// Accepted points dropped by the row cap.
    pub n_capped: usize,
    /// Outcome of every input point.
    pub status: Vec<PointStatus>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointStatus {
    /// Produced residual rows (possibly dropped later by the row cap).
    Accepted,
    Gated,
    /// No usable feature at the projected location.
    Unmatched,
    OutOfSpan,
    /// Never matched: truncated by the pass limit, stale, or used to seed
    /// the map.
    Unused,
}

enum Block {
    Plane(ObsRow),
    Voxel([ObsRow; 3]),
}

/// Matches every point against the map at the current trajectory estimate.
pub fn build_scan_residuals(
    points: &[TimedPoint],
    map: &VoxelMap,
    traj: &SplineTrajectory,
    fit: &FittingErrorModel,
    ext: &Extrinsics,
    cfg: &LidarConfig,
) -> ScanResiduals {
    let mut out = ScanResiduals { n_total: points.len(), status: vec![PointStatus::Unmatched; points.len()], ..Default::default() };
    let mut blocks = Vec::new();
    let mut cached: Option<SplineSample> = None;
    for (idx, pt) in points.iter().enumerate() {
        if cached.as_ref().is_none_or(|s| s.t != pt.t) {
            cached = traj.evaluate(pt.t).ok();
        }
        let Some(sample) = cached.as_ref().filter(|s| s.t == pt.t) else {
            out.n_out_of_span += 1;
            out.status[idx] = PointStatus::OutOfSpan;
            continue;
        };
        let p_w = sample.rot * ext.apply(&pt.p) + sample.pos;
        let Some(node) = map.query(&p_w) else {
            out.n_unmatched += 1;
            continue;
        };
        let Some(feature) = node.feature() else {
            out.n_unmatched += 1;
            continue;
        };
        let cov_l = cfg.point_covariance(&pt.p);
        let block = match node.class() {
            FeatureClass::Plane => point_to_plane_residual(&pt.p, &cov_l, feature, sample, ext, fit, cfg).map(Block::Plane),
            FeatureClass::Voxel if cfg.use_voxel_features => {
                point_to_voxel_residual(&pt.p, &cov_l, feature, sample, ext, fit, cfg).map(Block::Voxel)
            }
            _ => Err(Rejection::Unsupported),
        };
        match block {
            Ok(b) => {
                out.status[idx] = PointStatus::Accepted;
                blocks.push(b);
            }
            Err(Rejection::Gated) => {
                out.n_gated += 1;
                out.status[idx] = PointStatus::Gated;
            }
            Err(Rejection::Unsupported) => out.n_unmatched += 1,
        }
    }

    let total_rows: usize = blocks.iter().map(|b| if matches!(b, Block::Plane(_)) { 1 } else { 3 }).sum();
    let keep: Vec<usize> = if cfg.max_rows > 0 && total_rows > cfg.max_rows {
        let n = blocks.len();
        let k = (n * cfg.max_rows / total_rows).max(1);
        (0..k).map(|j| j * n / k).collect()
    } else {
        (0..blocks.len()).collect()
    };
    out.n_capped = blocks.len() - keep.len();
    for i in keep {
        match &blocks[i] {
            Block::Plane(r) => {
                out.n_plane += 1;
                out.obs.rows.push(r.clone());
            }
            Block::Voxel(rs) => {
                out.n_voxel += 1;
                out.obs.rows.extend(rs.iter().cloned());
            }
        }
    }
    out
}

/// One record of the per-pass residual statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassDiagnostics {
    pub pass_index: usize,
    pub n_total: usize,
    pub n_plane: usize,
    pub n_voxel: usize,
    pub n_gated: usize,
}

pub fn write_diagnostics_csv(path: &Path, records: &[PassDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
