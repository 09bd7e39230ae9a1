//! Iterated EKF update in information form.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::state::{symmetrize, HybridState, StateCov, StateVec, STATE_DIM};
use crate::error::{Error, Result};
use crate::spline::SplineTrajectory;

/// One scalar observation row: residual `h(χ̂)` (with `z = 0`), its Jacobian
/// with respect to the error state and its noise variance.
#[derive(Clone, Debug)]
pub struct ObsRow {
    pub residual: f64,
    pub jacobian: StateVec,
    pub variance: f64,
}

/// Stacked observation with a diagonal noise covariance.
#[derive(Clone, Debug, Default)]
pub struct Observation {
    pub rows: Vec<ObsRow>,
}

impl Observation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, residual: f64, jacobian: StateVec, variance: f64) {
        self.rows.push(ObsRow { residual, jacobian, variance });
    }

    pub fn append(&mut self, other: Observation) {
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            r.residual.is_finite() && r.variance.is_finite() && r.variance > 0.0 && r.jacobian.iter().all(|x| x.is_finite())
        })
    }

    /// `(Hᵀ R⁻¹ H, Hᵀ R⁻¹ h)`.
    pub fn normal_equations(&self) -> (StateCov, StateVec) {
        let n = self.rows.len();
        let mut rhs = StateVec::zeros();
        // Whitened Jacobians as columns, so the product is one dense GEMM.
        let mut h = DMatrix::<f64>::zeros(STATE_DIM, n);
        for (c, row) in self.rows.iter().enumerate() {
            let s = row.variance.sqrt().recip();
            h.column_mut(c).copy_from(&(row.jacobian * s));
            rhs += row.jacobian * (row.residual / row.variance);
        }
        let mut info = StateCov::zeros();
        info.copy_from(&(&h * h.transpose()));
        (info, rhs)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IekfConfig {
    pub max_iterations: usize,
    /// Convergence threshold on `‖δχ‖`.
    pub epsilon: f64,
    /// Levenberg damping relative to `trace(S)/n`.
    pub damping: f64,
}

impl Default for IekfConfig {
    fn default() -> Self {
        Self { max_iterations: 5, epsilon: 1e-4, damping: 1e-9 }
    }
}

#[derive(Clone, Debug)]
pub struct IekfOutcome {
    pub state: HybridState,
    pub cov: StateCov,
    pub iterations: usize,
    pub converged: bool,
    /// The update was abandoned and the prior returned.
    pub aborted: bool,
    /// Rows in the final linearization.
    pub rows: usize,
}

fn damped_inverse(m: &StateCov, damping: f64) -> Result<StateCov> {
    let mut m = *m;
    symmetrize(&mut m);
    let scale = (m.trace() / STATE_DIM as f64).abs().max(f64::MIN_POSITIVE);
    let mut lambda = damping * scale;
    for _ in 0..8 {
        let mut d = m;
        for i in 0..STATE_DIM {
            d[(i, i)] += lambda;
        }
        if let Some(ch) = d.cholesky() {
            return Ok(ch.inverse());
        }
        lambda = (lambda * 100.0).max(1e-12 * scale);
    }
    Err(Error::Numerical("normal matrix is not positive definite".into()))
}

/// Iterates
/// `δχ = -K h(χ̂_i) - (I - K H)(χ̂_i ⊟ χ̂_prior)`,
/// `K = (Hᵀ R⁻¹ H + P⁻¹)⁻¹ Hᵀ R⁻¹`,
/// until `‖δχ‖ ≤ ε` or the iteration cap, then sets `P ← (I - K H) P`.
///
/// `traj` has its live increments set to each iterate before `build` is
/// called and to the returned state on exit.
pub fn iekf_update<F>(
    prior: &HybridState,
    prior_cov: &StateCov,
    traj: &mut SplineTrajectory,
    cfg: &IekfConfig,
    mut build: F,
) -> Result<IekfOutcome>
where
    F: FnMut(&HybridState, &SplineTrajectory) -> Result<Observation>,
{
    let abort = |traj: &mut SplineTrajectory| {
        traj.set_increments(prior.increments);
        IekfOutcome { state: *prior, cov: *prior_cov, iterations: 0, converged: false, aborted: true, rows: 0 }
    };

    let prior_info = damped_inverse(prior_cov, cfg.damping)?;
    let mut x = *prior;
    let mut kh = StateCov::zeros();
    let mut iterations = 0;
    let mut converged = false;
    let mut rows = 0;

    while iterations < cfg.max_iterations.max(1) {
        traj.set_increments(x.increments);
        let obs = build(&x, traj)?;
        if !obs.is_finite() {
            return Ok(abort(traj));
        }
        rows = obs.len();
        let (info, rhs) = obs.normal_equations();
        let s_inv = damped_inverse(&(info + prior_info), cfg.damping)?;
        let k_h = s_inv * rhs;
        kh = s_inv * info;
        let dx_prior = x.boxminus(prior)?;
        let delta = -k_h - (StateCov::identity() - kh) * dx_prior;
        if !delta.iter().all(|v| v.is_finite()) {
            return Ok(abort(traj));
        }
        x = x.boxplus(&delta);
        iterations += 1;
        if delta.norm() <= cfg.epsilon {
            converged = true;
            break;
        }
    }

    let mut cov = (StateCov::identity() - kh) * prior_cov;
    symmetrize(&mut cov);
    traj.set_increments(x.increments);
    Ok(IekfOutcome { state: x, cov, iterations, converged, aborted: false, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie_math::{GravityDir, Rot3, Vec3};
    use crate::spline::SegmentIncrements;
    use crate::state_filter::state::layout;

    fn setup() -> (HybridState, StateCov, SplineTrajectory) {
        let incr = SegmentIncrements::uniform(Vec3::new(0.01, 0.0, 0.0), Vec3::new(0.02, 0.0, 0.0));
        let state = HybridState::new(incr, Vec3::zeros(), Vec3::zeros(), GravityDir::up());
        let traj = SplineTrajectory::new(0.0, 0.02, Rot3::identity(), Vec3::zeros(), incr).unwrap();
        let mut cov = StateCov::identity() * 0.04;
        cov[(layout::pos(1), layout::pos(1))] = 0.25;
        (state, cov, traj)
    }

    #[test]
    fn zero_residuals_leave_state_unchanged() {
        let (state, cov, mut traj) = setup();
        let out = iekf_update(&state, &cov, &mut traj, &IekfConfig::default(), |_, _| {
            let mut obs = Observation::new();
            let mut h = StateVec::zeros();
            h[layout::rot(2)] = 1.0;
            obs.push(0.0, h, 0.01);
            Ok(obs)
        })
        .unwrap();
        assert_eq!(out.state.increments, state.increments);
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn scalar_observation_matches_closed_form_kalman() {
        let (state, cov, mut traj) = setup();
        let idx = layout::pos(1);
        let z = 0.3;
        let r = 0.01;
        let out = iekf_update(&state, &cov, &mut traj, &IekfConfig::default(), |x, _| {
            let mut obs = Observation::new();
            let mut h = StateVec::zeros();
            h[idx] = 1.0;
            obs.push(x.increments.pos[1].x - z, h, r);
            Ok(obs)
        })
        .unwrap();
        let p = 0.25;
        let x0 = 0.02;
        let gain = p / (p + r);
        let expected = x0 + gain * (z - x0);
        assert!((out.state.increments.pos[1].x - expected).abs() < 1e-10);
        assert!((out.cov[(idx, idx)] - (1.0 - gain) * p).abs() < 1e-10);
        // Untouched components stay put.
        assert_eq!(out.state.increments.pos[0], state.increments.pos[0]);
        assert_eq!(traj.increments().pos[1].x, out.state.increments.pos[1].x);
    }

    #[test]
    fn linear_problem_converges_in_one_step() {
        let (state, cov, mut traj) = setup();
        let mut h1 = StateVec::zeros();
        h1[layout::rot(0)] = 1.0;
        h1[layout::pos(3) + 2] = -2.0;
        let mut h2 = StateVec::zeros();
        h2[layout::BIAS_ACC] = 1.0;
        h2[layout::rot(1) + 1] = 0.5;
        let z = [0.05, -0.02];
        let cfg = IekfConfig { max_iterations: 1, ..Default::default() };
        let out = iekf_update(&state, &cov, &mut traj, &cfg, |x, _| {
            let v = x.boxminus(&HybridState { increments: SegmentIncrements::zeros(), ..state }).unwrap();
            let mut obs = Observation::new();
            obs.push(h1.dot(&v) - z[0], h1, 0.01);
            obs.push(h2.dot(&v) - z[1], h2, 0.02);
            Ok(obs)
        })
        .unwrap();

        // Standard EKF in covariance form.
        let h = nalgebra::SMatrix::<f64, 2, STATE_DIM>::from_rows(&[h1.transpose(), h2.transpose()]);
        let rm = nalgebra::Matrix2::new(0.01, 0.0, 0.0, 0.02);
        let s = h * cov * h.transpose() + rm;
        let k = cov * h.transpose() * s.try_inverse().unwrap();
        let x0 = state.boxminus(&HybridState { increments: SegmentIncrements::zeros(), ..state }).unwrap();
        let innov = nalgebra::Vector2::new(z[0], z[1]) - h * x0;
        let x1 = x0 + k * innov;
        let p1 = (StateCov::identity() - k * h) * cov;
        let got = out.state.boxminus(&HybridState { increments: SegmentIncrements::zeros(), ..state }).unwrap();
        assert!((got - x1).norm() < 1e-10);
        assert!((out.cov - p1).norm() < 1e-10);
    }

    #[test]
    fn non_finite_residuals_return_prior() {
        let (state, cov, mut traj) = setup();
        let out = iekf_update(&state, &cov, &mut traj, &IekfConfig::default(), |_, _| {
            let mut obs = Observation::new();
            obs.push(f64::NAN, StateVec::zeros(), 1.0);
            Ok(obs)
        })
        .unwrap();
        assert!(out.aborted);
        assert_eq!(out.state, state);
        assert_eq!(out.cov, cov);
    }

    #[test]
    fn rank_deficient_prior_is_damped() {
        let (state, _, mut traj) = setup();
        let mut cov = StateCov::identity() * 1e-2;
        cov[(0, 0)] = 0.0;
        let out = iekf_update(&state, &cov, &mut traj, &IekfConfig::default(), |_, _| Ok(Observation::new()));
        assert!(out.is_ok());
    }
}
