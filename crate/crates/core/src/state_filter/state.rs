//! Hybrid state `χ = [χ_Cr, χ_Cp, b_ω, b_a, g]` and its jump/flow prediction.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie_math::{s2_boxminus, s2_boxplus, GravityDir, Vec2, Vec3};
use crate::spline::{SegmentIncrements, SplineTrajectory, ORDER};

/// Error-state dimension: 4·3 + 4·3 + 3 + 3 + 2.
pub const STATE_DIM: usize = 32;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateCov = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Offsets of each block inside the error state.
pub mod layout {
    use super::ORDER;

    pub const ROT: usize = 0;
    pub const POS: usize = 3 * ORDER;
    pub const BIAS_GYRO: usize = 6 * ORDER;
    pub const BIAS_ACC: usize = BIAS_GYRO + 3;
    pub const GRAVITY: usize = BIAS_ACC + 3;
    /// Number of spline columns (rotation + position increments).
    pub const SPLINE: usize = POS + 3 * ORDER;

    pub const fn rot(slot: usize) -> usize {
        ROT + 3 * slot
    }

    pub const fn pos(slot: usize) -> usize {
        POS + 3 * slot
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridState {
    pub increments: SegmentIncrements,
    pub bias_gyro: Vec3,
    pub bias_acc: Vec3,
    pub gravity: GravityDir,
}

impl HybridState {
    pub fn new(increments: SegmentIncrements, bias_gyro: Vec3, bias_acc: Vec3, gravity: GravityDir) -> Self {
        Self { increments, bias_gyro, bias_acc, gravity }
    }

    /// Additive on increments and biases, `⊞` on the gravity sphere.
    pub fn boxplus(&self, delta: &StateVec) -> Self {
        let mut out = *self;
        for k in 0..ORDER {
            out.increments.rot[k] += delta.fixed_rows::<3>(layout::rot(k));
            out.increments.pos[k] += delta.fixed_rows::<3>(layout::pos(k));
        }
        out.bias_gyro += delta.fixed_rows::<3>(layout::BIAS_GYRO);
        out.bias_acc += delta.fixed_rows::<3>(layout::BIAS_ACC);
        out.gravity = s2_boxplus(&self.gravity, &Vec2::from(delta.fixed_rows::<2>(layout::GRAVITY)));
        out
    }

    /// `self ⊟ other`, expressed in the tangent chart of `other`.
    pub fn boxminus(&self, other: &Self) -> Result<StateVec> {
        let mut v = StateVec::zeros();
        for k in 0..ORDER {
            v.fixed_rows_mut::<3>(layout::rot(k)).copy_from(&(self.increments.rot[k] - other.increments.rot[k]));
            v.fixed_rows_mut::<3>(layout::pos(k)).copy_from(&(self.increments.pos[k] - other.increments.pos[k]));
        }
        v.fixed_rows_mut::<3>(layout::BIAS_GYRO).copy_from(&(self.bias_gyro - other.bias_gyro));
        v.fixed_rows_mut::<3>(layout::BIAS_ACC).copy_from(&(self.bias_acc - other.bias_acc));
        v.fixed_rows_mut::<2>(layout::GRAVITY).copy_from(&s2_boxminus(&self.gravity, &other.gravity)?);
        Ok(v)
    }

    pub fn is_finite(&self) -> bool {
        let incr = self.increments.rot.iter().chain(self.increments.pos.iter()).all(|v| v.iter().all(|x| x.is_finite()));
        incr && self.bias_gyro.iter().chain(self.bias_acc.iter()).all(|x| x.is_finite())
            && self.gravity.dir().iter().all(|x| x.is_finite())
    }
}

/// Jump-phase transition `A = diag(A_r, A_p, I₃, I₃, I₂)` applied when a knot
/// is added: `d'_j ← d_{j+1}` for `j < 3` and `d'_3 ← d_2`.
pub fn transition_matrix() -> StateCov {
    let mut a = StateCov::zeros();
    for base in [layout::ROT, layout::POS] {
        for j in 0..ORDER {
            let src = if j + 1 < ORDER { j + 1 } else { ORDER - 2 };
            for r in 0..3 {
                a[(base + 3 * j + r, base + 3 * src + r)] = 1.0;
            }
        }
    }
    for i in layout::SPLINE..STATE_DIM {
        a[(i, i)] = 1.0;
    }
    a
}

/// Applies the jump to the increments (biases and gravity are copied).
pub fn jump_state(state: &HybridState) -> HybridState {
    let d = state.increments;
    HybridState {
        increments: SegmentIncrements {
            rot: [d.rot[1], d.rot[2], d.rot[3], d.rot[2]],
            pos: [d.pos[1], d.pos[2], d.pos[3], d.pos[2]],
        },
        ..*state
    }
}

/// Process noise, given as standard deviations accumulated over one knot
/// interval (flow) or injected once per added knot (jump). Position flow
/// also moves the whole live window, so it is kept small: wherever the map
/// leaves a direction unconstrained, it becomes free drift.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessNoise {
    pub flow_rot_incr: f64,
    pub flow_pos_incr: f64,
    pub flow_bias_gyro: f64,
    pub flow_bias_acc: f64,
    pub flow_gravity: f64,
    pub jump_rot_incr: f64,
    pub jump_pos_incr: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            flow_rot_incr: 0.01,
            flow_pos_incr: 0.001,
            flow_bias_gyro: 1e-5,
            flow_bias_acc: 1e-4,
            flow_gravity: 1e-6,
            jump_rot_incr: 0.01,
            jump_pos_incr: 0.01,
        }
    }
}

impl ProcessNoise {
    pub fn zero() -> Self {
        Self {
            flow_rot_incr: 0.0,
            flow_pos_incr: 0.0,
            flow_bias_gyro: 0.0,
            flow_bias_acc: 0.0,
            flow_gravity: 0.0,
            jump_rot_incr: 0.0,
            jump_pos_incr: 0.0,
        }
    }

    /// Diagonal flow intensity per second for the given knot interval.
    fn flow_rate(&self, knot_interval: f64) -> StateVec {
        let mut q = StateVec::zeros();
        let per_s = |std: f64| std * std / knot_interval;
        q.rows_mut(layout::ROT, 3 * ORDER).fill(per_s(self.flow_rot_incr));
        q.rows_mut(layout::POS, 3 * ORDER).fill(per_s(self.flow_pos_incr));
        q.fixed_rows_mut::<3>(layout::BIAS_GYRO).fill(per_s(self.flow_bias_gyro));
        q.fixed_rows_mut::<3>(layout::BIAS_ACC).fill(per_s(self.flow_bias_acc));
        q.fixed_rows_mut::<2>(layout::GRAVITY).fill(per_s(self.flow_gravity));
        q
    }
}

/// Initial standard deviations of the error state.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialUncertainty {
    pub rot_incr: f64,
    pub pos_incr: f64,
    pub bias_gyro: f64,
    pub bias_acc: f64,
    pub gravity: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        Self { rot_incr: 0.01, pos_incr: 0.01, bias_gyro: 0.01, bias_acc: 0.05, gravity: 0.01 }
    }
}

impl InitialUncertainty {
    pub fn covariance(&self) -> StateCov {
        let mut d = StateVec::zeros();
        d.rows_mut(layout::ROT, 3 * ORDER).fill(self.rot_incr.powi(2));
        d.rows_mut(layout::POS, 3 * ORDER).fill(self.pos_incr.powi(2));
        d.fixed_rows_mut::<3>(layout::BIAS_GYRO).fill(self.bias_gyro.powi(2));
        d.fixed_rows_mut::<3>(layout::BIAS_ACC).fill(self.bias_acc.powi(2));
        d.fixed_rows_mut::<2>(layout::GRAVITY).fill(self.gravity.powi(2));
        StateCov::from_diagonal(&d)
    }
}

/// State, covariance and the trajectory whose live increments mirror
/// `state.increments`.
#[derive(Clone, Debug)]
pub struct Filter {
    pub state: HybridState,
    pub cov: StateCov,
    pub traj: SplineTrajectory,
    /// Time the filter has been propagated to.
    pub time: f64,
    pub noise: ProcessNoise,
}

impl Filter {
    pub fn new(state: HybridState, cov: StateCov, mut traj: SplineTrajectory, time: f64, noise: ProcessNoise) -> Self {
        traj.set_increments(state.increments);
        Self { state, cov, traj, time, noise }
    }

    /// Flow to `to_time`, jumping at every knot the trajectory must grow by.
    /// Returns the number of jumps.
    pub fn predict(&mut self, to_time: f64) -> Result<usize> {
        if to_time < self.time - 1e-12 {
            return Err(Error::BackwardPrediction { requested: to_time, current: self.time });
        }
        let dt = (to_time - self.time).max(0.0);
        let q = self.noise.flow_rate(self.traj.knot_interval());
        for i in 0..STATE_DIM {
            self.cov[(i, i)] += q[i] * dt;
        }

        let mut jumps = 0;
        let a = transition_matrix();
        while to_time > self.traj.span().1 + 1e-12 {
            self.traj.extend_segment();
            self.state = jump_state(&self.state);
            debug_assert_eq!(*self.traj.increments(), self.state.increments);
            self.cov = a * self.cov * a.transpose();
            let new_slot = ORDER - 1;
            for r in 0..3 {
                let i = layout::rot(new_slot) + r;
                self.cov[(i, i)] += self.noise.jump_rot_incr.powi(2);
                let i = layout::pos(new_slot) + r;
                self.cov[(i, i)] += self.noise.jump_pos_incr.powi(2);
            }
            jumps += 1;
        }
        symmetrize(&mut self.cov);
        self.time = self.time.max(to_time);
        Ok(jumps)
    }

    pub fn set_state(&mut self, state: HybridState) {
        self.state = state;
        self.traj.set_increments(state.increments);
    }
}

pub fn symmetrize(m: &mut StateCov) {
    let t = m.transpose();
    *m = (*m + t) * 0.5;
}
