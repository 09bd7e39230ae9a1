//! Uniform cumulative cubic B-spline over SO(3) x R³, parameterized by
//! control-point increments.
//!
//! The trajectory keeps a frozen history of control points plus four live
//! increments `d_0..d_3` hanging off the newest frozen control point (the
//! anchor `R_a`, `p_a`):
//!
//! ```text
//! R_{a+1} = R_a · Exp(d_0),  R_{a+k+1} = R_{a+k} · Exp(d_k)
//! ```
//!
//! Every segment `s` is evaluated with the same product
//! `R(t) = R_{s-1} ∏_{j=0..3} Exp(λ̃_j(u) e_{s-1+j})`, where `e_m` is either a
//! frozen increment or a live one. Because `λ̃_0 ≡ 1` the first factor simply
//! rebuilds `R_s`, so the live segment and the three historical segments it
//! still influences share one formula and one set of Jacobians.

use std::collections::VecDeque;

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::lie_math::{exp_so3, orthonormalize, right_jacobian_so3, skew, Mat3, Rot3, Vec3};

/// Spline order (cubic).
pub const ORDER: usize = 4;

/// Cumulative blending matrix of the uniform cubic B-spline; row `j` holds the
/// coefficients of `λ̃_j(u)` in the monomial basis `[1, u, u², u³]`.
pub const CUMULATIVE_BLENDING: [[f64; 4]; 4] = [
    [6.0 / 6.0, 0.0, 0.0, 0.0],
    [5.0 / 6.0, 3.0 / 6.0, -3.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 3.0 / 6.0, 3.0 / 6.0, -2.0 / 6.0],
    [0.0, 0.0, 0.0, 1.0 / 6.0],
];

/// Blending evaluation for a fixed knot interval.
#[derive(Clone, Copy, Debug)]
pub struct BlendingTables {
    matrix: Matrix4<f64>,
    knot_interval: f64,
}

impl BlendingTables {
    pub fn new(knot_interval: f64) -> Result<Self> {
        if !(knot_interval > 0.0 && knot_interval.is_finite()) {
            return Err(Error::InvalidInput(format!("knot interval must be positive, got {knot_interval}")));
        }
        let mut matrix = Matrix4::zeros();
        for (j, row) in CUMULATIVE_BLENDING.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                matrix[(j, k)] = *v;
            }
        }
        Ok(Self { matrix, knot_interval })
    }

    pub fn knot_interval(&self) -> f64 {
        self.knot_interval
    }

    /// `λ̃(u)` (order 0), `dλ̃/dt` (order 1) or `d²λ̃/dt²` (order 2).
    ///
    /// # Panics
    /// If `order > 2`.
    pub fn lambda(&self, u: f64, order: usize) -> Vector4<f64> {
        let dt = self.knot_interval;
        let basis = match order {
            0 => Vector4::new(1.0, u, u * u, u * u * u),
            1 => Vector4::new(0.0, 1.0, 2.0 * u, 3.0 * u * u) / dt,
            2 => Vector4::new(0.0, 0.0, 2.0, 6.0 * u) / (dt * dt),
            _ => panic!("blending derivative order {order} not supported"),
        };
        self.matrix * basis
    }
}

/// The four live rotational and positional increments.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SegmentIncrements {
    pub rot: [Vec3; ORDER],
    pub pos: [Vec3; ORDER],
}

impl SegmentIncrements {
    pub fn zeros() -> Self {
        Self::default()
    }

    /// Equal increments in every slot: constant angular and linear velocity.
    pub fn uniform(rot: Vec3, pos: Vec3) -> Self {
        Self { rot: [rot; ORDER], pos: [pos; ORDER] }
    }
}

/// Interpolated kinematics and Jacobians with respect to the live increments.
///
/// Rotation Jacobians use the right perturbation `R ⊞ δ = R · Exp(δ)`. Slots
/// that do not influence the query time carry zero blocks.
#[derive(Clone, Debug)]
pub struct SplineSample {
    pub t: f64,
    pub rot: Rot3,
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
    /// Body-frame angular velocity.
    pub omega: Vec3,
    pub d_rot: [Mat3; ORDER],
    pub d_omega: [Mat3; ORDER],
    /// `∂p/∂d_p,k = pos_coef[k] · I`; likewise for velocity and acceleration.
    pub pos_coef: [f64; ORDER],
    pub vel_coef: [f64; ORDER],
    pub acc_coef: [f64; ORDER],
    /// Whether slot `k` influences this time at all.
    pub live: [bool; ORDER],
}

#[derive(Clone, Debug)]
pub struct SplineTrajectory {
    blending: BlendingTables,
    /// Time of control point 0.
    t0: f64,
    /// Global index of `frozen_rot[0]`.
    first_index: usize,
    frozen_rot: VecDeque<Rot3>,
    frozen_pos: VecDeque<Vec3>,
    /// `e_m` for frozen `m`; one shorter than the control-point deques.
    frozen_rot_incr: VecDeque<Vec3>,
    frozen_pos_incr: VecDeque<Vec3>,
    live: SegmentIncrements,
    max_history: usize,
}

/// Minimum retained control points: the anchor plus the three before it that
/// historical segments in the affected window still reference.
const MIN_HISTORY: usize = 2 * ORDER - 1;

impl SplineTrajectory {
    /// A trajectory whose first queryable time is `span_start`, with the
    /// anchor control point one knot interval earlier.
    pub fn new(
        span_start: f64,
        knot_interval: f64,
        anchor_rot: Rot3,
        anchor_pos: Vec3,
        live: SegmentIncrements,
    ) -> Result<Self> {
        let blending = BlendingTables::new(knot_interval)?;
        Ok(Self {
            blending,
            t0: span_start - knot_interval,
            first_index: 0,
            frozen_rot: VecDeque::from([anchor_rot]),
            frozen_pos: VecDeque::from([anchor_pos]),
            frozen_rot_incr: VecDeque::new(),
            frozen_pos_incr: VecDeque::new(),
            live,
            max_history: 64,
        })
    }

    /// Number of frozen control points retained (at least `2N-1`).
    pub fn with_max_history(mut self, n: usize) -> Self {
        self.max_history = n.max(MIN_HISTORY);
        self
    }

    pub fn knot_interval(&self) -> f64 {
        self.blending.knot_interval()
    }

    pub fn blending(&self) -> &BlendingTables {
        &self.blending
    }

    pub fn increments(&self) -> &SegmentIncrements {
        &self.live
    }

    pub fn set_increments(&mut self, live: SegmentIncrements) {
        self.live = live;
    }

    fn anchor_index(&self) -> usize {
        self.first_index + self.frozen_rot.len() - 1
    }

    pub fn anchor(&self) -> (Rot3, Vec3) {
        (*self.frozen_rot.back().unwrap(), *self.frozen_pos.back().unwrap())
    }

    /// Time of global control point `m`.
    pub fn knot_time(&self, m: usize) -> f64 {
        self.t0 + m as f64 * self.knot_interval()
    }

    /// Closed queryable interval.
    pub fn span(&self) -> (f64, f64) {
        (self.knot_time(self.first_index + 1), self.knot_time(self.anchor_index() + 2))
    }

    /// Start/end of the live segment.
    pub fn live_segment(&self) -> (f64, f64) {
        let a = self.anchor_index();
        (self.knot_time(a + 1), self.knot_time(a + 2))
    }

    /// Start of the oldest segment whose shape still depends on live
    /// increments.
    pub fn affected_start(&self) -> f64 {
        let a = self.anchor_index();
        let oldest = a.saturating_sub(ORDER - 2).max(self.first_index + 1);
        self.knot_time(oldest)
    }

    /// Control point `m`, frozen or reconstructed from the live increments.
    pub fn control_point(&self, m: usize) -> Option<(Rot3, Vec3)> {
        let a = self.anchor_index();
        if m < self.first_index || m > a + ORDER {
            return None;
        }
        if m <= a {
            let i = m - self.first_index;
            return Some((self.frozen_rot[i], self.frozen_pos[i]));
        }
        let (mut r, mut p) = self.anchor();
        for k in 0..(m - a) {
            r *= exp_so3(&self.live.rot[k]);
            p += self.live.pos[k];
        }
        Some((r, p))
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (start, end) = self.span();
        let tol = 1e-12 * (1.0 + t.abs());
        if !(t >= start - tol && t <= end + tol) {
            return Err(Error::OutOfSpan { t, start, end });
        }
        let dt = self.knot_interval();
        let a = self.anchor_index();
        let rel = (t - self.t0) / dt;
        let mut s = rel.floor().max(0.0) as usize;
        s = s.clamp(self.first_index + 1, a + 1);
        let u = ((t - self.knot_time(s)) / dt).clamp(0.0, 1.0);
        Ok((s, u))
    }

    /// Full kinematic evaluation with live-increment Jacobians.
    pub fn evaluate(&self, t: f64) -> Result<SplineSample> {
        let (s, u) = self.locate(t)?;
        let a = self.anchor_index();
        let base = s - 1;
        let bi = base - self.first_index;
        let base_rot = self.frozen_rot[bi];
        let base_pos = self.frozen_pos[bi];

        let mut rot_incr = [Vec3::zeros(); ORDER];
        let mut pos_incr = [Vec3::zeros(); ORDER];
        // slot[j]: live slot referenced by factor j.
        let mut slot = [None; ORDER];
        for j in 0..ORDER {
            let m = base + j;
            if m < a {
                rot_incr[j] = self.frozen_rot_incr[m - self.first_index];
                pos_incr[j] = self.frozen_pos_incr[m - self.first_index];
            } else {
                rot_incr[j] = self.live.rot[m - a];
                pos_incr[j] = self.live.pos[m - a];
                slot[j] = Some(m - a);
            }
        }

        let lam = self.blending.lambda(u, 0);
        let dlam = self.blending.lambda(u, 1);
        let ddlam = self.blending.lambda(u, 2);

        let factors: [Rot3; ORDER] = std::array::from_fn(|j| exp_so3(&(lam[j] * rot_incr[j])));

        let mut rot = base_rot;
        let mut pos = base_pos;
        let mut vel = Vec3::zeros();
        let mut acc = Vec3::zeros();
        // ω^(j) before factor j is applied.
        let mut omega_partial = [Vec3::zeros(); ORDER + 1];
        for j in 0..ORDER {
            rot *= factors[j];
            pos += lam[j] * pos_incr[j];
            vel += dlam[j] * pos_incr[j];
            acc += ddlam[j] * pos_incr[j];
            omega_partial[j + 1] = factors[j].inverse() * omega_partial[j] + dlam[j] * rot_incr[j];
        }

        // P_j = P_{j+1} A_{j+1}ᵀ with P_N = I, A_N = I.
        let mut p_chain = [Mat3::identity(); ORDER + 1];
        for j in (0..ORDER).rev() {
            let next = if j + 1 < ORDER { factors[j + 1].matrix().transpose() } else { Mat3::identity() };
            p_chain[j] = p_chain[j + 1] * next;
        }

        let mut sample = SplineSample {
            t,
            rot,
            pos,
            vel,
            acc,
            omega: omega_partial[ORDER],
            d_rot: [Mat3::zeros(); ORDER],
            d_omega: [Mat3::zeros(); ORDER],
            pos_coef: [0.0; ORDER],
            vel_coef: [0.0; ORDER],
            acc_coef: [0.0; ORDER],
            live: [false; ORDER],
        };
        for j in 0..ORDER {
            let Some(k) = slot[j] else { continue };
            let scaled = lam[j] * rot_incr[j];
            sample.d_rot[k] = lam[j] * p_chain[j] * right_jacobian_so3(&scaled);
            sample.d_omega[k] = p_chain[j]
                * (lam[j] * factors[j].matrix().transpose() * skew(&omega_partial[j]) * right_jacobian_so3(&(-scaled))
                    + dlam[j] * Mat3::identity());
            sample.pos_coef[k] = lam[j];
            sample.vel_coef[k] = dlam[j];
            sample.acc_coef[k] = ddlam[j];
            sample.live[k] = true;
        }
        Ok(sample)
    }

    pub fn interpolate_rotation(&self, t: f64) -> Result<Rot3> {
        Ok(self.evaluate(t)?.rot)
    }

    pub fn interpolate_angular_rate(&self, t: f64) -> Result<Vec3> {
        Ok(self.evaluate(t)?.omega)
    }

    pub fn interpolate_position(&self, t: f64) -> Result<Vec3> {
        Ok(self.evaluate(t)?.pos)
    }

    pub fn interpolate_velocity(&self, t: f64) -> Result<Vec3> {
        Ok(self.evaluate(t)?.vel)
    }

    pub fn interpolate_acceleration(&self, t: f64) -> Result<Vec3> {
        Ok(self.evaluate(t)?.acc)
    }

    pub fn jac_rotation_wrt_increments(&self, t: f64) -> Result<[Mat3; ORDER]> {
        Ok(self.evaluate(t)?.d_rot)
    }

    pub fn jac_angular_rate_wrt_increments(&self, t: f64) -> Result<[Mat3; ORDER]> {
        Ok(self.evaluate(t)?.d_omega)
    }

    pub fn jac_position_wrt_increments(&self, t: f64) -> Result<[f64; ORDER]> {
        Ok(self.evaluate(t)?.pos_coef)
    }

    /// Appends one segment using the constant-velocity guess.
    ///
    /// `d'_j = d_{j+1}` for `j < 3` and `d'_3 = d_2`; the consumed `d_0` is
    /// frozen into the history and the anchor advances to `R_a · Exp(d_0)`.
    pub fn extend_segment(&mut self) {
        let d = self.live;
        let (r, p) = self.anchor();
        self.frozen_rot_incr.push_back(d.rot[0]);
        self.frozen_pos_incr.push_back(d.pos[0]);
        self.frozen_rot.push_back(orthonormalize(&(r * exp_so3(&d.rot[0]))));
        self.frozen_pos.push_back(p + d.pos[0]);
        self.live = SegmentIncrements {
            rot: [d.rot[1], d.rot[2], d.rot[3], d.rot[2]],
            pos: [d.pos[1], d.pos[2], d.pos[3], d.pos[2]],
        };
        while self.frozen_rot.len() > self.max_history {
            self.frozen_rot.pop_front();
            self.frozen_pos.pop_front();
            self.frozen_rot_incr.pop_front();
            self.frozen_pos_incr.pop_front();
            self.first_index += 1;
        }
    }

    /// Poses sampled every `1/rate` seconds over the span.
    pub fn sample_poses(&self, rate_hz: f64) -> Vec<(f64, Rot3, Vec3)> {
        let (start, end) = self.span();
        let step = 1.0 / rate_hz;
        let n = ((end - start) / step).floor() as usize;
        (0..=n)
            .filter_map(|i| {
                let t = start + i as f64 * step;
                self.evaluate(t).ok().map(|s| (t, s.rot, s.pos))
            })
            .collect()
    }
}
