//! Rotation-group and unit-sphere calculus.
//!
//! Rotations are kept as 3x3 matrices. Perturbations are applied on the right
//! (body frame): `R ⊞ δ = R · Exp(δ)`, which is why the right Jacobian appears
//! in every chain rule downstream.

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Rotation3, Unit, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat2 = Matrix2<f64>;
pub type Mat3x2 = Matrix3x2<f64>;
pub type Rot3 = Rotation3<f64>;

const EXP_LOG_SMALL: f64 = 1e-8;
const JR_SMALL: f64 = 1e-6;

/// Matrix with `skew(v) * w == v.cross(&w)`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn exp_so3(phi: &Vec3) -> Rot3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let m = if theta < EXP_LOG_SMALL {
        Mat3::identity() + k + 0.5 * k * k
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        Mat3::identity() + a * k + b * k * k
    };
    Rot3::from_matrix_unchecked(m)
}

/// Principal logarithm, `‖result‖ ≤ π`.
///
/// At exactly π the axis sign is ambiguous; it is fixed so that the last
/// nonzero component of the result is nonnegative.
pub fn log_so3(r: &Rot3) -> Vec3 {
    let m = r.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin_theta = 0.5 * vee.norm();
    let theta = sin_theta.atan2(cos_theta);

    if theta < EXP_LOG_SMALL {
        // R ≈ I + skew(φ) + ...
        return 0.5 * vee;
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return vee * (theta / (2.0 * theta.sin()));
    }

    // Near π: R ≈ 2 n nᵀ - I. Extract the axis from the largest diagonal term.
    let b = (m + Mat3::identity()) * 0.5;
    let mut idx = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(idx, idx)] {
            idx = i;
        }
    }
    let mut axis = b.column(idx).into_owned() / b[(idx, idx)].max(0.0).sqrt().max(1e-300);
    axis.normalize_mut();
    // Resolve the sign using the antisymmetric part when it carries information.
    if vee.dot(&axis) < 0.0 {
        axis = -axis;
    }
    let mut phi = axis * theta;
    if std::f64::consts::PI - theta < 1e-12 || vee.norm() < 1e-12 {
        let last = (0..3).rev().find(|&i| phi[i].abs() > 1e-12);
        if let Some(i) = last {
            if phi[i] < 0.0 {
                phi = -phi;
            }
        }
    }
    phi
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) · Exp(J_r(φ) δ)`.
pub fn right_jacobian_so3(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    if theta < JR_SMALL {
        return Mat3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Mat3::identity() - a * k + b * k * k
}

/// Left Jacobian, equal to `J_r(-φ)`.
pub fn left_jacobian_so3(phi: &Vec3) -> Mat3 {
    right_jacobian_so3(&(-phi))
}

/// Inverse of the right Jacobian.
pub fn right_jacobian_inv_so3(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    if theta < JR_SMALL {
        return Mat3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let c = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + c * k * k
}

/// Projects an approximately orthonormal matrix back onto SO(3).
pub fn orthonormalize(r: &Rot3) -> Rot3 {
    let svd = r.matrix().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut m = u * vt;
    if m.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        m = u2 * vt;
    }
    Rot3::from_matrix_unchecked(m)
}

/// Gravity direction on the unit sphere with a two-dimensional error state.
///
/// The stored direction points along the vector the accelerometer reads at
/// rest, expressed in the world frame (for a z-up world this is `+ẑ`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityDir {
    dir: Unit<Vec3>,
}

impl GravityDir {
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > 1e-12) {
            return Err(Error::InvalidInput("gravity direction must be a nonzero finite vector".into()));
        }
        Ok(Self { dir: Unit::new_normalize(v) })
    }

    pub fn up() -> Self {
        Self { dir: Vec3::z_axis() }
    }

    pub fn dir(&self) -> &Vec3 {
        self.dir.as_ref()
    }

    /// Gravity vector with the given magnitude.
    pub fn scaled(&self, magnitude: f64) -> Vec3 {
        self.dir.into_inner() * magnitude
    }

    /// Orthonormal tangent basis `B_d` (3x2).
    ///
    /// Built by carrying `[x̂ ŷ]` along the minimal rotation that takes `ẑ` to
    /// the direction; smooth everywhere except at `-ẑ`.
    pub fn basis(&self) -> Mat3x2 {
        let d = self.dir.as_ref();
        let z = Vec3::z();
        let c = z.cross(d);
        let s = c.norm();
        let rot = if s < 1e-12 {
            if d.z > 0.0 {
                Rot3::identity()
            } else {
                exp_so3(&Vec3::new(std::f64::consts::PI, 0.0, 0.0))
            }
        } else {
            exp_so3(&(c / s * s.atan2(z.dot(d))))
        };
        let m = rot.matrix();
        Mat3x2::from_columns(&[m.column(0).into_owned(), m.column(1).into_owned()])
    }
}

/// `s ⊟ d = B_dᵀ (⌊d⌋s / ‖⌊d⌋s‖) atan2(‖⌊d⌋s‖, dᵀs)`.
pub fn s2_boxminus(s: &GravityDir, d: &GravityDir) -> Result<Vec2> {
    let (sv, dv) = (s.dir(), d.dir());
    let c = dv.cross(sv);
    let n = c.norm();
    let m = dv.dot(sv);
    if n < 1e-14 {
        if m > 0.0 {
            return Ok(Vec2::zeros());
        }
        return Err(Error::Antipodal);
    }
    Ok(d.basis().transpose() * (c / n) * n.atan2(m))
}

/// `d ⊞ δ = Exp(B_d δ) · d`.
pub fn s2_boxplus(d: &GravityDir, delta: &Vec2) -> GravityDir {
    let w = d.basis() * delta;
    let v = exp_so3(&w) * d.dir();
    GravityDir { dir: Unit::new_normalize(v) }
}

/// Derivative of `(ĝ ⊞ δ) ⊟ d` with respect to `δ` at `δ = 0`.
pub fn s2_boxminus_jacobian(g: &GravityDir, d: &GravityDir) -> Mat2 {
    let dv = d.dir();
    let s = g.dir();
    // ∂s/∂δ for s = Exp(B_g δ) g.
    let ds = -skew(s) * g.basis();
    let c = dv.cross(s);
    let n = c.norm();
    let m = dv.dot(s);
    let dd = skew(dv);
    let outer = if n < 1e-9 {
        // Limit s → d: θ/n → 1 and the radial term vanishes.
        dd
    } else {
        let v = c / n;
        let theta = n.atan2(m);
        let denom = n * n + m * m;
        (Mat3::identity() - v * v.transpose()) * dd * (theta / n)
            + v * ((m * v.transpose() * dd - n * dv.transpose()) / denom)
    };
    d.basis().transpose() * outer * ds
}
