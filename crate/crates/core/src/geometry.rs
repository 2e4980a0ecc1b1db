//! SO(3)/so(3) primitives: hat/vee maps, axis-angle rotations, geodesic
//! distance and the orthonormality defect used as the manifold-error
//! diagnostic.
//!
//! Rotations are validated at construction but never silently
//! re-orthonormalized; re-projection would hide exactly the drift the
//! baseline integrators are measured on.

use crate::error::{Error, Result};
use crate::kernels;
use serde::{Deserialize, Serialize};

/// Tolerance for the `Rotation` constructor check.
pub const ROTATION_TOL: f64 = 1e-9;

/// Below this angle the Rodrigues coefficients switch to their Taylor
/// expansions to avoid cancellation in sin(t)/t and (1-cos t)/t^2.
pub(crate) const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn dot(self, other: Vec3) -> f64 {
        kernels::dot(&self.to_array(), &other.to_array())
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// 3x3 matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    pub m: [f64; 9],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] };
    pub const ZERO: Mat3 = Mat3 { m: [0.0; 9] };

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Mat3 {
            m: [r0[0], r0[1], r0[2], r1[0], r1[1], r1[2], r2[0], r2[1], r2[2]],
        }
    }

    pub fn diag(d0: f64, d1: f64, d2: f64) -> Self {
        Mat3 { m: [d0, 0.0, 0.0, 0.0, d1, 0.0, 0.0, 0.0, d2] }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.m[row * 3 + col]
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3 { m: [m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]] }
    }

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut out = [0.0; 9];
        kernels::matmul(&self.m, &o.m, 3, 3, 3, &mut out);
        Mat3 { m: out }
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        kernels::matmul(&self.m, &v.to_array(), 3, 3, 1, &mut out);
        Vec3::from_array(out)
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut m = [0.0; 9];
        for i in 0..9 {
            m[i] = self.m[i] + o.m[i];
        }
        Mat3 { m }
    }

    pub fn sub(&self, o: &Mat3) -> Mat3 {
        let mut m = [0.0; 9];
        for i in 0..9 {
            m[i] = self.m[i] - o.m[i];
        }
        Mat3 { m }
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut m = [0.0; 9];
        for i in 0..9 {
            m[i] = self.m[i] * s;
        }
        Mat3 { m }
    }

    pub fn trace(&self) -> f64 {
        self.m[0] + self.m[4] + self.m[8]
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn frobenius_norm(&self) -> f64 {
        kernels::dot(&self.m, &self.m).sqrt()
    }

    /// Outer product `a b^T`.
    pub fn outer(a: Vec3, b: Vec3) -> Mat3 {
        let mut m = [0.0; 9];
        let aa = a.to_array();
        let ba = b.to_array();
        for i in 0..3 {
            for j in 0..3 {
                m[i * 3 + j] = aa[i] * ba[j];
            }
        }
        Mat3 { m }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }
}

/// An element of SO(3). Checked at construction, never re-projected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    m: Mat3,
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { m: Mat3::IDENTITY };

    /// Validates `||m^T m - I||_F <= 1e-9` and `det(m) = 1 +- 1e-9`.
    pub fn new(m: Mat3) -> Result<Rotation> {
        let defect = orthonormality_defect(&m);
        let det = m.det();
        if defect > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotRotation { defect, det });
        }
        Ok(Rotation { m })
    }

    /// Wraps a matrix without the manifold check. Used by the flat
    /// baseline integrators, whose off-manifold drift is the quantity
    /// under measurement.
    pub fn from_matrix_unchecked(m: Mat3) -> Rotation {
        Rotation { m }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn transpose(&self) -> Rotation {
        Rotation { m: self.m.transpose() }
    }

    pub fn compose(&self, o: &Rotation) -> Rotation {
        Rotation { m: self.m.mul(&o.m) }
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        self.m.mul_vec(v)
    }
}

/// Cross-product matrix: `hat(u) v = u x v`.
pub fn hat(u: Vec3) -> Mat3 {
    Mat3::from_rows([0.0, -u.z, u.y], [u.z, 0.0, -u.x], [-u.y, u.x, 0.0])
}

/// Inverse of [`hat`] for skew-symmetric input (tolerance 1e-9 on the
/// symmetric part, scaled by the matrix magnitude).
pub fn vee(m: &Mat3) -> Result<Vec3> {
    let sym = m.add(&m.transpose());
    let scale = m.frobenius_norm().max(1.0);
    let defect = sym.frobenius_norm() / scale;
    if defect > 1e-9 {
        return Err(Error::NotSkew { defect });
    }
    Ok(vee_unchecked(m))
}

/// Reads the skew components directly without the symmetry check.
/// Integrator flows use this on expressions that are skew by construction.
pub fn vee_unchecked(m: &Mat3) -> Vec3 {
    Vec3::new(m.at(2, 1), m.at(0, 2), m.at(1, 0))
}

/// Rodrigues exponential of `hat(omega)`, exact up to roundoff.
pub fn exp_so3(omega: Vec3) -> Rotation {
    let theta2 = omega.dot(omega);
    let theta = theta2.sqrt();
    let (a, b) = rodrigues_coefficients(theta, theta2);
    let k = hat(omega);
    let k2 = k.mul(&k);
    let m = Mat3::IDENTITY.add(&k.scale(a)).add(&k2.scale(b));
    Rotation { m }
}

pub(crate) fn rodrigues_coefficients(theta: f64, theta2: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    }
}

/// Rotation by `angle` about `axis` (not necessarily unit). A zero axis
/// or zero angle yields the identity: the exact flow of a non-rotating
/// body is the identity map.
pub fn rot_axis(axis: Vec3, angle: f64) -> Rotation {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Rotation::IDENTITY;
    }
    exp_so3(axis.scale(angle / n))
}

pub fn rot_x(angle: f64) -> Rotation {
    let s = angle.sin();
    let c = angle.cos();
    Rotation { m: Mat3::from_rows([1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]) }
}

pub fn rot_y(angle: f64) -> Rotation {
    let s = angle.sin();
    let c = angle.cos();
    Rotation { m: Mat3::from_rows([c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]) }
}

pub fn rot_z(angle: f64) -> Rotation {
    let s = angle.sin();
    let c = angle.cos();
    Rotation { m: Mat3::from_rows([c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]) }
}

/// Geodesic distance on SO(3): the angle of the relative rotation
/// `a^T b`, with the arccos argument clamped against roundoff.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.m.transpose().mul(&b.m);
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// `||m^T m - I||_F`: how far a matrix sits from the orthonormality
/// constraint. Zero (to roundoff) for true rotations.
pub fn orthonormality_defect(m: &Mat3) -> f64 {
    m.transpose().mul(m).sub(&Mat3::IDENTITY).frobenius_norm()
}
