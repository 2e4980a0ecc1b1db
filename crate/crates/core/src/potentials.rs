//! Ground-truth and learned potential/forcing models: point-mass gravity,
//! the finite-size quadrupole correction used as data-generation truth, a
//! brute-force point-cloud oracle for the finite-size double integral, and
//! the model interfaces everything else plugs into.

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::rigidbody::{nonstandard_inertia, BodyParams, SystemParams};

/// Value and gradients of a potential at one configuration. `grad_r` is
/// the unprojected dV/dR; the skew projection happens in the equations
/// of motion.
#[derive(Debug, Clone)]
pub struct PotentialEval {
    pub value: f64,
    pub grad_q: Vec<Vec3>,
    pub grad_r: Vec<Mat3>,
}

impl PotentialEval {
    pub fn zero(n: usize) -> Self {
        PotentialEval { value: 0.0, grad_q: vec![Vec3::ZERO; n], grad_r: vec![Mat3::ZERO; n] }
    }

    pub fn accumulate(&mut self, other: &PotentialEval) {
        self.value += other.value;
        for i in 0..self.grad_q.len() {
            self.grad_q[i] = self.grad_q[i] + other.grad_q[i];
            self.grad_r[i] = self.grad_r[i].add(&other.grad_r[i]);
        }
    }
}

/// An evaluable potential V(q, R) with analytic gradients.
///
/// Attitudes are passed as raw matrices: the flat baseline integrators
/// evaluate V at off-manifold R and the models must accept that.
pub trait PotentialModel: Send + Sync {
    fn evaluate(&self, q: &[Vec3], r: &[Mat3], params: &SystemParams) -> Result<PotentialEval>;

    /// False lets callers skip grad_r work entirely.
    fn has_rotation_dependence(&self) -> bool;
}

/// Nonconservative forcing F(q, R, p, Pi) -> (F_p, F_Pi) per body.
pub trait ForcingModel: Send + Sync {
    fn evaluate(
        &self,
        q: &[Vec3],
        r: &[Mat3],
        p: &[Vec3],
        pi: &[Vec3],
        params: &SystemParams,
    ) -> (Vec<Vec3>, Vec<Vec3>);

    fn is_zero(&self) -> bool {
        false
    }
}

pub struct ZeroPotential;

impl PotentialModel for ZeroPotential {
    fn evaluate(&self, q: &[Vec3], _r: &[Mat3], _params: &SystemParams) -> Result<PotentialEval> {
        Ok(PotentialEval::zero(q.len()))
    }

    fn has_rotation_dependence(&self) -> bool {
        false
    }
}

pub struct ZeroForcing;

impl ForcingModel for ZeroForcing {
    fn evaluate(
        &self,
        q: &[Vec3],
        _r: &[Mat3],
        _p: &[Vec3],
        _pi: &[Vec3],
        _params: &SystemParams,
    ) -> (Vec<Vec3>, Vec<Vec3>) {
        (vec![Vec3::ZERO; q.len()], vec![Vec3::ZERO; q.len()])
    }

    fn is_zero(&self) -> bool {
        true
    }
}

pub(crate) fn check_separation(r2: f64, r_min: f64, i: usize, j: usize) -> Result<()> {
    if !(r2 >= r_min * r_min) {
        return Err(Error::SingularConfiguration { i, j, r: r2.sqrt(), r_min });
    }
    Ok(())
}

/// Newtonian point-mass pair potential `-G m_i m_j / r_ij`.
pub struct PointMassGravity;

impl PotentialModel for PointMassGravity {
    fn evaluate(&self, q: &[Vec3], _r: &[Mat3], params: &SystemParams) -> Result<PotentialEval> {
        let n = q.len();
        let mut out = PotentialEval::zero(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = q[i] - q[j];
                let r2 = d.dot(d);
                check_separation(r2, params.r_min, i, j)?;
                let r = r2.sqrt();
                let inv_r = 1.0 / r;
                let c = params.g * params.bodies[i].mass * params.bodies[j].mass;
                out.value += -(c * inv_r);
                let gcoef = c * (inv_r * inv_r * inv_r);
                out.grad_q[i] = out.grad_q[i] + d.scale(gcoef);
                out.grad_q[j] = out.grad_q[j] - d.scale(gcoef);
            }
        }
        Ok(out)
    }

    fn has_rotation_dependence(&self) -> bool {
        false
    }
}

/// Second-order multipole (MacCullagh) correction per pair, both
/// directions:
/// `V_ij = G m_j / (2 r^3) (tr J_d,i - 3 n^T R_i J_d,i R_i^T n) + (i<->j)`.
///
/// This is the leading rotation-coupled residual of the finite-size
/// double integral, and the data-generation truth for the learning
/// experiments.
pub struct QuadrupoleResidual;

impl QuadrupoleResidual {
    /// Contribution of extended body `a` interacting with point mass of
    /// body `b`, with `d = q_a - q_b` and r already validated.
    fn one_sided(
        c: f64, // G m_b / 2
        d: Vec3,
        r2: f64,
        r_a: &Mat3,
        jd_a: &Mat3,
    ) -> (f64, Vec3, Mat3) {
        let r = r2.sqrt();
        let inv_r = 1.0 / r;
        let inv_r3 = inv_r * inv_r * inv_r;
        let inv_r5 = inv_r3 * inv_r * inv_r;
        let nhat = d.scale(inv_r);
        // A = R J_d R^T (symmetric)
        let a = r_a.mul(jd_a).mul(&r_a.transpose());
        let s = nhat.dot(a.mul_vec(nhat));
        let tr_jd = jd_a.trace();
        let value = c * (tr_jd - 3.0 * s) * inv_r3;
        // dV/dd = r^-5 (-3 c tr(J_d) d - 6 c A d + 15 c s d)
        let grad_d = (d.scale(-3.0 * c * tr_jd) - a.mul_vec(d).scale(6.0 * c)
            + d.scale(15.0 * c * s))
        .scale(inv_r5);
        // dV/dR = -6 c r^-3 (n n^T) R J_d
        let grad_r = Mat3::outer(nhat, nhat).mul(r_a).mul(jd_a).scale(-6.0 * c * inv_r3);
        (value, grad_d, grad_r)
    }
}

impl PotentialModel for QuadrupoleResidual {
    fn evaluate(&self, q: &[Vec3], r: &[Mat3], params: &SystemParams) -> Result<PotentialEval> {
        let n = q.len();
        let jd: Vec<Mat3> = params.bodies.iter().map(nonstandard_inertia).collect();
        let mut out = PotentialEval::zero(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = q[i] - q[j];
                let r2 = d.dot(d);
                check_separation(r2, params.r_min, i, j)?;
                let ci = 0.5 * params.g * params.bodies[j].mass;
                let (vi, gd_i, gr_i) = Self::one_sided(ci, d, r2, &r[i], &jd[i]);
                let cj = 0.5 * params.g * params.bodies[i].mass;
                let (vj, gd_j, gr_j) = Self::one_sided(cj, d, r2, &r[j], &jd[j]);
                out.value += vi + vj;
                out.grad_q[i] = out.grad_q[i] + gd_i + gd_j;
                out.grad_q[j] = out.grad_q[j] - gd_i - gd_j;
                out.grad_r[i] = out.grad_r[i].add(&gr_i);
                out.grad_r[j] = out.grad_r[j].add(&gr_j);
            }
        }
        Ok(out)
    }

    fn has_rotation_dependence(&self) -> bool {
        true
    }
}

/// Sum of component potentials.
pub struct CompositePotential {
    models: Vec<Box<dyn PotentialModel>>,
}

impl CompositePotential {
    pub fn new(models: Vec<Box<dyn PotentialModel>>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidParameter("composite potential needs >= 1 model".into()));
        }
        Ok(CompositePotential { models })
    }
}

impl PotentialModel for CompositePotential {
    fn evaluate(&self, q: &[Vec3], r: &[Mat3], params: &SystemParams) -> Result<PotentialEval> {
        let mut out = PotentialEval::zero(q.len());
        for m in &self.models {
            out.accumulate(&m.evaluate(q, r, params)?);
        }
        Ok(out)
    }

    fn has_rotation_dependence(&self) -> bool {
        self.models.iter().any(|m| m.has_rotation_dependence())
    }
}

/// Linear drag on both momenta: `F_p = -c_p p`, `F_Pi = -c_Pi Pi`.
/// Stands in for the unspecified tidal/relativistic forcings in the
/// nonconservative-learning experiments; strictly energy-dissipating.
pub struct DragForcing {
    pub c_p: f64,
    pub c_pi: f64,
}

impl DragForcing {
    pub fn new(c_p: f64, c_pi: f64) -> Result<Self> {
        if c_p < 0.0 || c_pi < 0.0 {
            return Err(Error::InvalidParameter("drag coefficients must be >= 0".into()));
        }
        Ok(DragForcing { c_p, c_pi })
    }
}

impl ForcingModel for DragForcing {
    fn evaluate(
        &self,
        _q: &[Vec3],
        _r: &[Mat3],
        p: &[Vec3],
        pi: &[Vec3],
        _params: &SystemParams,
    ) -> (Vec<Vec3>, Vec<Vec3>) {
        let f_p = p.iter().map(|v| v.scale(-self.c_p)).collect();
        let f_pi = pi.iter().map(|v| v.scale(-self.c_pi)).collect();
        (f_p, f_pi)
    }

    fn is_zero(&self) -> bool {
        self.c_p == 0.0 && self.c_pi == 0.0
    }
}

/// Discretized rigid body: weighted sample points in the body frame.
#[derive(Debug, Clone)]
pub struct BodyShape {
    pub points: Vec<Vec3>,
    /// Mass weights, summing to the body mass.
    pub weights: Vec<f64>,
}

impl BodyShape {
    /// A single point at the origin (degenerate cloud, point mass).
    pub fn point(mass: f64) -> Self {
        BodyShape { points: vec![Vec3::ZERO], weights: vec![mass] }
    }

    /// Uniform cuboid grid of `n^3` points whose discrete second moment
    /// reproduces the body's nonstandard inertia exactly: the midpoint
    /// grid's per-axis second moment is `e^2 (n^2-1)/(3 n^2)`, so the
    /// half-extents carry an `n/sqrt(n^2-1)` correction.
    pub fn cuboid(params: &BodyParams, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter("cuboid grid needs n >= 2".into()));
        }
        let jd = nonstandard_inertia(params);
        let d = [jd.at(0, 0), jd.at(1, 1), jd.at(2, 2)];
        if d.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "nonstandard inertia has a negative diagonal: {d:?}"
            )));
        }
        let nf = n as f64;
        let corr = nf / (nf * nf - 1.0).sqrt();
        let ext: Vec<f64> =
            d.iter().map(|di| (3.0 * di / params.mass).sqrt() * corr).collect();
        let w = params.mass / (nf * nf * nf);
        let axis = |e: f64, i: usize| e * (2.0 * (i as f64 + 1.0) - nf - 1.0) / nf;
        let mut points = Vec::with_capacity(n * n * n);
        let mut weights = Vec::with_capacity(n * n * n);
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    points.push(Vec3::new(axis(ext[0], ix), axis(ext[1], iy), axis(ext[2], iz)));
                    weights.push(w);
                }
            }
        }
        Ok(BodyShape { points, weights })
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Discrete nonstandard inertia `sum rho x x^T`.
    pub fn induced_nonstandard_inertia(&self) -> Mat3 {
        let mut acc = Mat3::ZERO;
        for (x, w) in self.points.iter().zip(&self.weights) {
            acc = acc.add(&Mat3::outer(*x, *x).scale(*w));
        }
        acc
    }

    pub fn center_of_mass(&self) -> Vec3 {
        let mut acc = Vec3::ZERO;
        for (x, w) in self.points.iter().zip(&self.weights) {
            acc = acc + x.scale(*w);
        }
        acc.scale(1.0 / self.total_mass())
    }
}

/// Brute-force discretization of the finite-size gravitational integral:
/// every point of cloud i against every point of cloud j. Test oracle
/// only; O((n^3)^2) per pair.
pub fn v_pointcloud_oracle(
    q: &[Vec3],
    r: &[Mat3],
    shapes: &[BodyShape],
    g: f64,
) -> Result<f64> {
    let n = q.len();
    let mut value = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            for (xi, wi) in shapes[i].points.iter().zip(&shapes[i].weights) {
                let pi = q[i] + r[i].mul_vec(*xi);
                for (xj, wj) in shapes[j].points.iter().zip(&shapes[j].weights) {
                    let pj = q[j] + r[j].mul_vec(*xj);
                    let dist = (pi - pj).norm();
                    if dist < 1e-12 {
                        return Err(Error::SingularConfiguration { i, j, r: dist, r_min: 1e-12 });
                    }
                    value += -g * wi * wj / dist;
                }
            }
        }
    }
    Ok(value)
}
