//! Phase-space state types, inertia bookkeeping, the Hamiltonian, and the
//! continuous-time equations of motion as a vector field for the
//! non-splitting integrators.

use crate::error::{Error, Result};
use crate::geometry::{hat, vee_unchecked, Mat3, Rotation, Vec3};
use crate::potentials::{ForcingModel, PotentialModel};
use serde::{Deserialize, Serialize};

/// Per-body mass and principal-axis inertia. The inertia is stored as a
/// diagonal because the exact split flows are written for diagonal J;
/// general symmetric tensors are rejected rather than diagonalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub mass: f64,
    /// Principal moments (J1, J2, J3) in the body frame.
    pub inertia: [f64; 3],
}

impl BodyParams {
    pub fn new(mass: f64, inertia: [f64; 3]) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(Error::InvalidParameter(format!("mass must be > 0, got {mass}")));
        }
        if inertia.iter().any(|j| !(*j > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "principal moments must be > 0, got {inertia:?}"
            )));
        }
        let p = BodyParams { mass, inertia };
        if !p.triangle_inequalities_hold() {
            eprintln!(
                "warning: inertia {inertia:?} violates the rigid-body triangle inequalities"
            );
        }
        Ok(p)
    }

    /// J1 + J2 >= J3 and permutations; any physical mass distribution
    /// satisfies these.
    pub fn triangle_inequalities_hold(&self) -> bool {
        let [a, b, c] = self.inertia;
        a + b >= c && b + c >= a && a + c >= b
    }

    pub fn inertia_mat(&self) -> Mat3 {
        Mat3::diag(self.inertia[0], self.inertia[1], self.inertia[2])
    }

    pub fn inv_inertia(&self) -> [f64; 3] {
        [1.0 / self.inertia[0], 1.0 / self.inertia[1], 1.0 / self.inertia[2]]
    }
}

/// Nonstandard moment of inertia `J_d = 1/2 tr(J) I - J`, the second
/// moment of the mass distribution. Satisfies `J = tr(J_d) I - J_d`.
pub fn nonstandard_inertia(params: &BodyParams) -> Mat3 {
    let [j1, j2, j3] = params.inertia;
    let half_tr = 0.5 * (j1 + j2 + j3);
    Mat3::diag(half_tr - j1, half_tr - j2, half_tr - j3)
}

/// One body's phase-space snapshot (q, p, R, Pi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    /// Position (inertial frame).
    pub q: Vec3,
    /// Linear momentum (inertial frame).
    pub p: Vec3,
    /// Body-to-inertial attitude.
    pub r: Rotation,
    /// Angular momentum in the body frame.
    pub pi: Vec3,
}

impl BodyState {
    pub fn is_finite(&self) -> bool {
        self.q.is_finite() && self.p.is_finite() && self.r.matrix().is_finite() && self.pi.is_finite()
    }
}

/// Phase point of the full N-body system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub t: f64,
    pub bodies: Vec<BodyState>,
}

impl SystemState {
    pub fn n_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.bodies.iter().all(|b| b.is_finite())
    }
}

fn default_r_min() -> f64 {
    1e-12
}

/// Masses, inertias and the gravitational constant for one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub bodies: Vec<BodyParams>,
    /// Gravitational constant in whatever unit system the states use.
    pub g: f64,
    /// Pair separations below this are treated as singular.
    #[serde(default = "default_r_min")]
    pub r_min: f64,
}

impl SystemParams {
    pub fn new(bodies: Vec<BodyParams>, g: f64) -> Result<Self> {
        if bodies.is_empty() {
            return Err(Error::InvalidParameter("at least one body required".into()));
        }
        if !(g > 0.0) {
            return Err(Error::InvalidParameter(format!("G must be > 0, got {g}")));
        }
        Ok(SystemParams { bodies, g, r_min: default_r_min() })
    }

    pub fn n_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn check_state(&self, state: &SystemState) -> Result<()> {
        if state.n_bodies() != self.n_bodies() {
            return Err(Error::ShapeMismatch(format!(
                "state has {} bodies, params has {}",
                state.n_bodies(),
                self.n_bodies()
            )));
        }
        Ok(())
    }
}

/// Right-hand sides of the equations of motion. `dr` is the raw tangent
/// `R hat(J^-1 Pi)`, unprojected, as consumed by the flat integrators.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub dq: Vec<Vec3>,
    pub dp: Vec<Vec3>,
    pub dr: Vec<Mat3>,
    pub dpi: Vec<Vec3>,
}

/// Total kinetic energy: translational plus rotational.
pub fn kinetic_energy(state: &SystemState, params: &SystemParams) -> f64 {
    let mut e = 0.0;
    for (b, bp) in state.bodies.iter().zip(&params.bodies) {
        e += 0.5 * b.p.dot(b.p) / bp.mass;
        let inv_j = bp.inv_inertia();
        e += 0.5
            * (b.pi.x * b.pi.x * inv_j[0] + b.pi.y * b.pi.y * inv_j[1] + b.pi.z * b.pi.z * inv_j[2]);
    }
    e
}

/// The physical Hamiltonian: kinetic energy plus the potential value.
pub fn hamiltonian(
    state: &SystemState,
    params: &SystemParams,
    potential: &dyn PotentialModel,
) -> Result<f64> {
    let (q, r): (Vec<Vec3>, Vec<Mat3>) =
        state.bodies.iter().map(|b| (b.q, *b.r.matrix())).unzip();
    let eval = potential.evaluate(&q, &r, params)?;
    Ok(kinetic_energy(state, params) + eval.value)
}

/// The generalized torque `(R^T dV/dR - (dV/dR)^T R)^vee` that enters
/// the Pi equation with a minus sign.
pub fn skew_project_torque(r: &Mat3, dvdr: &Mat3) -> Vec3 {
    let a = r.transpose().mul(dvdr);
    let skew = a.sub(&a.transpose());
    vee_unchecked(&skew)
}

/// Continuous-time equations of motion as a vector field.
pub fn eom(
    state: &SystemState,
    params: &SystemParams,
    potential: &dyn PotentialModel,
    forcing: &dyn ForcingModel,
) -> Result<Derivatives> {
    params.check_state(state)?;
    let n = state.n_bodies();
    let (q, r): (Vec<Vec3>, Vec<Mat3>) =
        state.bodies.iter().map(|b| (b.q, *b.r.matrix())).unzip();
    let eval = potential.evaluate(&q, &r, params)?;
    let (p, pi): (Vec<Vec3>, Vec<Vec3>) = state.bodies.iter().map(|b| (b.p, b.pi)).unzip();
    let (f_p, f_pi) = forcing.evaluate(&q, &r, &p, &pi, params);

    let mut d = Derivatives {
        dq: Vec::with_capacity(n),
        dp: Vec::with_capacity(n),
        dr: Vec::with_capacity(n),
        dpi: Vec::with_capacity(n),
    };
    for i in 0..n {
        let bp = &params.bodies[i];
        let b = &state.bodies[i];
        let inv_j = bp.inv_inertia();
        let omega = Vec3::new(b.pi.x * inv_j[0], b.pi.y * inv_j[1], b.pi.z * inv_j[2]);
        d.dq.push(b.p.scale(1.0 / bp.mass));
        d.dp.push(-eval.grad_q[i] + f_p[i]);
        d.dr.push(r[i].mul(&hat(omega)));
        let torque = skew_project_torque(&r[i], &eval.grad_r[i]);
        d.dpi.push(b.pi.cross(omega) - torque + f_pi[i]);
    }
    Ok(d)
}
