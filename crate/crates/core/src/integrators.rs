//! Fixed-step integrators: the exact split flows and their Strang
//! composition (Lie T2), plus the comparison schemes — explicit Euler,
//! classical RK4, a naive Verlet, and the commutator-free Lie-group
//! integrators CF2 (Lie RK2) and CF4 (Lie RK4).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, hat, rot_axis, rot_y, rot_z, Mat3, Rotation, Vec3};
use crate::potentials::{ForcingModel, PotentialModel};
use crate::rigidbody::{eom, skew_project_torque, Derivatives, SystemParams, SystemState};

/// The integration schemes available behind [`step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepScheme {
    #[serde(rename = "euler")]
    ExplicitEuler,
    #[serde(rename = "rk4")]
    RK4,
    #[serde(rename = "verlet")]
    Verlet,
    #[serde(rename = "lie-rk2")]
    LieRK2,
    #[serde(rename = "lie-rk4")]
    LieRK4,
    #[serde(rename = "lie-t2")]
    LieT2,
}

impl StepScheme {
    pub const ALL: [StepScheme; 6] = [
        StepScheme::ExplicitEuler,
        StepScheme::RK4,
        StepScheme::Verlet,
        StepScheme::LieRK2,
        StepScheme::LieRK4,
        StepScheme::LieT2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StepScheme::ExplicitEuler => "euler",
            StepScheme::RK4 => "rk4",
            StepScheme::Verlet => "verlet",
            StepScheme::LieRK2 => "lie-rk2",
            StepScheme::LieRK4 => "lie-rk4",
            StepScheme::LieT2 => "lie-t2",
        }
    }

    /// Whether the scheme keeps R on SO(3) by construction.
    pub fn is_lie_group_preserving(self) -> bool {
        matches!(self, StepScheme::LieRK2 | StepScheme::LieRK4 | StepScheme::LieT2)
    }
}

impl std::fmt::Display for StepScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StepScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StepScheme::ALL
            .into_iter()
            .find(|scheme| scheme.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme '{s}'")))
    }
}

/// Everything a single step needs besides the state.
pub struct StepContext<'a> {
    pub params: &'a SystemParams,
    pub potential: &'a dyn PotentialModel,
    pub forcing: &'a dyn ForcingModel,
    /// Stepsize in real time. Positive in normal use; reversed-step
    /// tests negate it.
    pub h: f64,
    /// Reproduce the full-h drift variant of the naive Verlet scheme
    /// instead of the genuine half-step leapfrog.
    pub verlet_literal: bool,
}

impl<'a> StepContext<'a> {
    pub fn new(
        params: &'a SystemParams,
        potential: &'a dyn PotentialModel,
        forcing: &'a dyn ForcingModel,
        h: f64,
    ) -> Self {
        StepContext { params, potential, forcing, h, verlet_literal: false }
    }
}

fn unzip_qr(state: &SystemState) -> (Vec<Vec3>, Vec<Mat3>) {
    state.bodies.iter().map(|b| (b.q, *b.r.matrix())).unzip()
}

/// Exact flow of the kinetic split Hamiltonian over time `h`: free
/// drift of q and the closed-form free motion of an axis-symmetric top,
/// `R(h) = R(0) R_Pi(|Pi| h / J1) R_z(theta h)` with
/// `theta = (1/J3 - 1/J1) Pi_z`, `Pi(h) = R_z(theta h)^T Pi(0)`.
pub fn flow_ke(state: &SystemState, params: &SystemParams, h: f64) -> SystemState {
    let mut out = state.clone();
    for (b, bp) in out.bodies.iter_mut().zip(&params.bodies) {
        b.q = b.q + b.p.scale(h / bp.mass);
        let j1 = bp.inertia[0];
        let j3 = bp.inertia[2];
        let pi_norm = b.pi.norm();
        let r_pi = rot_axis(b.pi, pi_norm * h / j1);
        let theta = (1.0 / j3 - 1.0 / j1) * b.pi.z;
        let rz = rot_z(theta * h);
        b.r = b.r.compose(&r_pi).compose(&rz);
        b.pi = rz.transpose().apply(b.pi);
    }
    out
}

/// Exact flow of the potential split Hamiltonian: momentum kicks at
/// frozen configuration.
pub fn flow_pe(state: &SystemState, ctx: &StepContext, h: f64) -> Result<SystemState> {
    let (q, r) = unzip_qr(state);
    let eval = ctx.potential.evaluate(&q, &r, ctx.params)?;
    let mut out = state.clone();
    for (i, b) in out.bodies.iter_mut().enumerate() {
        b.p = b.p - eval.grad_q[i].scale(h);
        let torque = skew_project_torque(&r[i], &eval.grad_r[i]);
        b.pi = b.pi - torque.scale(h);
    }
    Ok(out)
}

/// Exact flow of the asymmetry correction Hamiltonian, with
/// `delta = 1/J2 - 1/J1`: `R(h) = rot_y(delta Pi_y h) R(0)` (left
/// multiplication as displayed in the scheme definition) and
/// `Pi(h) = rot_y(-delta Pi_y h) Pi(0)`. Identity for axis-symmetric
/// bodies.
pub fn flow_asym(state: &SystemState, params: &SystemParams, h: f64) -> SystemState {
    let mut out = state.clone();
    for (b, bp) in out.bodies.iter_mut().zip(&params.bodies) {
        let delta = 1.0 / bp.inertia[1] - 1.0 / bp.inertia[0];
        let angle = delta * b.pi.y * h;
        b.r = rot_y(angle).compose(&b.r);
        b.pi = rot_y(-angle).apply(b.pi);
    }
    out
}

/// Nonconservative momentum update at frozen configuration:
/// `p += F_p h`, `Pi += F_Pi h`.
pub fn flow_force(state: &SystemState, ctx: &StepContext, h: f64) -> Result<SystemState> {
    let (q, r) = unzip_qr(state);
    let (p, pi): (Vec<Vec3>, Vec<Vec3>) = state.bodies.iter().map(|b| (b.p, b.pi)).unzip();
    let (f_p, f_pi) = ctx.forcing.evaluate(&q, &r, &p, &pi, ctx.params);
    let mut out = state.clone();
    for (i, b) in out.bodies.iter_mut().enumerate() {
        b.p = b.p + f_p[i].scale(h);
        b.pi = b.pi + f_pi[i].scale(h);
    }
    Ok(out)
}

/// One Strang-composed Lie T2 step: KE and PE half-flows wrap the
/// asymmetry half-flows around a full force step, rightmost factor
/// first.
pub fn step_lie_t2(state: &SystemState, ctx: &StepContext) -> Result<SystemState> {
    let h = ctx.h;
    let hh = 0.5 * h;
    let s = flow_ke(state, ctx.params, hh);
    let s = flow_pe(&s, ctx, hh)?;
    let s = flow_asym(&s, ctx.params, hh);
    let s = flow_force(&s, ctx, h)?;
    let s = flow_asym(&s, ctx.params, hh);
    let s = flow_pe(&s, ctx, hh)?;
    let mut s = flow_ke(&s, ctx.params, hh);
    s.t = state.t + h;
    Ok(s)
}

/// `state + scale * d` over the flattened phase space, R treated as a
/// plain 3x3 matrix.
fn add_scaled(state: &SystemState, d: &Derivatives, scale: f64) -> SystemState {
    let mut out = state.clone();
    for (i, b) in out.bodies.iter_mut().enumerate() {
        b.q = b.q + d.dq[i].scale(scale);
        b.p = b.p + d.dp[i].scale(scale);
        b.r = Rotation::from_matrix_unchecked(b.r.matrix().add(&d.dr[i].scale(scale)));
        b.pi = b.pi + d.dpi[i].scale(scale);
    }
    out
}

/// Explicit Euler over the flat state.
pub fn step_euler(state: &SystemState, ctx: &StepContext) -> Result<SystemState> {
    let d = eom(state, ctx.params, ctx.potential, ctx.forcing)?;
    let mut out = add_scaled(state, &d, ctx.h);
    out.t = state.t + ctx.h;
    Ok(out)
}

/// Classical fourth-order Runge-Kutta over the flat state.
pub fn step_rk4(state: &SystemState, ctx: &StepContext) -> Result<SystemState> {
    let h = ctx.h;
    let k1 = eom(state, ctx.params, ctx.potential, ctx.forcing)?;
    let s2 = add_scaled(state, &k1, 0.5 * h);
    let k2 = eom(&s2, ctx.params, ctx.potential, ctx.forcing)?;
    let s3 = add_scaled(state, &k2, 0.5 * h);
    let k3 = eom(&s3, ctx.params, ctx.potential, ctx.forcing)?;
    let s4 = add_scaled(state, &k3, h);
    let k4 = eom(&s4, ctx.params, ctx.potential, ctx.forcing)?;

    let mut out = state.clone();
    let w = h / 6.0;
    for (i, b) in out.bodies.iter_mut().enumerate() {
        b.q = b.q + (k1.dq[i] + k2.dq[i].scale(2.0) + k3.dq[i].scale(2.0) + k4.dq[i]).scale(w);
        b.p = b.p + (k1.dp[i] + k2.dp[i].scale(2.0) + k3.dp[i].scale(2.0) + k4.dp[i]).scale(w);
        let dr = k1.dr[i]
            .add(&k2.dr[i].scale(2.0))
            .add(&k3.dr[i].scale(2.0))
            .add(&k4.dr[i])
            .scale(w);
        b.r = Rotation::from_matrix_unchecked(b.r.matrix().add(&dr));
        b.pi =
            b.pi + (k1.dpi[i] + k2.dpi[i].scale(2.0) + k3.dpi[i].scale(2.0) + k4.dpi[i]).scale(w);
    }
    out.t = state.t + h;
    Ok(out)
}

/// Naive Verlet: flat drift, full kick, flat drift. The default variant
/// drifts by h/2 on each side (a genuine leapfrog); `verlet_literal`
/// uses the full-h drifts of the scheme as displayed.
pub fn step_verlet(state: &SystemState, ctx: &StepContext) -> Result<SystemState> {
    let h = ctx.h;
    let drift = if ctx.verlet_literal { h } else { 0.5 * h };

    // first drift
    let mut mid = state.clone();
    for (b, bp) in mid.bodies.iter_mut().zip(&ctx.params.bodies) {
        b.q = b.q + b.p.scale(drift / bp.mass);
        let inv_j = bp.inv_inertia();
        let omega = Vec3::new(b.pi.x * inv_j[0], b.pi.y * inv_j[1], b.pi.z * inv_j[2]);
        let dr = b.r.matrix().mul(&hat(omega)).scale(drift);
        b.r = Rotation::from_matrix_unchecked(b.r.matrix().add(&dr));
    }

    // full kick at the drifted configuration
    let (q, r) = unzip_qr(&mid);
    let eval = ctx.potential.evaluate(&q, &r, ctx.params)?;
    let (p, pi): (Vec<Vec3>, Vec<Vec3>) = mid.bodies.iter().map(|b| (b.p, b.pi)).unzip();
    let (f_p, f_pi) = ctx.forcing.evaluate(&q, &r, &p, &pi, ctx.params);
    for (i, b) in mid.bodies.iter_mut().enumerate() {
        let bp = &ctx.params.bodies[i];
        b.p = b.p + (-eval.grad_q[i] + f_p[i]).scale(h);
        let inv_j = bp.inv_inertia();
        let omega = Vec3::new(pi[i].x * inv_j[0], pi[i].y * inv_j[1], pi[i].z * inv_j[2]);
        let torque = skew_project_torque(&r[i], &eval.grad_r[i]);
        b.pi = b.pi + (pi[i].cross(omega) - torque + f_pi[i]).scale(h);
    }

    // second drift with updated momenta
    for (b, bp) in mid.bodies.iter_mut().zip(&ctx.params.bodies) {
        b.q = b.q + b.p.scale(drift / bp.mass);
        let inv_j = bp.inv_inertia();
        let omega = Vec3::new(b.pi.x * inv_j[0], b.pi.y * inv_j[1], b.pi.z * inv_j[2]);
        let dr = b.r.matrix().mul(&hat(omega)).scale(drift);
        b.r = Rotation::from_matrix_unchecked(b.r.matrix().add(&dr));
    }
    mid.t = state.t + h;
    Ok(mid)
}

fn body_omega(pi: Vec3, inv_j: [f64; 3]) -> Vec3 {
    Vec3::new(pi.x * inv_j[0], pi.y * inv_j[1], pi.z * inv_j[2])
}

/// CF2 (Lie RK2): midpoint rule for the Euclidean coordinates, frozen
/// exponentials for R: `R(h/2) = exp(F1 h/2) R(0)`,
/// `R(h) = exp(F2 h) R(0)` with `F_k = hat(J^-1 Pi)` at the stage.
pub fn step_cf2(state: &SystemState, ctx: &StepContext) -> Result<SystemState> {
    let h = ctx.h;
    let d0 = eom(state, ctx.params, ctx.potential, ctx.forcing)?;

    let mut mid = state.clone();
    for (i, b) in mid.bodies.iter_mut().enumerate() {
        let bp = &ctx.params.bodies[i];
        b.q = b.q + d0.dq[i].scale(0.5 * h);
        b.p = b.p + d0.dp[i].scale(0.5 * h);
        let a1 = body_omega(state.bodies[i].pi, bp.inv_inertia());
        b.r = exp_so3(a1.scale(0.5 * h)).compose(&b.r);
        b.pi = b.pi + d0.dpi[i].scale(0.5 * h);
    }

    let d_mid = eom(&mid, ctx.params, ctx.potential, ctx.forcing)?;
    let mut out = state.clone();
    for (i, b) in out.bodies.iter_mut().enumerate() {
        let bp = &ctx.params.bodies[i];
        b.q = b.q + d_mid.dq[i].scale(h);
        b.p = b.p + d_mid.dp[i].scale(h);
        let a2 = body_omega(mid.bodies[i].pi, bp.inv_inertia());
        b.r = exp_so3(a2.scale(h)).compose(&b.r);
        b.pi = b.pi + d_mid.dpi[i].scale(h);
    }
    out.t = state.t + h;
    Ok(out)
}

/// CF4 (Lie RK4): classical RK4 stages for the Euclidean coordinates;
/// R advanced by commutator-free exponentials of the stage angular
/// velocities, ending with
/// `exp(h/12 (3F1+2F2+2F3-F4))` then `exp(h/12 (-F1+2F2+2F3+3F4))`.
pub fn step_cf4(state: &SystemState, ctx: &StepContext) -> Result<SystemState> {
    let h = ctx.h;
    let n = state.n_bodies();
    let inv_j: Vec<[f64; 3]> = ctx.params.bodies.iter().map(|bp| bp.inv_inertia()).collect();

    let k1 = eom(state, ctx.params, ctx.potential, ctx.forcing)?;
    let a1: Vec<Vec3> =
        (0..n).map(|i| body_omega(state.bodies[i].pi, inv_j[i])).collect();

    let mut s2 = state.clone();
    for (i, b) in s2.bodies.iter_mut().enumerate() {
        b.q = b.q + k1.dq[i].scale(0.5 * h);
        b.p = b.p + k1.dp[i].scale(0.5 * h);
        b.r = exp_so3(a1[i].scale(0.5 * h)).compose(&b.r);
        b.pi = b.pi + k1.dpi[i].scale(0.5 * h);
    }
    let k2 = eom(&s2, ctx.params, ctx.potential, ctx.forcing)?;
    let a2: Vec<Vec3> = (0..n).map(|i| body_omega(s2.bodies[i].pi, inv_j[i])).collect();

    let mut s3 = state.clone();
    for (i, b) in s3.bodies.iter_mut().enumerate() {
        b.q = b.q + k2.dq[i].scale(0.5 * h);
        b.p = b.p + k2.dp[i].scale(0.5 * h);
        b.r = exp_so3(a2[i].scale(0.5 * h)).compose(&b.r);
        b.pi = b.pi + k2.dpi[i].scale(0.5 * h);
    }
    let k3 = eom(&s3, ctx.params, ctx.potential, ctx.forcing)?;
    let a3: Vec<Vec3> = (0..n).map(|i| body_omega(s3.bodies[i].pi, inv_j[i])).collect();

    let mut s4 = state.clone();
    for (i, b) in s4.bodies.iter_mut().enumerate() {
        b.q = b.q + k3.dq[i].scale(h);
        b.p = b.p + k3.dp[i].scale(h);
        // R^3 = exp((F3 - F1/2) h) R^2, where R^2 is the stage-3 attitude
        b.r = exp_so3((a3[i] - a1[i].scale(0.5)).scale(h)).compose(&s3.bodies[i].r);
        b.pi = b.pi + k3.dpi[i].scale(h);
    }
    let k4 = eom(&s4, ctx.params, ctx.potential, ctx.forcing)?;
    let a4: Vec<Vec3> = (0..n).map(|i| body_omega(s4.bodies[i].pi, inv_j[i])).collect();

    let mut out = state.clone();
    let w = h / 6.0;
    for (i, b) in out.bodies.iter_mut().enumerate() {
        b.q = b.q + (k1.dq[i] + k2.dq[i].scale(2.0) + k3.dq[i].scale(2.0) + k4.dq[i]).scale(w);
        b.p = b.p + (k1.dp[i] + k2.dp[i].scale(2.0) + k3.dp[i].scale(2.0) + k4.dp[i]).scale(w);
        b.pi =
            b.pi + (k1.dpi[i] + k2.dpi[i].scale(2.0) + k3.dpi[i].scale(2.0) + k4.dpi[i]).scale(w);
        let e = h / 12.0;
        let w_half =
            (a1[i].scale(3.0) + a2[i].scale(2.0) + a3[i].scale(2.0) - a4[i]).scale(e);
        let w_full =
            (a2[i].scale(2.0) + a3[i].scale(2.0) + a4[i].scale(3.0) - a1[i]).scale(e);
        let r_half = exp_so3(w_half).compose(&b.r);
        b.r = exp_so3(w_full).compose(&r_half);
    }
    out.t = state.t + h;
    Ok(out)
}

/// One step of the chosen scheme.
pub fn step(scheme: StepScheme, state: &SystemState, ctx: &StepContext) -> Result<SystemState> {
    match scheme {
        StepScheme::ExplicitEuler => step_euler(state, ctx),
        StepScheme::RK4 => step_rk4(state, ctx),
        StepScheme::Verlet => step_verlet(state, ctx),
        StepScheme::LieRK2 => step_cf2(state, ctx),
        StepScheme::LieRK4 => step_cf4(state, ctx),
        StepScheme::LieT2 => step_lie_t2(state, ctx),
    }
}

/// Which states a rollout keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    /// Initial state plus every step.
    All,
    /// Final state only.
    Last,
    /// Initial state, every k-th step, and the final state.
    Stride(usize),
}

/// `n` repeated steps. Any non-finite component aborts with the
/// offending 1-based step index.
pub fn rollout(
    scheme: StepScheme,
    state: &SystemState,
    ctx: &StepContext,
    n: usize,
    storage: Storage,
) -> Result<Vec<SystemState>> {
    if n == 0 {
        return Err(Error::InvalidParameter("rollout needs n >= 1".into()));
    }
    if let Storage::Stride(0) = storage {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    match storage {
        Storage::Last => {}
        _ => out.push(state.clone()),
    }
    let mut current = state.clone();
    for k in 1..=n {
        current = step(scheme, &current, ctx)?;
        if !current.is_finite() {
            return Err(Error::Divergence { step: k });
        }
        let keep = match storage {
            Storage::All => true,
            Storage::Last => k == n,
            Storage::Stride(s) => k % s == 0 || k == n,
        };
        if keep {
            out.push(current.clone());
        }
    }
    Ok(out)
}
