//! Taped mirrors of the integrator steps, used to differentiate the
//! rollout loss with respect to the network parameters.
//!
//! Every function here reproduces its untaped counterpart operation for
//! operation through the same kernels, so the taped forward pass is
//! bitwise identical to the plain simulation path. The parity tests at
//! the bottom assert exactly that for all six schemes.

use crate::autodiff::mlp::{mlp_forward_taped, mlp_input_gradient_taped, MlpNodes};
use crate::autodiff::tape::{NodeId, Tape};
use crate::error::Result;
use crate::geometry::SMALL_ANGLE;
use crate::integrators::StepScheme;
use crate::learning::model::{LearnedDynamics, F_OUTPUT_PER_BODY, V_INPUT_PER_BODY};
use crate::potentials::check_separation;
use crate::rigidbody::{SystemParams, SystemState};

const IDENTITY9: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// One body's phase-space coordinates as tape nodes
/// (q: 3, p: 3, r: 9 row-major, pi: 3).
#[derive(Debug, Clone, Copy)]
pub struct TapedBody {
    pub q: NodeId,
    pub p: NodeId,
    pub r: NodeId,
    pub pi: NodeId,
}

#[derive(Debug, Clone)]
pub struct TapedState {
    pub t: f64,
    pub bodies: Vec<TapedBody>,
}

impl TapedState {
    /// Registers a state's coordinates as non-differentiable constants.
    pub fn constants(tape: &mut Tape, state: &SystemState) -> TapedState {
        let bodies = state
            .bodies
            .iter()
            .map(|b| TapedBody {
                q: tape.constant(b.q.to_array().to_vec()),
                p: tape.constant(b.p.to_array().to_vec()),
                r: tape.constant(b.r.matrix().m.to_vec()),
                pi: tape.constant(b.pi.to_array().to_vec()),
            })
            .collect();
        TapedState { t: state.t, bodies }
    }

    pub fn is_finite(&self, tape: &Tape) -> bool {
        self.bodies.iter().all(|b| {
            [b.q, b.p, b.r, b.pi]
                .into_iter()
                .all(|id| tape.value(id).iter().all(|v| v.is_finite()))
        })
    }
}

/// The learned model's tape handles: network parameters as leaves,
/// normalization statistics as constants.
pub struct TapedModel<'a> {
    pub model: &'a LearnedDynamics,
    pub v_nodes: Option<MlpNodes>,
    pub v_mu: NodeId,
    pub v_inv_sigma: NodeId,
    pub f_nodes: Option<MlpNodes>,
    pub f_mu: NodeId,
    pub f_inv_sigma: NodeId,
    pub v_scale: NodeId,
    pub f_scale: NodeId,
}

impl<'a> TapedModel<'a> {
    pub fn register(tape: &mut Tape, model: &'a LearnedDynamics) -> TapedModel<'a> {
        let v_nodes = model.v_resid.as_ref().map(|net| MlpNodes::leaves(net, tape));
        let f_nodes = if model.conservative_only {
            None
        } else {
            model.forcing.as_ref().map(|net| MlpNodes::leaves(net, tape))
        };
        TapedModel {
            model,
            v_nodes,
            v_mu: tape.constant(model.v_norm.mu.clone()),
            v_inv_sigma: tape.constant(model.v_norm.inv_sigma.clone()),
            f_nodes,
            f_mu: tape.constant(model.f_norm.mu.clone()),
            f_inv_sigma: tape.constant(model.f_norm.inv_sigma.clone()),
            v_scale: tape.scalar(model.v_scale),
            f_scale: tape.scalar(model.f_scale),
        }
    }

    /// Leaf ids in the same order as
    /// [`LearnedDynamics::trainable_shapes`].
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        if let Some(n) = &self.v_nodes {
            ids.extend(n.ids());
        }
        if let Some(n) = &self.f_nodes {
            ids.extend(n.ids());
        }
        ids
    }
}

/// Taped Rodrigues exponential, branch-compatible with
/// [`crate::geometry::exp_so3`].
pub fn taped_exp_so3(tape: &mut Tape, w: NodeId) -> Result<NodeId> {
    let theta2 = tape.dot(w, w)?;
    let theta = tape.sqrt(theta2);
    let (a, b) = if tape.scalar_value(theta) < SMALL_ANGLE {
        let one = tape.scalar(1.0);
        let six = tape.scalar(6.0);
        let t6 = tape.div(theta2, six)?;
        let a = tape.sub(one, t6)?;
        let half = tape.scalar(0.5);
        let twenty_four = tape.scalar(24.0);
        let t24 = tape.div(theta2, twenty_four)?;
        let b = tape.sub(half, t24)?;
        (a, b)
    } else {
        let s = tape.sin(theta);
        let a = tape.div(s, theta)?;
        let one = tape.scalar(1.0);
        let c = tape.cos(theta);
        let omc = tape.sub(one, c)?;
        let b = tape.div(omc, theta2)?;
        (a, b)
    };
    let k = tape.hat(w)?;
    let k2 = tape.matmul(k, k, 3, 3, 3)?;
    let ka = tape.mul(k, a)?;
    let ident = tape.constant(IDENTITY9.to_vec());
    let ia = tape.add(ident, ka)?;
    let k2b = tape.mul(k2, b)?;
    tape.add(ia, k2b)
}

/// Taped axis-angle rotation with the same degenerate-case branch as
/// [`crate::geometry::rot_axis`].
pub fn taped_rot_axis(tape: &mut Tape, axis: NodeId, angle: NodeId) -> Result<NodeId> {
    let n = tape.norm(axis);
    if tape.scalar_value(n) == 0.0 || tape.scalar_value(angle) == 0.0 {
        return Ok(tape.constant(IDENTITY9.to_vec()));
    }
    let s = tape.div(angle, n)?;
    let w = tape.mul(axis, s)?;
    taped_exp_so3(tape, w)
}

pub fn taped_rot_y(tape: &mut Tape, angle: NodeId) -> Result<NodeId> {
    let s = tape.sin(angle);
    let c = tape.cos(angle);
    let ns = tape.neg(s);
    let z = tape.scalar(0.0);
    let o = tape.scalar(1.0);
    Ok(tape.concat(&[c, z, s, z, o, z, ns, z, c]))
}

pub fn taped_rot_z(tape: &mut Tape, angle: NodeId) -> Result<NodeId> {
    let s = tape.sin(angle);
    let c = tape.cos(angle);
    let ns = tape.neg(s);
    let z = tape.scalar(0.0);
    let o = tape.scalar(1.0);
    Ok(tape.concat(&[c, ns, z, s, c, z, z, z, o]))
}

/// grad_q and grad_r nodes of the learned potential (point-mass part
/// plus residual network), mirroring
/// [`crate::learning::model::LearnedPotential::evaluate`].
fn taped_potential_grads(
    tape: &mut Tape,
    tm: &TapedModel,
    q: &[NodeId],
    r: &[NodeId],
    params: &SystemParams,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let n = q.len();
    let zero3 = tape.constant(vec![0.0; 3]);
    let zero9 = tape.constant(vec![0.0; 9]);
    let mut gq = vec![zero3; n];
    let mut gr = vec![zero9; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = tape.sub(q[i], q[j])?;
            let r2 = tape.dot(d, d)?;
            check_separation(tape.scalar_value(r2), params.r_min, i, j)?;
            let rr = tape.sqrt(r2);
            let inv_r = tape.recip(rr);
            let c = params.g * params.bodies[i].mass * params.bodies[j].mass;
            let i2 = tape.mul(inv_r, inv_r)?;
            let i3 = tape.mul(i2, inv_r)?;
            let cn = tape.scalar(c);
            let gcoef = tape.mul(cn, i3)?;
            let dg = tape.mul(d, gcoef)?;
            gq[i] = tape.add(gq[i], dg)?;
            gq[j] = tape.sub(gq[j], dg)?;
        }
    }
    if let (Some(net), Some(nodes)) = (tm.model.v_resid.as_ref(), tm.v_nodes.as_ref()) {
        let mut parts = Vec::with_capacity(2 * n);
        for i in 0..n {
            parts.push(q[i]);
            parts.push(r[i]);
        }
        let x = tape.concat(&parts);
        let xm = tape.sub(x, tm.v_mu)?;
        let xn = tape.mul(xm, tm.v_inv_sigma)?;
        let gn = mlp_input_gradient_taped(net, nodes, tape, xn)?;
        let g = tape.mul(gn, tm.v_inv_sigma)?;
        let g = tape.mul(g, tm.v_scale)?;
        for i in 0..n {
            let base = i * V_INPUT_PER_BODY;
            let gqi = tape.slice(g, base, 3)?;
            gq[i] = tape.add(gq[i], gqi)?;
            let gri = tape.slice(g, base + 3, 9)?;
            gr[i] = tape.add(gr[i], gri)?;
        }
    }
    Ok((gq, gr))
}

/// Taped forcing evaluation, mirroring
/// [`crate::learning::model::LearnedForcing::evaluate`].
fn taped_forcing(
    tape: &mut Tape,
    tm: &TapedModel,
    q: &[NodeId],
    r: &[NodeId],
    p: &[NodeId],
    pi: &[NodeId],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let n = q.len();
    let net_and_nodes = if tm.model.conservative_only {
        None
    } else {
        tm.model.forcing.as_ref().zip(tm.f_nodes.as_ref())
    };
    let Some((net, nodes)) = net_and_nodes else {
        let zero3 = tape.constant(vec![0.0; 3]);
        return Ok((vec![zero3; n], vec![zero3; n]));
    };
    let mut parts = Vec::with_capacity(4 * n);
    for i in 0..n {
        parts.push(q[i]);
        parts.push(r[i]);
        parts.push(p[i]);
        parts.push(pi[i]);
    }
    let x = tape.concat(&parts);
    let xm = tape.sub(x, tm.f_mu)?;
    let xn = tape.mul(xm, tm.f_inv_sigma)?;
    let (y, _) = mlp_forward_taped(net, nodes, tape, xn)?;
    let y = tape.mul(y, tm.f_scale)?;
    let mut f_p = Vec::with_capacity(n);
    let mut f_pi = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * F_OUTPUT_PER_BODY;
        f_p.push(tape.slice(y, base, 3)?);
        f_pi.push(tape.slice(y, base + 3, 3)?);
    }
    Ok((f_p, f_pi))
}

fn qs(state: &TapedState) -> Vec<NodeId> {
    state.bodies.iter().map(|b| b.q).collect()
}
fn rs(state: &TapedState) -> Vec<NodeId> {
    state.bodies.iter().map(|b| b.r).collect()
}
fn ps(state: &TapedState) -> Vec<NodeId> {
    state.bodies.iter().map(|b| b.p).collect()
}
fn pis(state: &TapedState) -> Vec<NodeId> {
    state.bodies.iter().map(|b| b.pi).collect()
}

fn taped_torque(tape: &mut Tape, r: NodeId, grad_r: NodeId) -> Result<NodeId> {
    let rt = tape.transpose(r, 3, 3)?;
    let a = tape.matmul(rt, grad_r, 3, 3, 3)?;
    let at = tape.transpose(a, 3, 3)?;
    let skew = tape.sub(a, at)?;
    tape.vee(skew)
}

pub fn taped_flow_ke(
    tape: &mut Tape,
    state: &TapedState,
    params: &SystemParams,
    h: f64,
) -> Result<TapedState> {
    let mut out = state.clone();
    for (b, bp) in out.bodies.iter_mut().zip(&params.bodies) {
        let s = tape.scalar(h / bp.mass);
        let ps = tape.mul(b.p, s)?;
        b.q = tape.add(b.q, ps)?;
        let j1 = bp.inertia[0];
        let j3 = bp.inertia[2];
        let pi_norm = tape.norm(b.pi);
        let hn = tape.scalar(h);
        let nh = tape.mul(pi_norm, hn)?;
        let j1n = tape.scalar(j1);
        let angle = tape.div(nh, j1n)?;
        let r_pi = taped_rot_axis(tape, b.pi, angle)?;
        let factor = tape.scalar(1.0 / j3 - 1.0 / j1);
        let pi_z = tape.slice(b.pi, 2, 1)?;
        let theta = tape.mul(factor, pi_z)?;
        let th = tape.mul(theta, hn)?;
        let rz = taped_rot_z(tape, th)?;
        let rrpi = tape.matmul(b.r, r_pi, 3, 3, 3)?;
        b.r = tape.matmul(rrpi, rz, 3, 3, 3)?;
        let rzt = tape.transpose(rz, 3, 3)?;
        b.pi = tape.matmul(rzt, b.pi, 3, 3, 1)?;
    }
    Ok(out)
}

pub fn taped_flow_pe(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
    h: f64,
) -> Result<TapedState> {
    let (q, r) = (qs(state), rs(state));
    let (gq, gr) = taped_potential_grads(tape, tm, &q, &r, params)?;
    let mut out = state.clone();
    let hn = tape.scalar(h);
    for (i, b) in out.bodies.iter_mut().enumerate() {
        let gqh = tape.mul(gq[i], hn)?;
        b.p = tape.sub(b.p, gqh)?;
        let torque = taped_torque(tape, r[i], gr[i])?;
        let th = tape.mul(torque, hn)?;
        b.pi = tape.sub(b.pi, th)?;
    }
    Ok(out)
}

pub fn taped_flow_asym(
    tape: &mut Tape,
    state: &TapedState,
    params: &SystemParams,
    h: f64,
) -> Result<TapedState> {
    let mut out = state.clone();
    for (b, bp) in out.bodies.iter_mut().zip(&params.bodies) {
        let delta = 1.0 / bp.inertia[1] - 1.0 / bp.inertia[0];
        let dn = tape.scalar(delta);
        let pi_y = tape.slice(b.pi, 1, 1)?;
        let dp = tape.mul(dn, pi_y)?;
        let hn = tape.scalar(h);
        let angle = tape.mul(dp, hn)?;
        let ry = taped_rot_y(tape, angle)?;
        b.r = tape.matmul(ry, b.r, 3, 3, 3)?;
        let na = tape.neg(angle);
        let ryn = taped_rot_y(tape, na)?;
        b.pi = tape.matmul(ryn, b.pi, 3, 3, 1)?;
    }
    Ok(out)
}

pub fn taped_flow_force(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    h: f64,
) -> Result<TapedState> {
    let (q, r, p, pi) = (qs(state), rs(state), ps(state), pis(state));
    let (f_p, f_pi) = taped_forcing(tape, tm, &q, &r, &p, &pi)?;
    let mut out = state.clone();
    let hn = tape.scalar(h);
    for (i, b) in out.bodies.iter_mut().enumerate() {
        let fph = tape.mul(f_p[i], hn)?;
        b.p = tape.add(b.p, fph)?;
        let fpih = tape.mul(f_pi[i], hn)?;
        b.pi = tape.add(b.pi, fpih)?;
    }
    Ok(out)
}

pub fn taped_step_lie_t2(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
    h: f64,
) -> Result<TapedState> {
    let hh = 0.5 * h;
    let s = taped_flow_ke(tape, state, params, hh)?;
    let s = taped_flow_pe(tape, &s, tm, params, hh)?;
    let s = taped_flow_asym(tape, &s, params, hh)?;
    let s = taped_flow_force(tape, &s, tm, h)?;
    let s = taped_flow_asym(tape, &s, params, hh)?;
    let s = taped_flow_pe(tape, &s, tm, params, hh)?;
    let mut s = taped_flow_ke(tape, &s, params, hh)?;
    s.t = state.t + h;
    Ok(s)
}

struct TapedDerivs {
    dq: Vec<NodeId>,
    dp: Vec<NodeId>,
    dr: Vec<NodeId>,
    dpi: Vec<NodeId>,
}

fn taped_eom(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
) -> Result<TapedDerivs> {
    let n = state.bodies.len();
    let (q, r, p, pi) = (qs(state), rs(state), ps(state), pis(state));
    let (gq, gr) = taped_potential_grads(tape, tm, &q, &r, params)?;
    let (f_p, f_pi) = taped_forcing(tape, tm, &q, &r, &p, &pi)?;

    let mut d =
        TapedDerivs { dq: Vec::with_capacity(n), dp: Vec::with_capacity(n), dr: Vec::with_capacity(n), dpi: Vec::with_capacity(n) };
    for i in 0..n {
        let bp = &params.bodies[i];
        let inv_j = bp.inv_inertia();
        let ivn = tape.constant(inv_j.to_vec());
        let omega = tape.mul(pi[i], ivn)?;
        let ms = tape.scalar(1.0 / bp.mass);
        d.dq.push(tape.mul(p[i], ms)?);
        let ngq = tape.neg(gq[i]);
        d.dp.push(tape.add(ngq, f_p[i])?);
        let hw = tape.hat(omega)?;
        d.dr.push(tape.matmul(r[i], hw, 3, 3, 3)?);
        let torque = taped_torque(tape, r[i], gr[i])?;
        let cr = tape.cross(pi[i], omega)?;
        let cmt = tape.sub(cr, torque)?;
        d.dpi.push(tape.add(cmt, f_pi[i])?);
    }
    Ok(d)
}

fn taped_add_scaled(
    tape: &mut Tape,
    state: &TapedState,
    d: &TapedDerivs,
    scale: f64,
) -> Result<TapedState> {
    let mut out = state.clone();
    let s = tape.scalar(scale);
    for (i, b) in out.bodies.iter_mut().enumerate() {
        let dq = tape.mul(d.dq[i], s)?;
        b.q = tape.add(b.q, dq)?;
        let dp = tape.mul(d.dp[i], s)?;
        b.p = tape.add(b.p, dp)?;
        let dr = tape.mul(d.dr[i], s)?;
        b.r = tape.add(b.r, dr)?;
        let dpi = tape.mul(d.dpi[i], s)?;
        b.pi = tape.add(b.pi, dpi)?;
    }
    Ok(out)
}

pub fn taped_step_euler(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
    h: f64,
) -> Result<TapedState> {
    let d = taped_eom(tape, state, tm, params)?;
    let mut out = taped_add_scaled(tape, state, &d, h)?;
    out.t = state.t + h;
    Ok(out)
}

/// The shared `(k1 + 2 k2 + 2 k3 + k4) * w` update of the two
/// fourth-order schemes.
fn taped_rk4_combine(
    tape: &mut Tape,
    base: NodeId,
    k1: NodeId,
    k2: NodeId,
    k3: NodeId,
    k4: NodeId,
    w: f64,
) -> Result<NodeId> {
    let two = tape.scalar(2.0);
    let k22 = tape.mul(k2, two)?;
    let t = tape.add(k1, k22)?;
    let k32 = tape.mul(k3, two)?;
    let t = tape.add(t, k32)?;
    let t = tape.add(t, k4)?;
    let wn = tape.scalar(w);
    let tw = tape.mul(t, wn)?;
    tape.add(base, tw)
}

pub fn taped_step_rk4(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
    h: f64,
) -> Result<TapedState> {
    let k1 = taped_eom(tape, state, tm, params)?;
    let s2 = taped_add_scaled(tape, state, &k1, 0.5 * h)?;
    let k2 = taped_eom(tape, &s2, tm, params)?;
    let s3 = taped_add_scaled(tape, state, &k2, 0.5 * h)?;
    let k3 = taped_eom(tape, &s3, tm, params)?;
    let s4 = taped_add_scaled(tape, state, &k3, h)?;
    let k4 = taped_eom(tape, &s4, tm, params)?;

    let mut out = state.clone();
    let w = h / 6.0;
    for (i, b) in out.bodies.iter_mut().enumerate() {
        b.q = taped_rk4_combine(tape, b.q, k1.dq[i], k2.dq[i], k3.dq[i], k4.dq[i], w)?;
        b.p = taped_rk4_combine(tape, b.p, k1.dp[i], k2.dp[i], k3.dp[i], k4.dp[i], w)?;
        b.r = taped_rk4_combine(tape, b.r, k1.dr[i], k2.dr[i], k3.dr[i], k4.dr[i], w)?;
        b.pi = taped_rk4_combine(tape, b.pi, k1.dpi[i], k2.dpi[i], k3.dpi[i], k4.dpi[i], w)?;
    }
    out.t = state.t + h;
    Ok(out)
}

fn taped_verlet_drift(
    tape: &mut Tape,
    state: &mut TapedState,
    params: &SystemParams,
    drift: f64,
) -> Result<()> {
    for (b, bp) in state.bodies.iter_mut().zip(&params.bodies) {
        let s = tape.scalar(drift / bp.mass);
        let ps = tape.mul(b.p, s)?;
        b.q = tape.add(b.q, ps)?;
        let ivn = tape.constant(bp.inv_inertia().to_vec());
        let omega = tape.mul(b.pi, ivn)?;
        let hw = tape.hat(omega)?;
        let rhw = tape.matmul(b.r, hw, 3, 3, 3)?;
        let dn = tape.scalar(drift);
        let dr = tape.mul(rhw, dn)?;
        b.r = tape.add(b.r, dr)?;
    }
    Ok(())
}

pub fn taped_step_verlet(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
    h: f64,
    verlet_literal: bool,
) -> Result<TapedState> {
    let drift = if verlet_literal { h } else { 0.5 * h };

    let mut mid = state.clone();
    taped_verlet_drift(tape, &mut mid, params, drift)?;

    // full kick at the drifted configuration with pre-kick momenta
    let (q, r, p, pi) = (qs(&mid), rs(&mid), ps(&mid), pis(&mid));
    let (gq, gr) = taped_potential_grads(tape, tm, &q, &r, params)?;
    let (f_p, f_pi) = taped_forcing(tape, tm, &q, &r, &p, &pi)?;
    let hn = tape.scalar(h);
    for (i, b) in mid.bodies.iter_mut().enumerate() {
        let bp = &params.bodies[i];
        let ngq = tape.neg(gq[i]);
        let kick = tape.add(ngq, f_p[i])?;
        let kickh = tape.mul(kick, hn)?;
        b.p = tape.add(b.p, kickh)?;
        let ivn = tape.constant(bp.inv_inertia().to_vec());
        let omega = tape.mul(pi[i], ivn)?;
        let torque = taped_torque(tape, r[i], gr[i])?;
        let cr = tape.cross(pi[i], omega)?;
        let cmt = tape.sub(cr, torque)?;
        let kpi = tape.add(cmt, f_pi[i])?;
        let kpih = tape.mul(kpi, hn)?;
        b.pi = tape.add(b.pi, kpih)?;
    }

    taped_verlet_drift(tape, &mut mid, params, drift)?;
    mid.t = state.t + h;
    Ok(mid)
}

pub fn taped_step_cf2(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
    h: f64,
) -> Result<TapedState> {
    let d0 = taped_eom(tape, state, tm, params)?;

    let mut mid = state.clone();
    let hh = tape.scalar(0.5 * h);
    for (i, b) in mid.bodies.iter_mut().enumerate() {
        let bp = &params.bodies[i];
        let dq = tape.mul(d0.dq[i], hh)?;
        b.q = tape.add(b.q, dq)?;
        let dp = tape.mul(d0.dp[i], hh)?;
        b.p = tape.add(b.p, dp)?;
        let ivn = tape.constant(bp.inv_inertia().to_vec());
        let a1 = tape.mul(state.bodies[i].pi, ivn)?;
        let a1h = tape.mul(a1, hh)?;
        let e = taped_exp_so3(tape, a1h)?;
        b.r = tape.matmul(e, b.r, 3, 3, 3)?;
        let dpi = tape.mul(d0.dpi[i], hh)?;
        b.pi = tape.add(b.pi, dpi)?;
    }

    let d_mid = taped_eom(tape, &mid, tm, params)?;
    let mut out = state.clone();
    let hn = tape.scalar(h);
    for (i, b) in out.bodies.iter_mut().enumerate() {
        let bp = &params.bodies[i];
        let dq = tape.mul(d_mid.dq[i], hn)?;
        b.q = tape.add(b.q, dq)?;
        let dp = tape.mul(d_mid.dp[i], hn)?;
        b.p = tape.add(b.p, dp)?;
        let ivn = tape.constant(bp.inv_inertia().to_vec());
        let a2 = tape.mul(mid.bodies[i].pi, ivn)?;
        let a2h = tape.mul(a2, hn)?;
        let e = taped_exp_so3(tape, a2h)?;
        b.r = tape.matmul(e, b.r, 3, 3, 3)?;
        let dpi = tape.mul(d_mid.dpi[i], hn)?;
        b.pi = tape.add(b.pi, dpi)?;
    }
    out.t = state.t + h;
    Ok(out)
}

pub fn taped_step_cf4(
    tape: &mut Tape,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
    h: f64,
) -> Result<TapedState> {
    let n = state.bodies.len();
    let inv_j: Vec<NodeId> = params
        .bodies
        .iter()
        .map(|bp| tape.constant(bp.inv_inertia().to_vec()))
        .collect();
    let hh = tape.scalar(0.5 * h);
    let hn = tape.scalar(h);

    let k1 = taped_eom(tape, state, tm, params)?;
    let a1: Vec<NodeId> = (0..n)
        .map(|i| tape.mul(state.bodies[i].pi, inv_j[i]))
        .collect::<Result<_>>()?;

    let mut s2 = state.clone();
    for (i, b) in s2.bodies.iter_mut().enumerate() {
        let dq = tape.mul(k1.dq[i], hh)?;
        b.q = tape.add(b.q, dq)?;
        let dp = tape.mul(k1.dp[i], hh)?;
        b.p = tape.add(b.p, dp)?;
        let a1h = tape.mul(a1[i], hh)?;
        let e = taped_exp_so3(tape, a1h)?;
        b.r = tape.matmul(e, b.r, 3, 3, 3)?;
        let dpi = tape.mul(k1.dpi[i], hh)?;
        b.pi = tape.add(b.pi, dpi)?;
    }
    let k2 = taped_eom(tape, &s2, tm, params)?;
    let a2: Vec<NodeId> =
        (0..n).map(|i| tape.mul(s2.bodies[i].pi, inv_j[i])).collect::<Result<_>>()?;

    let mut s3 = state.clone();
    for (i, b) in s3.bodies.iter_mut().enumerate() {
        let dq = tape.mul(k2.dq[i], hh)?;
        b.q = tape.add(b.q, dq)?;
        let dp = tape.mul(k2.dp[i], hh)?;
        b.p = tape.add(b.p, dp)?;
        let a2h = tape.mul(a2[i], hh)?;
        let e = taped_exp_so3(tape, a2h)?;
        b.r = tape.matmul(e, b.r, 3, 3, 3)?;
        let dpi = tape.mul(k2.dpi[i], hh)?;
        b.pi = tape.add(b.pi, dpi)?;
    }
    let k3 = taped_eom(tape, &s3, tm, params)?;
    let a3: Vec<NodeId> =
        (0..n).map(|i| tape.mul(s3.bodies[i].pi, inv_j[i])).collect::<Result<_>>()?;

    let mut s4 = state.clone();
    let half = tape.scalar(0.5);
    for (i, b) in s4.bodies.iter_mut().enumerate() {
        let dq = tape.mul(k3.dq[i], hn)?;
        b.q = tape.add(b.q, dq)?;
        let dp = tape.mul(k3.dp[i], hn)?;
        b.p = tape.add(b.p, dp)?;
        let a1half = tape.mul(a1[i], half)?;
        let diff = tape.sub(a3[i], a1half)?;
        let w = tape.mul(diff, hn)?;
        let e = taped_exp_so3(tape, w)?;
        b.r = tape.matmul(e, s3.bodies[i].r, 3, 3, 3)?;
        let dpi = tape.mul(k3.dpi[i], hn)?;
        b.pi = tape.add(b.pi, dpi)?;
    }
    let k4 = taped_eom(tape, &s4, tm, params)?;
    let a4: Vec<NodeId> =
        (0..n).map(|i| tape.mul(s4.bodies[i].pi, inv_j[i])).collect::<Result<_>>()?;

    let mut out = state.clone();
    let w = h / 6.0;
    let e = h / 12.0;
    let en = tape.scalar(e);
    let two = tape.scalar(2.0);
    let three = tape.scalar(3.0);
    for (i, b) in out.bodies.iter_mut().enumerate() {
        b.q = taped_rk4_combine(tape, b.q, k1.dq[i], k2.dq[i], k3.dq[i], k4.dq[i], w)?;
        b.p = taped_rk4_combine(tape, b.p, k1.dp[i], k2.dp[i], k3.dp[i], k4.dp[i], w)?;
        b.pi = taped_rk4_combine(tape, b.pi, k1.dpi[i], k2.dpi[i], k3.dpi[i], k4.dpi[i], w)?;
        let a13 = tape.mul(a1[i], three)?;
        let a22 = tape.mul(a2[i], two)?;
        let t = tape.add(a13, a22)?;
        let a32 = tape.mul(a3[i], two)?;
        let t = tape.add(t, a32)?;
        let t = tape.sub(t, a4[i])?;
        let w_half = tape.mul(t, en)?;
        let a22b = tape.mul(a2[i], two)?;
        let a32b = tape.mul(a3[i], two)?;
        let t = tape.add(a22b, a32b)?;
        let a43 = tape.mul(a4[i], three)?;
        let t = tape.add(t, a43)?;
        let t = tape.sub(t, a1[i])?;
        let w_full = tape.mul(t, en)?;
        let eh = taped_exp_so3(tape, w_half)?;
        let r_half = tape.matmul(eh, b.r, 3, 3, 3)?;
        let ef = taped_exp_so3(tape, w_full)?;
        b.r = tape.matmul(ef, r_half, 3, 3, 3)?;
    }
    out.t = state.t + h;
    Ok(out)
}

/// One taped step of the chosen scheme.
#[allow(clippy::too_many_arguments)]
pub fn taped_step(
    tape: &mut Tape,
    scheme: StepScheme,
    state: &TapedState,
    tm: &TapedModel,
    params: &SystemParams,
    h: f64,
    verlet_literal: bool,
) -> Result<TapedState> {
    match scheme {
        StepScheme::ExplicitEuler => taped_step_euler(tape, state, tm, params, h),
        StepScheme::RK4 => taped_step_rk4(tape, state, tm, params, h),
        StepScheme::Verlet => taped_step_verlet(tape, state, tm, params, h, verlet_literal),
        StepScheme::LieRK2 => taped_step_cf2(tape, state, tm, params, h),
        StepScheme::LieRK4 => taped_step_cf4(tape, state, tm, params, h),
        StepScheme::LieT2 => taped_step_lie_t2(tape, state, tm, params, h),
    }
}
