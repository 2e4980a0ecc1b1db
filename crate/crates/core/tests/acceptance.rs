//! Acceptance gate: one integration test per criterion. Each test
//! prints a single `criterion N (...): PASS` line with the measured
//! numbers on success; a failed criterion shows up as the failing test.

use std::path::Path;

use liet2::autodiff::{NodeId, Tape};
use liet2::config::RunConfig;
use liet2::geometry::{orthonormality_defect, rot_x, rot_y, Mat3, Rotation, Vec3};
use liet2::integrators::{
    flow_asym, flow_ke, rollout, step, StepContext, StepScheme, Storage,
};
use liet2::learning::dataset::{generate_dataset, load_trajectory, save_trajectory};
use liet2::learning::model::{InputNorm, LearnedDynamics};
use liet2::learning::taped::{taped_step, TapedModel, TapedState};
use liet2::learning::train::{
    baseline_train_matrix, init_model, predict_rollout, srnn_loss, train, TrainConfig,
};
use liet2::metrics::{
    convergence_csv, convergence_study, evaluate_model, metric_trajectory,
    parse_convergence_csv,
};
use liet2::potentials::{
    v_pointcloud_oracle, BodyShape, CompositePotential, PointMassGravity, PotentialModel,
    QuadrupoleResidual, ZeroForcing, ZeroPotential,
};
use liet2::rigidbody::{BodyParams, BodyState, SystemParams, SystemState};

fn pass(criterion: usize, name: &str, detail: &str) {
    println!("criterion {criterion} ({name}): PASS - {detail}");
}

/// Free asymmetric rigid body with J = diag(1, 2, 3) and order-one spin.
fn free_asymmetric_body() -> (SystemState, SystemParams) {
    let params =
        SystemParams::new(vec![BodyParams::new(1.0, [1.0, 2.0, 3.0]).unwrap()], 1.0).unwrap();
    let state = SystemState {
        t: 0.0,
        bodies: vec![BodyState {
            q: Vec3::ZERO,
            p: Vec3::new(0.1, -0.2, 0.3),
            r: Rotation::IDENTITY,
            pi: Vec3::new(10.0, 7.0, 4.0),
        }],
    };
    (state, params)
}

fn quadrupole_truth() -> CompositePotential {
    CompositePotential::new(vec![Box::new(PointMassGravity), Box::new(QuadrupoleResidual)])
        .unwrap()
}

/// Oblate primary (symmetry axis = orbit normal) with a spherical
/// secondary on a near-circular orbit: axisymmetric bodies, so the
/// split KE flow is exact and the quadrupole torque vanishes.
fn axisymmetric_two_body() -> (SystemState, SystemParams) {
    let params = SystemParams::new(
        vec![
            BodyParams::new(1.0, [0.04, 0.04, 0.032]).unwrap(),
            BodyParams::new(1e-3, [0.01, 0.01, 0.01]).unwrap(),
        ],
        1.0,
    )
    .unwrap();
    let v = (1.0f64 / 2.0).sqrt();
    let state = SystemState {
        t: 0.0,
        bodies: vec![
            BodyState {
                q: Vec3::ZERO,
                p: Vec3::new(0.0, -1e-3 * v, 0.0),
                r: Rotation::IDENTITY,
                pi: Vec3::new(0.0, 0.0, 0.004),
            },
            BodyState {
                q: Vec3::new(2.0, 0.0, 0.0),
                p: Vec3::new(0.0, 1e-3 * v, 0.0),
                r: Rotation::IDENTITY,
                pi: Vec3::new(0.002, 0.001, 0.003),
            },
        ],
    };
    (state, params)
}

/// Two-body system with a tilted oblate secondary: translation and
/// rotation couple through the quadrupole torque.
fn coupled_two_body() -> (SystemState, SystemParams) {
    let params = SystemParams::new(
        vec![
            BodyParams::new(1.0, [0.4, 0.4, 0.4]).unwrap(),
            BodyParams::new(1e-3, [2e-4, 2e-4, 1.2e-4]).unwrap(),
        ],
        1.0,
    )
    .unwrap();
    let v = (1.0f64 / 2.0).sqrt();
    let state = SystemState {
        t: 0.0,
        bodies: vec![
            BodyState {
                q: Vec3::ZERO,
                p: Vec3::new(0.0, -1e-3 * v, 0.0),
                r: Rotation::IDENTITY,
                pi: Vec3::new(0.0, 0.0, 0.004),
            },
            BodyState {
                q: Vec3::new(2.0, 0.0, 0.0),
                p: Vec3::new(0.0, 1e-3 * v, 0.0),
                r: rot_x(0.4),
                pi: Vec3::new(0.0, 0.0, 6e-5),
            },
        ],
    };
    (state, params)
}

/// Spin-free point-mass two-body orbit: the rotation sector is inert,
/// so every scheme converges to the same flat limit.
fn flat_two_body() -> (SystemState, SystemParams) {
    let (m1, m2, d) = (1.0, 0.5, 1.0);
    let params = SystemParams::new(
        vec![
            BodyParams::new(m1, [1.0; 3]).unwrap(),
            BodyParams::new(m2, [1.0; 3]).unwrap(),
        ],
        1.0,
    )
    .unwrap();
    let total = m1 + m2;
    let omega = (total / (d * d * d) as f64).sqrt();
    let q1 = Vec3::new(d * m2 / total, 0.0, 0.0);
    let q2 = Vec3::new(-d * m1 / total, 0.0, 0.0);
    let state = SystemState {
        t: 0.0,
        bodies: vec![
            BodyState {
                q: q1,
                p: Vec3::new(0.0, omega * q1.x * m1, 0.0),
                r: Rotation::IDENTITY,
                pi: Vec3::ZERO,
            },
            BodyState {
                q: q2,
                p: Vec3::new(0.0, omega * q2.x * m2, 0.0),
                r: Rotation::IDENTITY,
                pi: Vec3::ZERO,
            },
        ],
    };
    (state, params)
}

// criterion 1: over 1e5 steps of a free asymmetric body at h = 1e-2,
// the Lie-group schemes keep the max orthonormality defect <= 1e-9
// while the flat schemes exceed 1e-6.
#[test]
fn criterion_1_manifold_preservation() {
    let (state, params) = free_asymmetric_body();
    let ctx = StepContext::new(&params, &ZeroPotential, &ZeroForcing, 1e-2);
    let mut detail = String::new();
    for scheme in StepScheme::ALL {
        let preserving = scheme.is_lie_group_preserving();
        let mut s = state.clone();
        let mut max_defect = 0.0f64;
        for _ in 0..100_000 {
            match step(scheme, &s, &ctx) {
                Ok(next) => s = next,
                Err(_) => {
                    // a blow-up counts as (gross) manifold departure
                    max_defect = f64::INFINITY;
                    break;
                }
            }
            for b in &s.bodies {
                let d = orthonormality_defect(b.r.matrix());
                if d.is_nan() || d > max_defect {
                    max_defect = if d.is_nan() { f64::INFINITY } else { d };
                }
            }
            if !preserving && max_defect > 1e-3 {
                break; // already two orders past the required threshold
            }
        }
        if preserving {
            assert!(
                max_defect <= 1e-9,
                "{scheme}: max orthonormality defect {max_defect:.3e} > 1e-9"
            );
        } else {
            assert!(
                max_defect > 1e-6,
                "{scheme}: max orthonormality defect {max_defect:.3e} unexpectedly <= 1e-6"
            );
        }
        detail.push_str(&format!("{scheme} {max_defect:.2e}; "));
    }
    pass(1, "manifold preservation", &detail);
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

/// Relative energy-error series over `n` steps.
fn energy_series(
    scheme: StepScheme,
    state: &SystemState,
    params: &SystemParams,
    potential: &dyn PotentialModel,
    h: f64,
    n: usize,
) -> Vec<f64> {
    let ctx = StepContext::new(params, potential, &ZeroForcing, h);
    let h0 = liet2::rigidbody::hamiltonian(state, params, potential).unwrap();
    let mut s = state.clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        s = step(scheme, &s, &ctx).unwrap();
        let e = liet2::rigidbody::hamiltonian(&s, params, potential).unwrap();
        out.push((e - h0) / h0.abs());
    }
    out
}

// criterion 2: long-horizon energy behavior on a two-body rigid
// system. LieT2's relative energy error stays bounded with a secular
// slope at least 10x smaller than RK4's, and halving h shrinks the
// LieT2 error amplitude by the second-order factor of ~4.
#[test]
fn criterion_2_energy_behavior() {
    let (state, params) = axisymmetric_two_body();
    let pot = quadrupole_truth();
    let n = 100_000;
    let h = 0.1;
    let lie = energy_series(StepScheme::LieT2, &state, &params, &pot, h, n);
    let lie_half = energy_series(StepScheme::LieT2, &state, &params, &pot, h / 2.0, n);
    let rk4 = energy_series(StepScheme::RK4, &state, &params, &pot, h, n);

    let amp = |e: &[f64]| e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let slope = |e: &[f64], h: f64| {
        let t: Vec<f64> = (1..=e.len()).map(|i| i as f64 * h).collect();
        least_squares_slope(&t, e)
    };

    let lie_amp = amp(&lie);
    let lie_half_amp = amp(&lie_half);
    let rk4_slope = slope(&rk4, h);
    let lie_slope = slope(&lie, h);

    assert!(lie_amp < 1e-4, "LieT2 energy error not bounded small: {lie_amp:.3e}");
    assert!(
        lie_slope.abs() < 0.1 * rk4_slope.abs(),
        "LieT2 secular slope {lie_slope:.3e} not < 0.1x RK4 slope {rk4_slope:.3e}"
    );
    let ratio = lie_amp / lie_half_amp;
    assert!(
        (3.0..=5.0).contains(&ratio),
        "halving h changed LieT2 amplitude by {ratio:.2}, expected [3, 5]"
    );
    pass(
        2,
        "energy behavior",
        &format!(
            "LieT2 amp {lie_amp:.2e}, slope {lie_slope:.2e}; RK4 slope {rk4_slope:.2e}; h/2 amplitude ratio {ratio:.2}"
        ),
    );
}

// criterion 3: measured convergence orders. Euler, RK4, CF2 and LieT2
// are measured on a rotation-coupled problem; naive Verlet and CF4 on
// the spin-free flat problem where their textbook orders apply.
#[test]
fn criterion_3_convergence_orders() {
    let (init, params) = coupled_two_body();
    let pot = quadrupole_truth();
    let coupled = convergence_study(
        &params,
        &pot,
        &init,
        &[StepScheme::ExplicitEuler, StepScheme::RK4, StepScheme::LieRK2, StepScheme::LieT2],
        &[0.08, 0.04, 0.02, 0.01],
        0.8,
        5e-4,
    )
    .unwrap();
    let (finit, fparams) = flat_two_body();
    let flat = convergence_study(
        &fparams,
        &PointMassGravity,
        &finit,
        &[StepScheme::Verlet, StepScheme::LieRK4],
        &[0.04, 0.02, 0.01, 0.005],
        0.8,
        5e-5,
    )
    .unwrap();

    let lookup = |table: &liet2::metrics::ConvergenceTable, scheme: StepScheme| -> f64 {
        table.slopes.iter().find(|(s, _)| *s == scheme).unwrap().1
    };
    let mut detail = String::new();
    for (slope, expect, tol, name) in [
        (lookup(&coupled, StepScheme::ExplicitEuler), 1.0, 0.15, "euler"),
        (lookup(&coupled, StepScheme::RK4), 4.0, 0.2, "rk4"),
        (lookup(&coupled, StepScheme::LieRK2), 2.0, 0.15, "lie-rk2"),
        (lookup(&coupled, StepScheme::LieT2), 2.0, 0.15, "lie-t2"),
        (lookup(&flat, StepScheme::Verlet), 2.0, 0.15, "verlet"),
        (lookup(&flat, StepScheme::LieRK4), 4.0, 0.2, "lie-rk4"),
    ] {
        assert!(
            (slope - expect).abs() <= tol,
            "{name}: measured order {slope:.3}, expected {expect} +/- {tol}"
        );
        detail.push_str(&format!("{name} {slope:.2}; "));
    }
    pass(3, "convergence orders", &detail);
}

fn max_abs_diff(a: &SystemState, b: &SystemState) -> f64 {
    let mut m = 0.0f64;
    for (x, y) in a.bodies.iter().zip(&b.bodies) {
        m = m.max((x.q - y.q).norm());
        m = m.max((x.p - y.p).norm());
        m = m.max(x.r.matrix().sub(y.r.matrix()).frobenius_norm());
        m = m.max((x.pi - y.pi).norm());
    }
    m
}

// criterion 4: exact-flow identities of the splitting pieces and
// forward-backward symmetry of the composed LieT2 step.
#[test]
fn criterion_4_exact_flow_identities() {
    // (a) the asymmetry correction is the identity for J1 = J2
    let params =
        SystemParams::new(vec![BodyParams::new(1.0, [0.5, 0.5, 0.3]).unwrap()], 1.0).unwrap();
    let state = SystemState {
        t: 0.0,
        bodies: vec![BodyState {
            q: Vec3::new(0.3, -0.1, 0.2),
            p: Vec3::new(0.05, 0.02, -0.04),
            r: rot_x(0.7).compose(&rot_y(0.3)),
            pi: Vec3::new(0.3, -0.2, 0.5),
        }],
    };
    let after = flow_asym(&state, &params, 0.37);
    let asym_diff = max_abs_diff(&state, &after);
    assert!(asym_diff <= 1e-15, "flow_asym not identity for J1 = J2: {asym_diff:.3e}");

    // (b) the KE flow conserves |Pi| and its own (symmetric-top)
    // kinetic Hamiltonian to roundoff per step
    let (mut s, aparams) = free_asymmetric_body();
    let [j1, _, j3] = aparams.bodies[0].inertia;
    let mass = aparams.bodies[0].mass;
    let h_ke = |b: &BodyState| {
        b.p.dot(b.p) / (2.0 * mass)
            + (b.pi.x * b.pi.x + b.pi.y * b.pi.y) / (2.0 * j1)
            + b.pi.z * b.pi.z / (2.0 * j3)
    };
    let mut max_pi_drift = 0.0f64;
    let mut max_h_drift = 0.0f64;
    for _ in 0..1000 {
        let pi0 = s.bodies[0].pi.norm();
        let e0 = h_ke(&s.bodies[0]);
        s = flow_ke(&s, &aparams, 0.01);
        max_pi_drift = max_pi_drift.max((s.bodies[0].pi.norm() - pi0).abs() / pi0);
        max_h_drift = max_h_drift.max((h_ke(&s.bodies[0]) - e0).abs() / e0.abs());
    }
    assert!(max_pi_drift <= 1e-12, "|Pi| drift per KE step {max_pi_drift:.3e}");
    assert!(max_h_drift <= 1e-12, "H_KE drift per KE step {max_h_drift:.3e}");

    // (c) LieT2 forward-backward symmetry with the full potential
    let (init, tparams) = axisymmetric_two_body();
    let pot = quadrupole_truth();
    let fwd = StepContext::new(&tparams, &pot, &ZeroForcing, 0.05);
    let bwd = StepContext::new(&tparams, &pot, &ZeroForcing, -0.05);
    let mut s = init.clone();
    for _ in 0..20 {
        s = step(StepScheme::LieT2, &s, &fwd).unwrap();
    }
    for _ in 0..20 {
        s = step(StepScheme::LieT2, &s, &bwd).unwrap();
    }
    // relative to the state scale (|q| ~ 2 dominates)
    let scale = init
        .bodies
        .iter()
        .fold(1.0f64, |m, b| m.max(b.q.norm()).max(b.p.norm()).max(b.pi.norm()));
    let fb = max_abs_diff(&init, &s) / scale;
    assert!(fb <= 1e-10, "forward-backward relative defect {fb:.3e} > 1e-10");

    pass(
        4,
        "exact-flow identities",
        &format!(
            "asym identity {asym_diff:.1e}; |Pi| drift {max_pi_drift:.1e}; H_KE drift {max_h_drift:.1e}; fwd-bwd {fb:.1e}"
        ),
    );
}

// criterion 5: the analytic quadrupole residual matches a brute-force
// point-cloud oracle to 1% of the residual magnitude at a/r ~ 0.01,
// and the oracle self-converges under 8x cloud refinement.
#[test]
fn criterion_5_multipole_oracle() {
    let extended = BodyParams::new(1.0, [3e-4, 2.5e-4, 2e-4]).unwrap();
    let companion = BodyParams::new(0.8, [1e-6; 3]).unwrap();
    let params = SystemParams::new(vec![extended.clone(), companion.clone()], 1.0).unwrap();
    let q = [Vec3::ZERO, Vec3::new(2.0, 0.0, 0.0)];
    let rot = rot_x(0.3).compose(&rot_y(0.2));
    let r = [*rot.matrix(), Mat3::IDENTITY];

    let v_point = PointMassGravity.evaluate(&q, &r, &params).unwrap().value;
    let v_quad = QuadrupoleResidual.evaluate(&q, &r, &params).unwrap().value;

    let residual = |n: usize| -> f64 {
        let shapes = [BodyShape::cuboid(&extended, n).unwrap(), BodyShape::point(0.8)];
        v_pointcloud_oracle(&q, &r, &shapes, params.g).unwrap() - v_point
    };
    let res4 = residual(4);
    let res8 = residual(8);
    let res16 = residual(16); // 8x the points of n = 8
    let rel_err = (v_quad - res16).abs() / res16.abs();
    assert!(rel_err <= 0.01, "quadrupole vs oracle: {rel_err:.4} of residual magnitude");
    assert!(
        (res16 - res8).abs() < (res8 - res4).abs(),
        "oracle not self-converging: |d16-8| {:.3e} >= |d8-4| {:.3e}",
        (res16 - res8).abs(),
        (res8 - res4).abs()
    );
    pass(
        5,
        "multipole oracle",
        &format!(
            "residual {res16:.3e}, quadrupole error {:.2e} of residual, refinement delta {:.1e} -> {:.1e}",
            rel_err,
            (res8 - res4).abs(),
            (res16 - res8).abs()
        ),
    );
}

/// Central-difference check of every leaf gradient of a scalar-valued
/// tape program.
fn fd_check_program<F>(inputs: &[Vec<f64>], build: F)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.grad(loss).unwrap();
    for (i, v) in inputs.iter().enumerate() {
        for j in 0..v.len() {
            let eps = 1e-6 * v[j].abs().max(1.0);
            let eval = |delta: f64| -> f64 {
                let mut t = Tape::new();
                let ids2: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let mut w = w.clone();
                        if k == i {
                            w[j] += delta;
                        }
                        t.leaf(w)
                    })
                    .collect();
                let l = build(&mut t, &ids2);
                t.scalar_value(l)
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = grads.wrt(ids[i])[j];
            let scale = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                (fd - an).abs() <= 1e-5 * scale,
                "input {i}[{j}]: analytic {an:.9e} vs central FD {fd:.9e}"
            );
        }
    }
}

// criterion 6: every AD primitive and the full loss gradient through a
// multi-step rollout match central finite differences at <= 1e-5
// relative error.
#[test]
fn criterion_6_gradient_correctness() {
    let a = vec![0.7, -0.4, 0.9];
    let b = vec![-0.3, 0.8, 0.5];
    let c = vec![1.4, 2.1, 0.9]; // away from zero for div/recip/sqrt
    let m1 = vec![0.3, -0.7, 0.2, 0.9, 0.4, -0.5]; // 2x3
    let m2 = vec![0.8, 0.1, -0.6, 0.2, 0.5, -0.3]; // 2x3

    // add, sub, neg, mul, div, sum
    fd_check_program(&[a.clone(), b.clone(), c.clone()], |t, ids| {
        let s = t.add(ids[0], ids[1]).unwrap();
        let d = t.neg(ids[1]);
        let d = t.sub(ids[0], d).unwrap();
        let p = t.mul(s, d).unwrap();
        let q = t.div(p, ids[2]).unwrap();
        t.sum(q)
    });
    // matmul, transpose
    fd_check_program(&[m1.clone(), m2.clone()], |t, ids| {
        let bt = t.transpose(ids[1], 2, 3).unwrap();
        let mm = t.matmul(ids[0], bt, 2, 3, 2).unwrap();
        t.sum(mm)
    });
    // dot, square, sqrt, recip, norm
    fd_check_program(&[a.clone(), c.clone()], |t, ids| {
        let sq = t.square(ids[0]);
        let d = t.dot(sq, ids[1]).unwrap();
        let r = t.sqrt(d);
        let r = t.recip(r);
        let n = t.norm(ids[1]);
        t.add(r, n).unwrap()
    });
    // cross, hat, vee
    fd_check_program(&[a.clone(), b.clone()], |t, ids| {
        let cr = t.cross(ids[0], ids[1]).unwrap();
        let h = t.hat(ids[0]).unwrap();
        let v = t.vee(h).unwrap();
        let d = t.dot(v, ids[1]).unwrap();
        let s = t.sum(cr);
        t.add(d, s).unwrap()
    });
    // silu, silu_prime, sin, cos
    fd_check_program(&[a.clone(), b.clone()], |t, ids| {
        let s1 = t.silu(ids[0]);
        let sp = t.silu_prime(ids[0]);
        let sn = t.sin(ids[1]);
        let cs = t.cos(ids[1]);
        let p1 = t.mul(sp, sn).unwrap();
        let p2 = t.mul(s1, cs).unwrap();
        let s = t.add(p1, p2).unwrap();
        t.sum(s)
    });
    // concat, slice
    fd_check_program(&[a.clone(), b.clone()], |t, ids| {
        let cat = t.concat(&[ids[0], ids[1]]);
        let sl = t.slice(cat, 1, 4).unwrap();
        t.sum(sl)
    });

    // full loss gradient through a 4-observation rollout of a learned
    // model (residual potential + forcing) on a two-body system
    let (init, params) = axisymmetric_two_body();
    let truth = quadrupole_truth();
    let dt = 0.05;
    let k_loss = 4;
    let ctx = StepContext::new(&params, &truth, &ZeroForcing, dt);
    let targets = rollout(StepScheme::LieT2, &init, &ctx, k_loss, Storage::All).unwrap();

    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    let mut rng = StdRng::seed_from_u64(42);
    let mut vnet = liet2::autodiff::MlpParams::init(24, 8, 1, &mut rng).unwrap();
    let mut fnet = liet2::autodiff::MlpParams::init(36, 8, 12, &mut rng).unwrap();
    // non-degenerate output heads so gradients reach every layer; small
    // output scales keep the perturbed dynamics tame over the horizon
    for w in vnet.tensors_mut()[6].iter_mut() {
        *w = rng.gen_range(-0.5..0.5);
    }
    for w in fnet.tensors_mut()[6].iter_mut() {
        *w = rng.gen_range(-0.5..0.5);
    }
    let model = LearnedDynamics {
        v_resid: Some(vnet),
        v_norm: InputNorm::identity(24),
        forcing: Some(fnet),
        f_norm: InputNorm::identity(36),
        conservative_only: false,
        v_scale: 1e-3,
        f_scale: 1e-3,
    };

    // taped loss: mean over the horizon of summed squared state errors
    let mut tape = Tape::new();
    let tm = TapedModel::register(&mut tape, &model);
    let mut s = TapedState::constants(&mut tape, &init);
    let mut acc = tape.scalar(0.0);
    for target in targets.iter().skip(1) {
        s = taped_step(&mut tape, StepScheme::LieT2, &s, &tm, &params, dt, false).unwrap();
        let bodies = s.bodies.clone();
        for (i, body) in bodies.iter().enumerate() {
            let tb = &target.bodies[i];
            for (node, data) in [
                (body.q, tb.q.to_array().to_vec()),
                (body.p, tb.p.to_array().to_vec()),
                (body.r, tb.r.matrix().m.to_vec()),
                (body.pi, tb.pi.to_array().to_vec()),
            ] {
                let t = tape.constant(data);
                let d = tape.sub(node, t).unwrap();
                let d2 = tape.dot(d, d).unwrap();
                acc = tape.add(acc, d2).unwrap();
            }
        }
    }
    let kinv = tape.scalar(1.0 / k_loss as f64);
    let loss = tape.mul(acc, kinv).unwrap();
    let grads = tape.grad(loss).unwrap();
    let leaf_ids = tm.leaf_ids();

    let untaped_loss = |m: &LearnedDynamics| -> f64 {
        let pred =
            predict_rollout(m, &params, &init, dt, 1, k_loss, StepScheme::LieT2).unwrap();
        srnn_loss(&pred, &targets).unwrap().total
    };

    let mut checked = 0usize;
    for (ti, id) in leaf_ids.iter().enumerate() {
        let g = grads.wrt(*id);
        // spot-check a few entries of every tensor
        let idxs: Vec<usize> =
            [0, g.len() / 2, g.len().saturating_sub(1)].into_iter().collect();
        for j in idxs {
            let an = g[j];
            let w = {
                let mut refs: Vec<&Vec<f64>> =
                    model.v_resid.as_ref().unwrap().tensors().into_iter().collect();
                refs.extend(model.forcing.as_ref().unwrap().tensors());
                refs[ti][j]
            };
            // step scaled to the weight, not the gradient, to keep the
            // central difference out of cancellation territory
            let eps = 1e-5 * w.abs().max(1.0);
            let peek = |delta: f64| -> f64 {
                let mut m = model.clone();
                let mut tensors: Vec<&mut Vec<f64>> =
                    m.v_resid.as_mut().unwrap().tensors_mut().into_iter().collect();
                tensors.extend(m.forcing.as_mut().unwrap().tensors_mut());
                tensors[ti][j] += delta;
                untaped_loss(&m)
            };
            let fd = (peek(eps) - peek(-eps)) / (2.0 * eps);
            let scale = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (fd - an).abs() <= 1e-5 * scale,
                "tensor {ti}[{j}]: analytic {an:.9e} vs FD {fd:.9e}"
            );
            checked += 1;
        }
    }
    pass(
        6,
        "gradient correctness",
        &format!("all primitive programs FD-checked; {checked} rollout gradient entries at rel <= 1e-5"),
    );
}

// criterion 7: trained on quadrupole-truth two-body data, the learned
// model's 500-step mean position error is <= 0.1x the zero-correction
// point-mass baseline's.
#[test]
fn criterion_7_toy_precession_learning() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_body_precession.json");
    let config = RunConfig::load(&path).unwrap();
    let (params, init) = config.to_system().unwrap();
    let truth = config.truth.build().unwrap();
    let data = config.data.clone().unwrap();
    let train_config = config.train.clone().unwrap();
    let eval = config.eval.clone().unwrap();

    let dataset = generate_dataset(
        truth.as_ref(),
        &ZeroForcing,
        &params,
        &init,
        data.l,
        data.k,
        data.dt,
        data.fine_h,
        data.noise_sigma,
        config.seed,
    )
    .unwrap();
    let (model, _curve) = train(&dataset, &train_config).unwrap();

    let horizon = eval.horizon;
    let m = (data.dt / data.fine_h).round() as usize;
    let fine_ctx = StepContext::new(&params, truth.as_ref(), &ZeroForcing, data.fine_h);
    let rigid_truth =
        rollout(StepScheme::LieT2, &init, &fine_ctx, horizon * m, Storage::Stride(m)).unwrap();

    let baseline = LearnedDynamics::baseline(params.n_bodies());
    let base_traj = predict_rollout(
        &baseline,
        &params,
        &init,
        data.dt,
        eval.substeps,
        horizon,
        StepScheme::LieT2,
    )
    .unwrap();
    let learned_traj = predict_rollout(
        &model,
        &params,
        &init,
        data.dt,
        eval.substeps,
        horizon,
        StepScheme::LieT2,
    )
    .unwrap();

    let (base_dq, _) = metric_trajectory(&base_traj, &rigid_truth).unwrap();
    let (learned_dq, _) = metric_trajectory(&learned_traj, &rigid_truth).unwrap();
    assert!(
        learned_dq <= 0.1 * base_dq,
        "learned mean |dq| {learned_dq:.4e} not <= 0.1x baseline {base_dq:.4e}"
    );
    pass(
        7,
        "toy precession learning",
        &format!(
            "baseline mean |dq| {base_dq:.3e}, learned {learned_dq:.3e} ({:.1}x improvement)",
            base_dq / learned_dq
        ),
    );
}

// criterion 8: on a rotation-coupled system with a fast-spinning
// tilted secondary, all six schemes are trained identically; LieT2 is
// lowest-or-tied in both mean position and rotation error, and naive
// Verlet's rotation error is >= 10x LieT2's.
#[test]
fn criterion_8_integrator_comparison() {
    let params = SystemParams::new(
        vec![
            BodyParams::new(1.0, [0.04, 0.04, 0.032]).unwrap(),
            BodyParams::new(1e-3, [0.01, 0.01, 0.009]).unwrap(),
        ],
        1.0,
    )
    .unwrap();
    // Oblate star whose symmetry axis is the orbit normal (its quadrupole
    // drives the apsidal precession the models must learn) plus a mildly
    // oblate planet spinning fast (body rate 20) with its symmetry axis
    // tilted 0.4 rad off the orbit normal. The quadrupole force depends on
    // the planet orientation only through that gyroscopically slow axis,
    // so the splitting scheme, whose symmetric-top free flow is closed
    // form at any step size, keeps the force accurate at h*omega = 0.5
    // per substep while the flat and Runge-Kutta exponential schemes lose
    // the axis and with it both the rotation and the position.
    let (tilt, v) = (0.3f64, (1.0f64 / 2.0).sqrt() * 1e-3);
    let orbit_dir = Vec3::new(0.0, tilt.cos(), tilt.sin());
    let init = SystemState {
        t: 0.0,
        bodies: vec![
            BodyState {
                q: Vec3::ZERO,
                p: orbit_dir.scale(-v),
                r: rot_x(tilt),
                pi: Vec3::new(0.0, 0.0, 0.004),
            },
            BodyState {
                q: Vec3::new(2.0, 0.0, 0.0),
                p: orbit_dir.scale(v),
                r: rot_x(tilt + 0.4),
                pi: Vec3::new(0.0, 0.0, 0.18), // body spin rate 20
            },
        ],
    };
    let truth = quadrupole_truth();
    let dataset = generate_dataset(
        &truth, &ZeroForcing, &params, &init, 6, 400, 0.1, 0.025, 1e-4, 11,
    )
    .unwrap();
    let base_config = TrainConfig {
        batch_size: 128,
        substeps: 4,
        optimizer: liet2::autodiff::AdamWConfig { lr: 2e-3, ..Default::default() },
        max_epochs: 150,
        patience: 30,
        hidden: 48,
        seed: 3,
        ..TrainConfig::default()
    };
    let matrix = baseline_train_matrix(&dataset, &StepScheme::ALL, &base_config).unwrap();

    let mut rows = Vec::new();
    for (scheme, outcome) in &matrix {
        if std::env::var("ACCEPTANCE_DEBUG").is_ok() {
            let cfg = TrainConfig { scheme: *scheme, ..base_config.clone() };
            let im = init_model(&dataset, &cfg).unwrap();
            let ir = evaluate_model(&im, &dataset, None, 350, 4, *scheme);
            eprintln!("debug {scheme} init: {ir:?}");
            eprintln!(
                "debug {scheme} trained: {:?}",
                evaluate_model(outcome.model(), &dataset, None, 350, 4, *scheme)
            );
        }
        let (dq, dr) = match evaluate_model(outcome.model(), &dataset, None, 350, 4, *scheme) {
            Ok(rep) if !rep.diverged && rep.mean_dq.is_finite() && rep.mean_dr.is_finite() => {
                (rep.mean_dq, rep.mean_dr)
            }
            _ => (f64::INFINITY, f64::INFINITY),
        };
        rows.push((*scheme, dq, dr));
    }
    let &(_, lie_dq, lie_dr) =
        rows.iter().find(|(s, _, _)| *s == StepScheme::LieT2).unwrap();
    let &(_, _, verlet_dr) =
        rows.iter().find(|(s, _, _)| *s == StepScheme::Verlet).unwrap();
    let mut detail = String::new();
    for &(scheme, dq, dr) in &rows {
        detail.push_str(&format!("{scheme} dq {dq:.2e} dr {dr:.2e}; "));
        if scheme == StepScheme::LieT2 {
            continue;
        }
        // lowest-or-tied: a 5% margin counts as a tie
        assert!(
            lie_dq <= 1.05 * dq,
            "LieT2 mean |dq| {lie_dq:.3e} not lowest-or-tied vs {scheme} {dq:.3e}"
        );
        assert!(
            lie_dr <= 1.05 * dr,
            "LieT2 mean |dR| {lie_dr:.3e} not lowest-or-tied vs {scheme} {dr:.3e}"
        );
    }
    assert!(
        verlet_dr >= 10.0 * lie_dr,
        "Verlet mean |dR| {verlet_dr:.3e} not >= 10x LieT2 {lie_dr:.3e}"
    );
    pass(8, "integrator comparison", &detail);
}

// criterion 9: fixed seeds give bitwise-identical datasets, training
// curves, and evaluation reports, and every file format round-trips
// bit-exactly.
#[test]
fn criterion_9_determinism_and_io() {
    let dir = tempfile::tempdir().unwrap();
    let (init, params) = coupled_two_body();
    let truth = quadrupole_truth();

    // datasets: identical generation, bit-exact save/load/save
    let gen = || {
        generate_dataset(&truth, &ZeroForcing, &params, &init, 3, 8, 0.05, 0.01, 1e-3, 5)
            .unwrap()
    };
    let ds1 = gen();
    let ds2 = gen();
    assert_eq!(ds1, ds2, "dataset generation not deterministic");
    let p1 = dir.path().join("d1.txt");
    let p2 = dir.path().join("d2.txt");
    ds1.save(&p1).unwrap();
    ds2.save(&p2).unwrap();
    let bytes1 = std::fs::read(&p1).unwrap();
    assert_eq!(bytes1, std::fs::read(&p2).unwrap(), "dataset files differ");
    let reloaded = liet2::learning::dataset::Dataset::load(&p1).unwrap();
    assert_eq!(reloaded, ds1, "dataset load not exact");
    let p3 = dir.path().join("d3.txt");
    reloaded.save(&p3).unwrap();
    assert_eq!(bytes1, std::fs::read(&p3).unwrap(), "dataset round trip not bit-exact");

    // trajectory file round trip
    let ctx = StepContext::new(&params, &truth, &ZeroForcing, 0.01);
    let traj = rollout(StepScheme::LieT2, &init, &ctx, 10, Storage::All).unwrap();
    let t1 = dir.path().join("t1.txt");
    let t2 = dir.path().join("t2.txt");
    save_trajectory(&t1, &traj).unwrap();
    save_trajectory(&t2, &load_trajectory(&t1).unwrap()).unwrap();
    assert_eq!(
        std::fs::read(&t1).unwrap(),
        std::fs::read(&t2).unwrap(),
        "trajectory round trip not bit-exact"
    );

    // training: identical curves and models under a fixed seed
    let tc = TrainConfig {
        batch_size: 16,
        max_epochs: 2,
        patience: 2,
        hidden: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let (model_a, curve_a) = train(&ds1, &tc).unwrap();
    let (model_b, curve_b) = train(&ds1, &tc).unwrap();
    assert_eq!(model_a, model_b, "training not deterministic");
    assert_eq!(
        serde_json::to_string(&curve_a).unwrap(),
        serde_json::to_string(&curve_b).unwrap(),
        "training curves differ"
    );

    // checkpoint round trip
    let c1 = dir.path().join("m1.ckpt");
    let c2 = dir.path().join("m2.ckpt");
    let ck = model_a.to_checkpoint(tc.hash());
    ck.save(&c1).unwrap();
    let ck2 = liet2::autodiff::checkpoint::Checkpoint::load(&c1).unwrap();
    ck2.save(&c2).unwrap();
    assert_eq!(
        std::fs::read(&c1).unwrap(),
        std::fs::read(&c2).unwrap(),
        "checkpoint round trip not bit-exact"
    );
    let model_c = LearnedDynamics::from_checkpoint(&ck2).unwrap();
    assert_eq!(model_a, model_c, "model checkpoint reload not exact");

    // evaluation reports: identical and JSON round-trips exactly
    let rep1 = evaluate_model(&model_a, &ds1, Some(&truth), 8, 2, StepScheme::LieT2).unwrap();
    let rep2 = evaluate_model(&model_a, &ds1, Some(&truth), 8, 2, StepScheme::LieT2).unwrap();
    assert_eq!(rep1, rep2, "evaluation not deterministic");
    let json = serde_json::to_string(&rep1).unwrap();
    let back: liet2::metrics::MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(rep1, back, "metrics report JSON round trip not exact");

    // convergence table CSV round trip
    let table = convergence_study(
        &params,
        &truth,
        &init,
        &[StepScheme::ExplicitEuler, StepScheme::LieT2],
        &[0.04, 0.02],
        0.2,
        5e-3,
    )
    .unwrap();
    let csv = convergence_csv(&table);
    let parsed = parse_convergence_csv(&csv).unwrap();
    assert_eq!(csv, convergence_csv(&parsed), "convergence CSV round trip not bit-exact");

    // an untouched initial model is also reproducible across calls
    let m1 = init_model(&ds1, &tc).unwrap();
    let m2 = init_model(&ds1, &tc).unwrap();
    assert_eq!(m1, m2, "model initialization not deterministic");

    pass(
        9,
        "determinism and file formats",
        "datasets, trajectories, checkpoints, reports and CSV all bitwise-reproducible",
    );
}
