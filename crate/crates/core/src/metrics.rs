//! Evaluation metrics: trajectory errors, learned-force and
//! learned-gradient errors, conservation diagnostics, and integrator
//! convergence studies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_distance, orthonormality_defect, Mat3, Vec3};
use crate::integrators::{rollout, StepContext, StepScheme, Storage};
use crate::learning::dataset::Dataset;
use crate::learning::model::LearnedDynamics;
use crate::learning::train::predict_rollout;
use crate::potentials::{PotentialModel, ZeroForcing};
use crate::rigidbody::{hamiltonian, skew_project_torque, SystemParams, SystemState};

/// Predicted rotations with a defect above this are off the manifold;
/// the rotation error falls back to the Frobenius distance there, since
/// a geodesic on SO(3) is no longer meaningful.
pub const GEODESIC_DEFECT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over snapshots of the summed per-body position error norm.
    pub mean_dq: f64,
    /// Mean over snapshots of the summed per-body rotation error
    /// (geodesic; Frobenius fallback off the manifold).
    pub mean_dr: f64,
    /// Mean one-observation-step force error ‖(p̂ − p_true)/Δt‖.
    pub mean_dp_dot: f64,
    /// Mean one-observation-step torque error ‖(Π̂ − Π_true)/Δt‖.
    pub mean_dpi_dot: f64,
    /// Mean learned-vs-truth potential q-gradient error (NaN when no
    /// truth model is available).
    pub mean_dvdq: f64,
    /// Mean learned-vs-truth R-gradient error after skew projection.
    pub mean_dvdr: f64,
    /// Max orthonormality defect along the predicted trajectory.
    pub max_defect: f64,
    /// Max Hamiltonian error along the predicted trajectory, relative
    /// to H(0) unless `h_error_absolute`.
    pub max_h_error: f64,
    /// True when H(0) = 0 and `max_h_error` is reported absolute.
    pub h_error_absolute: bool,
    /// Total integrator steps behind the trajectory metrics.
    pub steps_evaluated: usize,
    /// True when any predicted rollout diverged; affected means cover
    /// only the non-diverged rollouts (NaN if there were none).
    pub diverged: bool,
}

fn snapshot_dq(pred: &SystemState, truth: &SystemState) -> f64 {
    pred.bodies
        .iter()
        .zip(&truth.bodies)
        .map(|(pb, tb)| (pb.q - tb.q).norm())
        .sum()
}

fn snapshot_dr(pred: &SystemState, truth: &SystemState) -> f64 {
    pred.bodies
        .iter()
        .zip(&truth.bodies)
        .map(|(pb, tb)| {
            if orthonormality_defect(pb.r.matrix()) > GEODESIC_DEFECT_TOL {
                pb.r.matrix().sub(tb.r.matrix()).frobenius_norm()
            } else {
                geodesic_distance(&tb.r, &pb.r)
            }
        })
        .sum()
}

/// Mean position and rotation error between aligned trajectories.
pub fn metric_trajectory(pred: &[SystemState], truth: &[SystemState]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "trajectory metric needs equal nonempty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut dq = 0.0;
    let mut dr = 0.0;
    for (ps, ts) in pred.iter().zip(truth) {
        if ps.bodies.len() != ts.bodies.len() {
            return Err(Error::ShapeMismatch("trajectory body counts differ".into()));
        }
        dq += snapshot_dq(ps, ts);
        dr += snapshot_dr(ps, ts);
    }
    let n = pred.len() as f64;
    Ok((dq / n, dr / n))
}

/// Mean one-observation-step momentum- and angular-momentum-rate errors
/// of the learned model over every consecutive snapshot pair in the
/// dataset. `substeps` integrator steps span one observation interval.
pub fn metric_force_errors(
    model: &LearnedDynamics,
    dataset: &Dataset,
    substeps: usize,
    scheme: StepScheme,
) -> Result<(f64, f64)> {
    let mut dp = 0.0;
    let mut dpi = 0.0;
    let mut n = 0usize;
    for traj in &dataset.trajectories {
        for pair in traj.states.windows(2) {
            let pred = predict_rollout(
                model,
                &dataset.params,
                &pair[0],
                dataset.dt,
                substeps,
                1,
                scheme,
            )?;
            for (pb, tb) in pred[1].bodies.iter().zip(&pair[1].bodies) {
                dp += (pb.p - tb.p).scale(1.0 / dataset.dt).norm();
                dpi += (pb.pi - tb.pi).scale(1.0 / dataset.dt).norm();
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidParameter("dataset has no snapshot pairs".into()));
    }
    Ok((dp / n as f64, dpi / n as f64))
}

/// Mean learned-vs-truth potential gradient errors over `states`:
/// q-gradients compared directly, R-gradients compared through their
/// skew projection (an R-symmetric component of the learned gradient is
/// dynamically invisible and must not count as error).
pub fn metric_potential_grad_errors(
    learned: &dyn PotentialModel,
    truth: &dyn PotentialModel,
    states: &[SystemState],
    params: &SystemParams,
) -> Result<(f64, f64)> {
    if states.is_empty() {
        return Err(Error::InvalidParameter("no states for gradient metric".into()));
    }
    let mut dq = 0.0;
    let mut dr = 0.0;
    let mut n = 0usize;
    for state in states {
        let (q, r): (Vec<Vec3>, Vec<Mat3>) =
            state.bodies.iter().map(|b| (b.q, *b.r.matrix())).unzip();
        let le = learned.evaluate(&q, &r, params)?;
        let te = truth.evaluate(&q, &r, params)?;
        for i in 0..state.bodies.len() {
            dq += (le.grad_q[i] - te.grad_q[i]).norm();
            let lt = skew_project_torque(&r[i], &le.grad_r[i]);
            let tt = skew_project_torque(&r[i], &te.grad_r[i]);
            dr += (lt - tt).norm();
            n += 1;
        }
    }
    Ok((dq / n as f64, dr / n as f64))
}

/// Max orthonormality defect and max Hamiltonian error along a
/// trajectory. The Hamiltonian error is relative to H at the first
/// snapshot; when H(0) = 0 the absolute error is reported and flagged.
pub fn metric_conservation(
    traj: &[SystemState],
    params: &SystemParams,
    potential: &dyn PotentialModel,
) -> Result<(f64, f64, bool)> {
    if traj.is_empty() {
        return Err(Error::InvalidParameter("empty trajectory".into()));
    }
    let h0 = hamiltonian(&traj[0], params, potential)?;
    let absolute = h0 == 0.0;
    let mut max_defect = 0.0f64;
    let mut max_err = 0.0f64;
    for state in traj {
        for b in &state.bodies {
            max_defect = max_defect.max(orthonormality_defect(b.r.matrix()));
        }
        let h = hamiltonian(state, params, potential)?;
        let err = if absolute { (h - h0).abs() } else { ((h - h0) / h0).abs() };
        max_err = max_err.max(err);
    }
    Ok((max_defect, max_err, absolute))
}

/// Full Appendix-E-style report for a learned model on a dataset.
/// Trajectory metrics predict `horizon` observation steps (capped at
/// each trajectory's length) from the start of every validation
/// trajectory (every trajectory when there is no validation split);
/// force errors run over the whole dataset; gradient errors are filled
/// only when a truth potential is supplied.
pub fn evaluate_model(
    model: &LearnedDynamics,
    dataset: &Dataset,
    truth: Option<&dyn PotentialModel>,
    horizon: usize,
    substeps: usize,
    scheme: StepScheme,
) -> Result<MetricsReport> {
    if dataset.trajectories.is_empty() || horizon == 0 || substeps == 0 {
        return Err(Error::InvalidParameter(
            "evaluation needs a nonempty dataset, horizon >= 1, substeps >= 1".into(),
        ));
    }
    let eval_trajs: Vec<_> = if dataset.val().next().is_some() {
        dataset.val().collect()
    } else {
        dataset.trajectories.iter().collect()
    };

    let mut dq_sum = 0.0;
    let mut dr_sum = 0.0;
    let mut n_ok = 0usize;
    let mut diverged = false;
    let mut max_defect = 0.0f64;
    let mut max_h_error = 0.0f64;
    let mut h_error_absolute = false;
    let mut steps_evaluated = 0usize;
    let potential = model.potential();
    for traj in &eval_trajs {
        let k = horizon.min(traj.states.len() - 1);
        match predict_rollout(
            model,
            &dataset.params,
            &traj.states[0],
            dataset.dt,
            substeps,
            k,
            scheme,
        ) {
            Ok(pred) => {
                let (dq, dr) = metric_trajectory(&pred, &traj.states[..=k])?;
                dq_sum += dq;
                dr_sum += dr;
                n_ok += 1;
                steps_evaluated += k * substeps;
                let (defect, herr, habs) =
                    metric_conservation(&pred, &dataset.params, &potential)?;
                max_defect = max_defect.max(defect);
                max_h_error = max_h_error.max(herr);
                h_error_absolute |= habs;
            }
            Err(Error::Divergence { .. }) | Err(Error::SingularConfiguration { .. }) => {
                diverged = true;
            }
            Err(e) => return Err(e),
        }
    }
    let (mean_dq, mean_dr) = if n_ok > 0 {
        (dq_sum / n_ok as f64, dr_sum / n_ok as f64)
    } else {
        (f64::NAN, f64::NAN)
    };

    let (mean_dp_dot, mean_dpi_dot) = match metric_force_errors(model, dataset, substeps, scheme) {
        Ok(v) => v,
        Err(Error::Divergence { .. }) | Err(Error::SingularConfiguration { .. }) => {
            diverged = true;
            (f64::NAN, f64::NAN)
        }
        Err(e) => return Err(e),
    };

    let (mean_dvdq, mean_dvdr) = match truth {
        Some(t) => {
            let states: Vec<SystemState> = dataset
                .trajectories
                .iter()
                .flat_map(|tr| tr.states.iter().cloned())
                .collect();
            metric_potential_grad_errors(&potential, t, &states, &dataset.params)?
        }
        None => (f64::NAN, f64::NAN),
    };

    Ok(MetricsReport {
        mean_dq,
        mean_dr,
        mean_dp_dot,
        mean_dpi_dot,
        mean_dvdq,
        mean_dvdr,
        max_defect,
        max_h_error,
        h_error_absolute,
        steps_evaluated,
        diverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub scheme: StepScheme,
    pub h: f64,
    pub err_q: f64,
    pub err_r: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares log-log slope of (err_q + err_r) vs h per scheme.
    pub slopes: Vec<(StepScheme, f64)>,
}

fn exact_steps(t_end: f64, h: f64) -> Result<usize> {
    let n = (t_end / h).round();
    if n < 1.0 || (n * h - t_end).abs() > 1e-9 * t_end {
        return Err(Error::InvalidParameter(format!(
            "step size {h} does not divide the horizon {t_end}"
        )));
    }
    Ok(n as usize)
}

/// Convergence studies measure rotation error with the Frobenius
/// distance for every scheme: it is smooth off the manifold (non-Lie
/// schemes drift off SO(3) by an amount that itself scales with h, so a
/// geodesic/fallback mix would break the log-log fit) and proportional
/// to the geodesic distance for small errors.
fn final_state_error(pred: &SystemState, reference: &SystemState) -> (f64, f64) {
    let dr = pred
        .bodies
        .iter()
        .zip(&reference.bodies)
        .map(|(pb, tb)| pb.r.matrix().sub(tb.r.matrix()).frobenius_norm())
        .sum();
    (snapshot_dq(pred, reference), dr)
}

/// Global error at fixed horizon `t_end` versus step size, with fitted
/// log-log slopes. Each scheme is measured against its own fine-step
/// reference at `h_ref` (self-convergence), so the slope is the
/// scheme's consistency order regardless of which continuous flow it
/// converges to. Conservative runs only (F = 0).
pub fn convergence_study(
    params: &SystemParams,
    potential: &dyn PotentialModel,
    init: &SystemState,
    schemes: &[StepScheme],
    hs: &[f64],
    t_end: f64,
    h_ref: f64,
) -> Result<ConvergenceTable> {
    if hs.is_empty() || schemes.is_empty() {
        return Err(Error::InvalidParameter("empty scheme or step-size list".into()));
    }
    let min_h = hs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(h_ref > 0.0) || h_ref > min_h / 4.0 {
        return Err(Error::InvalidParameter(format!(
            "reference step {h_ref} too coarse for min h {min_h}"
        )));
    }
    let forcing = ZeroForcing;
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &scheme in schemes {
        let ref_steps = exact_steps(t_end, h_ref)?;
        let ref_ctx = StepContext::new(params, potential, &forcing, h_ref);
        let reference = rollout(scheme, init, &ref_ctx, ref_steps, Storage::Last)?
            .pop()
            .expect("rollout returns the final state");

        let mut points = Vec::new();
        for &h in hs {
            let steps = exact_steps(t_end, h)?;
            let ctx = StepContext::new(params, potential, &forcing, h);
            match rollout(scheme, init, &ctx, steps, Storage::Last) {
                Ok(mut states) => {
                    let last = states.pop().expect("rollout returns the final state");
                    let (err_q, err_r) = final_state_error(&last, &reference);
                    rows.push(ConvergenceRow { scheme, h, err_q, err_r, diverged: false });
                    points.push((h.ln(), (err_q + err_r).ln()));
                }
                Err(Error::Divergence { .. }) | Err(Error::SingularConfiguration { .. }) => {
                    rows.push(ConvergenceRow {
                        scheme,
                        h,
                        err_q: f64::NAN,
                        err_r: f64::NAN,
                        diverged: true,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        slopes.push((scheme, fit_slope(&points)));
    }
    Ok(ConvergenceTable { rows, slopes })
}

/// Least-squares slope of y against x; NaN with fewer than two points.
fn fit_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return f64::NAN;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in points {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// CSV emission with the fixed header `scheme,h,err_q,err_R,slope`;
/// the slope column repeats each scheme's fitted slope on its rows.
pub fn convergence_csv(table: &ConvergenceTable) -> String {
    let mut out = String::from("scheme,h,err_q,err_R,slope\n");
    for row in &table.rows {
        let slope = table
            .slopes
            .iter()
            .find(|(s, _)| *s == row.scheme)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.scheme, row.h, row.err_q, row.err_r, slope
        ));
    }
    out
}

pub fn parse_convergence_csv(text: &str) -> Result<ConvergenceTable> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
    if header != "scheme,h,err_q,err_R,slope" {
        return Err(Error::Format(format!("unexpected CSV header '{header}'")));
    }
    let mut rows = Vec::new();
    let mut slopes: Vec<(StepScheme, f64)> = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("bad CSV row '{line}'")));
        }
        let scheme: StepScheme = cols[0].parse()?;
        let nums: Vec<f64> = cols[1..]
            .iter()
            .map(|s| s.parse().map_err(|_| Error::Format(format!("bad number '{s}'"))))
            .collect::<Result<_>>()?;
        let diverged = nums[1].is_nan() && nums[2].is_nan();
        rows.push(ConvergenceRow { scheme, h: nums[0], err_q: nums[1], err_r: nums[2], diverged });
        if !slopes.iter().any(|(s, _)| *s == scheme) {
            slopes.push((scheme, nums[3]));
        }
    }
    Ok(ConvergenceTable { rows, slopes })
}
