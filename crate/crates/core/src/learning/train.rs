//! Minibatch training of the learned dynamics by backpropagation
//! through composed integrator steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::adamw::{AdamWConfig, AdamWState};
use crate::autodiff::mlp::MlpParams;
use crate::autodiff::tape::Tape;
use crate::error::{Error, Result};
use crate::integrators::{step, StepContext, StepScheme};
use crate::learning::dataset::Dataset;
use crate::learning::model::{
    f_input, f_input_mask, v_input, v_input_mask, InputNorm, LearnedDynamics,
    F_INPUT_PER_BODY, V_INPUT_PER_BODY,
};
use crate::learning::taped::{taped_step, TapedModel, TapedState};
use crate::rigidbody::{SystemParams, SystemState};

/// Loss contribution reported for a sample whose rollout diverged. The
/// gradient contribution of such a sample is zero.
pub const DIVERGED_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Integrator substeps per observation interval: h = dt / substeps.
    pub substeps: usize,
    /// Observed steps per training sample entering the loss.
    pub k_loss: usize,
    pub scheme: StepScheme,
    pub max_epochs: usize,
    /// Epochs without validation improvement before early stop.
    pub patience: usize,
    /// Hidden width of both networks.
    pub hidden: usize,
    /// Train the nonconservative forcing network as well.
    pub learn_forcing: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            substeps: 1,
            k_loss: 1,
            scheme: StepScheme::LieT2,
            max_epochs: 100,
            patience: 15,
            hidden: 256,
            learn_forcing: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1
            || self.substeps < 1
            || self.k_loss < 1
            || self.max_epochs < 1
            || self.hidden < 1
        {
            return Err(Error::InvalidParameter(
                "batch_size, substeps, k_loss, max_epochs, hidden must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// FNV-1a hash of the serialized config, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub diverged_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub q: f64,
    pub p: f64,
    pub r: f64,
    pub pi: f64,
    pub diverged: usize,
}

/// Squared-error loss over one predicted horizon versus the target
/// snapshots; index 0 (the shared start state) is not counted.
pub fn srnn_loss(pred: &[SystemState], target: &[SystemState]) -> Result<LossReport> {
    if pred.len() != target.len() || pred.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "loss needs equal-length horizons of >= 2 snapshots, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let k = (pred.len() - 1) as f64;
    let (mut lq, mut lp, mut lr, mut lpi) = (0.0, 0.0, 0.0, 0.0);
    for (ps, ts) in pred.iter().zip(target).skip(1) {
        for (pb, tb) in ps.bodies.iter().zip(&ts.bodies) {
            let dq = pb.q - tb.q;
            lq += dq.dot(dq);
            let dp = pb.p - tb.p;
            lp += dp.dot(dp);
            let dr = pb.r.matrix().sub(tb.r.matrix());
            lr += crate::kernels::dot(&dr.m, &dr.m);
            let dpi = pb.pi - tb.pi;
            lpi += dpi.dot(dpi);
        }
    }
    let (q, p, r, pi) = (lq / k, lp / k, lr / k, lpi / k);
    Ok(LossReport { total: q + p + r + pi, q, p, r, pi, diverged: 0 })
}

/// The scalar training loss of one sample, accumulated in exactly the
/// order the taped loss uses (q, p, R, Pi per body per horizon step),
/// so the two agree bitwise.
fn sample_loss_total(pred: &[SystemState], target: &[SystemState]) -> f64 {
    let mut acc = 0.0;
    for (ps, ts) in pred.iter().zip(target).skip(1) {
        for (pb, tb) in ps.bodies.iter().zip(&ts.bodies) {
            let dq = pb.q - tb.q;
            acc += dq.dot(dq);
            let dp = pb.p - tb.p;
            acc += dp.dot(dp);
            let dr = pb.r.matrix().sub(tb.r.matrix());
            acc += crate::kernels::dot(&dr.m, &dr.m);
            let dpi = pb.pi - tb.pi;
            acc += dpi.dot(dpi);
        }
    }
    acc / (pred.len() - 1) as f64
}

/// K_loss observations predicted from `start` by composing `substeps`
/// integrator steps per observation. Returns `k_loss + 1` snapshots,
/// the start state first.
#[allow(clippy::too_many_arguments)]
pub fn predict_rollout(
    model: &LearnedDynamics,
    params: &SystemParams,
    start: &SystemState,
    dt: f64,
    substeps: usize,
    k_loss: usize,
    scheme: StepScheme,
) -> Result<Vec<SystemState>> {
    let potential = model.potential();
    let forcing = model.forcing_model();
    let h = dt / substeps as f64;
    let ctx = StepContext::new(params, &potential, &forcing, h);
    let mut out = Vec::with_capacity(k_loss + 1);
    out.push(start.clone());
    let mut current = start.clone();
    let mut count = 0usize;
    for _ in 0..k_loss {
        for _ in 0..substeps {
            current = step(scheme, &current, &ctx)?;
            count += 1;
            if !current.is_finite() {
                return Err(Error::Divergence { step: count });
            }
        }
        out.push(current.clone());
    }
    Ok(out)
}

/// Loss and parameter gradients of one sample through the taped
/// rollout. `Ok(None)` marks a diverged sample. The reported loss is
/// unscaled; the gradients are of `loss / loss_scale` (the training
/// objective is normalized so its gradients are not suppressed by the
/// optimizer's epsilon when the physical residual is tiny).
fn sample_gradient(
    model: &LearnedDynamics,
    params: &SystemParams,
    scheme: StepScheme,
    targets: &[SystemState],
    dt: f64,
    substeps: usize,
    loss_scale: f64,
) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
    let h = dt / substeps as f64;
    let k_loss = targets.len() - 1;
    let mut tape = Tape::new();
    let tm = TapedModel::register(&mut tape, model);
    let mut state = TapedState::constants(&mut tape, &targets[0]);

    let mut acc = tape.scalar(0.0);
    for target in targets.iter().skip(1) {
        for _ in 0..substeps {
            state = match taped_step(&mut tape, scheme, &state, &tm, params, h, false) {
                Ok(s) => s,
                Err(Error::SingularConfiguration { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            if !state.is_finite(&tape) {
                return Ok(None);
            }
        }
        for (tb, pb) in state.bodies.iter().zip(&target.bodies) {
            let qt = tape.constant(pb.q.to_array().to_vec());
            let dq = tape.sub(tb.q, qt)?;
            let d2 = tape.dot(dq, dq)?;
            acc = tape.add(acc, d2)?;
            let pt = tape.constant(pb.p.to_array().to_vec());
            let dp = tape.sub(tb.p, pt)?;
            let d2 = tape.dot(dp, dp)?;
            acc = tape.add(acc, d2)?;
            let rt = tape.constant(pb.r.matrix().m.to_vec());
            let dr = tape.sub(tb.r, rt)?;
            let d2 = tape.dot(dr, dr)?;
            acc = tape.add(acc, d2)?;
            let pit = tape.constant(pb.pi.to_array().to_vec());
            let dpi = tape.sub(tb.pi, pit)?;
            let d2 = tape.dot(dpi, dpi)?;
            acc = tape.add(acc, d2)?;
        }
    }
    let kn = tape.scalar(k_loss as f64);
    let loss = tape.div(acc, kn)?;
    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        return Ok(None);
    }
    let inv_scale = tape.scalar(1.0 / loss_scale);
    let objective = tape.mul(loss, inv_scale)?;
    let grads = tape.grad(objective)?;
    let out = tm.leaf_ids().iter().map(|id| grads.wrt(*id).to_vec()).collect();
    Ok(Some((loss_value, out)))
}

fn trainable_tensors_mut(model: &mut LearnedDynamics) -> Vec<&mut Vec<f64>> {
    let mut out: Vec<&mut Vec<f64>> = Vec::new();
    if let Some(net) = &mut model.v_resid {
        out.extend(net.tensors_mut());
    }
    if !model.conservative_only {
        if let Some(net) = &mut model.forcing {
            out.extend(net.tensors_mut());
        }
    }
    out
}

/// Mean one-observation-step momentum- and torque-rate residuals of the
/// zero-correction baseline over the training split: the physical
/// magnitude the networks must represent. Diverging pairs are skipped.
fn baseline_residual_scales(dataset: &Dataset, substeps: usize) -> Result<(f64, f64)> {
    let base = LearnedDynamics::baseline(dataset.n_bodies());
    let mut s_p = 0.0;
    let mut s_pi = 0.0;
    let mut n = 0usize;
    for traj in dataset.train() {
        for pair in traj.states.windows(2) {
            let pred = match predict_rollout(
                &base,
                &dataset.params,
                &pair[0],
                dataset.dt,
                substeps,
                1,
                StepScheme::LieT2,
            ) {
                Ok(p) => p,
                Err(Error::Divergence { .. }) | Err(Error::SingularConfiguration { .. }) => {
                    continue
                }
                Err(e) => return Err(e),
            };
            for (pb, tb) in pred[1].bodies.iter().zip(&pair[1].bodies) {
                s_p += (pb.p - tb.p).scale(1.0 / dataset.dt).norm();
                s_pi += (pb.pi - tb.pi).scale(1.0 / dataset.dt).norm();
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((s_p / n as f64, s_pi / n as f64))
}

/// The untrained model `train` starts from: zero-output-head networks,
/// normalization statistics from the training split, and output scales
/// calibrated to the baseline's one-step residual magnitudes (so the
/// optimizer works in an O(1) weight regime regardless of how small the
/// physical residual is). Deterministic in the config seed.
pub fn init_model(dataset: &Dataset, config: &TrainConfig) -> Result<LearnedDynamics> {
    let n = dataset.n_bodies();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let v_resid = MlpParams::init(n * V_INPUT_PER_BODY, config.hidden, 1, &mut rng)?;
    let forcing = if config.learn_forcing {
        Some(MlpParams::init(n * F_INPUT_PER_BODY, config.hidden, 6 * n, &mut rng)?)
    } else {
        None
    };

    let mut v_rows = Vec::new();
    let mut f_rows = Vec::new();
    for traj in dataset.train() {
        for s in &traj.states {
            let (q, r): (Vec<_>, Vec<_>) =
                s.bodies.iter().map(|b| (b.q, *b.r.matrix())).unzip();
            let (p, pi): (Vec<_>, Vec<_>) = s.bodies.iter().map(|b| (b.p, b.pi)).unzip();
            v_rows.push(v_input(&q, &r));
            f_rows.push(f_input(&q, &r, &p, &pi));
        }
    }
    let v_norm = InputNorm::from_samples(&v_rows, &v_input_mask(n))?;
    let f_norm = InputNorm::from_samples(&f_rows, &f_input_mask(n))?;

    let (s_p, s_pi) = baseline_residual_scales(dataset, config.substeps)?;
    // the q-force of the residual is v_scale * (net gradient) * inv_sigma;
    // divide the physical force scale by the typical whitening gain so an
    // O(1) network maps onto it
    let mut inv_q_sum = 0.0;
    let mut inv_q_n = 0usize;
    for (i, inv) in v_norm.inv_sigma.iter().enumerate() {
        if i % V_INPUT_PER_BODY < 3 {
            inv_q_sum += inv;
            inv_q_n += 1;
        }
    }
    let mean_inv_q = if inv_q_n > 0 { inv_q_sum / inv_q_n as f64 } else { 1.0 };
    let tiny = 1e-300;
    let v_scale = (s_p / mean_inv_q).max(tiny);
    let f_scale = (0.5 * (s_p + s_pi)).max(tiny);

    Ok(LearnedDynamics {
        v_resid: Some(v_resid),
        v_norm,
        forcing,
        f_norm,
        conservative_only: !config.learn_forcing,
        v_scale,
        f_scale,
    })
}

/// Sample index list: (trajectory index, start snapshot index).
fn sample_indices(dataset: &Dataset, k_loss: usize, train: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ti, traj) in dataset.trajectories.iter().enumerate() {
        let is_train = traj.split == crate::learning::dataset::Split::Train;
        if is_train != train {
            continue;
        }
        let k = traj.states.len() - 1;
        if k < k_loss {
            continue;
        }
        for s in 0..=(k - k_loss) {
            out.push((ti, s));
        }
    }
    out
}

fn validation_loss(
    model: &LearnedDynamics,
    dataset: &Dataset,
    config: &TrainConfig,
    samples: &[(usize, usize)],
) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for &(ti, s) in samples {
        let targets = &dataset.trajectories[ti].states[s..=s + config.k_loss];
        match predict_rollout(
            model,
            &dataset.params,
            &targets[0],
            dataset.dt,
            config.substeps,
            config.k_loss,
            config.scheme,
        ) {
            Ok(pred) => total += sample_loss_total(&pred, targets),
            Err(_) => total += DIVERGED_LOSS,
        }
    }
    total / samples.len() as f64
}

/// Minibatch AdamW training. Returns the best-validation model and the
/// per-epoch curve. Deterministic in `config.seed`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(LearnedDynamics, Vec<EpochRecord>)> {
    config.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(Error::InvalidParameter("dataset is empty".into()));
    }
    let train_samples = sample_indices(dataset, config.k_loss, true);
    if train_samples.is_empty() {
        return Err(Error::InvalidParameter(
            "no training samples (k_loss longer than trajectories?)".into(),
        ));
    }
    let val_samples = sample_indices(dataset, config.k_loss, false);

    let mut model = init_model(dataset, config)?;
    // objective normalization: the initial model's mean training loss
    let init_loss = validation_loss(&model, dataset, config, &train_samples);
    let loss_scale = if init_loss.is_finite() && init_loss > 0.0 { init_loss } else { 1.0 };
    let mut optimizer = AdamWState::new(config.optimizer, &model.trainable_shapes());
    // dedicated stream for epoch shuffles, so adding epochs never
    // perturbs the model initialization draws
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let mut curve = Vec::new();
    let mut best: Option<(f64, LearnedDynamics)> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.max_epochs {
        let mut order = train_samples.clone();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_diverged = 0usize;
        for batch in order.chunks(config.batch_size) {
            let shapes = model.trainable_shapes();
            let mut grad_sum: Vec<Vec<f64>> =
                shapes.iter().map(|&len| vec![0.0; len]).collect();
            let mut batch_live = 0usize;
            for &(ti, s) in batch {
                let targets = &dataset.trajectories[ti].states[s..=s + config.k_loss];
                match sample_gradient(
                    &model,
                    &dataset.params,
                    config.scheme,
                    targets,
                    dataset.dt,
                    config.substeps,
                    loss_scale,
                )? {
                    Some((loss, grads)) => {
                        epoch_loss += loss;
                        batch_live += 1;
                        for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                            for (a, v) in acc.iter_mut().zip(g) {
                                *a += v;
                            }
                        }
                    }
                    None => {
                        epoch_loss += DIVERGED_LOSS;
                        epoch_diverged += 1;
                    }
                }
            }
            if batch_live == 0 {
                continue;
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_sum.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            let mut tensors = trainable_tensors_mut(&mut model);
            let grad_refs: Vec<&[f64]> = grad_sum.iter().map(|g| g.as_slice()).collect();
            optimizer.update(&mut tensors, &grad_refs)?;
        }
        if epoch_diverged == train_samples.len() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let train_loss = epoch_loss / train_samples.len() as f64;
        let val_loss = if val_samples.is_empty() {
            train_loss
        } else {
            validation_loss(&model, dataset, config, &val_samples)
        };
        curve.push(EpochRecord { epoch, train_loss, val_loss, diverged_samples: epoch_diverged });

        match &best {
            Some((b, _)) if val_loss >= *b => {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some((val_loss, model.clone()));
                since_best = 0;
            }
        }
    }

    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, curve))
}

/// Outcome of training one scheme in the comparison matrix.
#[derive(Debug, Clone)]
pub enum TrainOutcome {
    Trained { model: LearnedDynamics, curve: Vec<EpochRecord> },
    /// Every sample of some epoch diverged; the untrained initial model
    /// is returned so the scheme can still be evaluated.
    Diverged { epoch: usize, model: LearnedDynamics },
}

impl TrainOutcome {
    pub fn model(&self) -> &LearnedDynamics {
        match self {
            TrainOutcome::Trained { model, .. } => model,
            TrainOutcome::Diverged { model, .. } => model,
        }
    }
}

/// Trains the same dataset with each scheme substituted as the
/// recurrent block. Divergence is a recorded outcome, not an error.
pub fn baseline_train_matrix(
    dataset: &Dataset,
    schemes: &[StepScheme],
    base_config: &TrainConfig,
) -> Result<Vec<(StepScheme, TrainOutcome)>> {
    let mut out = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let config = TrainConfig { scheme, ..base_config.clone() };
        match train(dataset, &config) {
            Ok((model, curve)) => out.push((scheme, TrainOutcome::Trained { model, curve })),
            Err(Error::TrainingDiverged { epoch }) => {
                let model = init_model(dataset, &config)?;
                out.push((scheme, TrainOutcome::Diverged { epoch, model }));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_x, Rotation, Vec3};
    use crate::learning::dataset::generate_dataset;
    use crate::potentials::{
        CompositePotential, PointMassGravity, QuadrupoleResidual, ZeroForcing,
    };
    use crate::rigidbody::{BodyParams, BodyState};

    fn two_body() -> (SystemParams, SystemState) {
        let params = SystemParams::new(
            vec![
                BodyParams::new(1.0, [0.4, 0.4, 0.4]).unwrap(),
                BodyParams::new(1e-3, [4e-6, 4e-6, 2.4e-6]).unwrap(),
            ],
            1.0,
        )
        .unwrap();
        let v = (params.g / 2.0_f64).sqrt();
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
                    pi: Vec3::new(0.0, 2e-6, 6e-6),
                },
            ],
        };
        (params, state)
    }

    fn quad_truth() -> CompositePotential {
        CompositePotential::new(vec![Box::new(PointMassGravity), Box::new(QuadrupoleResidual)])
            .unwrap()
    }

    fn small_dataset(l: usize, k: usize) -> Dataset {
        let (params, init) = two_body();
        let pot = quad_truth();
        generate_dataset(&pot, &ZeroForcing, &params, &init, l, k, 0.1, 0.025, 1e-3, 7)
            .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            substeps: 2,
            k_loss: 1,
            max_epochs: 2,
            patience: 5,
            hidden: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_identities() {
        let (_, state) = two_body();
        let mut shifted = state.clone();
        shifted.bodies[0].q = shifted.bodies[0].q + Vec3::new(1.0, 0.0, 0.0);

        let zero = srnn_loss(&[state.clone(), state.clone()], &[state.clone(), state.clone()])
            .unwrap();
        assert_eq!(zero.total, 0.0);

        let one =
            srnn_loss(&[state.clone(), shifted.clone()], &[state.clone(), state.clone()])
                .unwrap();
        assert_eq!(one.total, 1.0);
        assert_eq!(one.q, 1.0);
        assert_eq!(one.p + one.r + one.pi, 0.0);

        // start state not counted
        let start_only =
            srnn_loss(&[shifted.clone(), state.clone()], &[state.clone(), state.clone()])
                .unwrap();
        assert_eq!(start_only.total, 0.0);

        assert!(srnn_loss(&[state.clone()], &[state]).is_err());
    }

    #[test]
    fn taped_and_untaped_sample_loss_agree_bitwise() {
        let ds = small_dataset(3, 3);
        let config = small_config();
        let model = init_model(&ds, &config).unwrap();
        let targets = &ds.trajectories[0].states[0..=1];
        let (taped_loss, _) = sample_gradient(
            &model,
            &ds.params,
            StepScheme::LieT2,
            targets,
            ds.dt,
            config.substeps,
            1.0,
        )
        .unwrap()
        .unwrap();
        let pred = predict_rollout(
            &model,
            &ds.params,
            &targets[0],
            ds.dt,
            config.substeps,
            1,
            StepScheme::LieT2,
        )
        .unwrap();
        assert_eq!(taped_loss, sample_loss_total(&pred, targets));
    }

    #[test]
    fn zero_head_model_has_discretization_floor_loss() {
        // truth = point mass only: the zero-initialized model is the
        // exact physics, so the only loss is time discretization, O(h^2)
        let (params, init) = two_body();
        let ds_h = |fine_h: f64, sub: usize| {
            let ds = generate_dataset(
                &PointMassGravity,
                &ZeroForcing,
                &params,
                &init,
                2,
                2,
                0.1,
                fine_h,
                0.0,
                1,
            )
            .unwrap();
            let config = TrainConfig { substeps: sub, ..small_config() };
            let model = init_model(&ds, &config).unwrap();
            let targets = &ds.trajectories[0].states[0..=1];
            let pred = predict_rollout(
                &model,
                &ds.params,
                &targets[0],
                ds.dt,
                sub,
                1,
                StepScheme::LieT2,
            )
            .unwrap();
            sample_loss_total(&pred, targets)
        };
        // reference data near-exact; model stepsizes h = 0.05 and 0.025
        let coarse = ds_h(1e-3, 2);
        let fine = ds_h(1e-3, 4);
        assert!(coarse < 1e-8, "floor should be tiny, got {coarse}");
        // loss is squared error: order-2 flow => factor ~ 2^4 = 16
        let ratio = coarse / fine;
        assert!(
            (9.0..=25.0).contains(&ratio),
            "squared-error floor ratio {ratio} not ~16"
        );
    }

    #[test]
    fn gradient_through_rollout_matches_finite_differences() {
        let ds = small_dataset(2, 2);
        let mut config = small_config();
        config.substeps = 2;
        config.k_loss = 2;
        config.learn_forcing = true;
        let mut model = init_model(&ds, &config).unwrap();
        // non-zero heads so the loss actually depends on every tensor
        if let Some(net) = &mut model.v_resid {
            for (i, w) in net.w_out.iter_mut().enumerate() {
                *w = 2e-4 * ((i % 5) as f64) - 4e-4;
            }
        }
        if let Some(net) = &mut model.forcing {
            for (i, w) in net.w_out.iter_mut().enumerate() {
                *w = 1e-4 * ((i % 3) as f64) - 1e-4;
            }
        }
        let targets = &ds.trajectories[0].states[0..=2];
        let (_, grads) = sample_gradient(
            &model,
            &ds.params,
            StepScheme::LieT2,
            targets,
            ds.dt,
            config.substeps,
            1.0,
        )
        .unwrap()
        .unwrap();

        let loss_of = |m: &LearnedDynamics| -> f64 {
            let pred = predict_rollout(
                m,
                &ds.params,
                &targets[0],
                ds.dt,
                config.substeps,
                2,
                StepScheme::LieT2,
            )
            .unwrap();
            sample_loss_total(&pred, targets)
        };

        // spot-check entries across all trainable tensors
        let shapes = model.trainable_shapes();
        for (ti, &len) in shapes.iter().enumerate() {
            let stride = (len / 3).max(1);
            for entry in (0..len).step_by(stride) {
                let base = trainable_tensors_mut(&mut model)[ti][entry];
                let eps = 1e-6 * base.abs().max(1.0);
                trainable_tensors_mut(&mut model)[ti][entry] = base + eps;
                let up = loss_of(&model);
                trainable_tensors_mut(&mut model)[ti][entry] = base - eps;
                let down = loss_of(&model);
                trainable_tensors_mut(&mut model)[ti][entry] = base;
                let fd = (up - down) / (2.0 * eps);
                let an = grads[ti][entry];
                approx::assert_abs_diff_eq!(fd, an, epsilon = 1e-5 * an.abs().max(1e-4));
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let ds = small_dataset(5, 4);
        let config = TrainConfig { max_epochs: 3, ..small_config() };
        let (m1, c1) = train(&ds, &config).unwrap();
        let (m2, c2) = train(&ds, &config).unwrap();
        assert_eq!(c1, c2, "training curve must be bitwise reproducible");
        assert_eq!(m1, m2);
        assert_eq!(c1.len(), 3);
        assert!(c1.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
        assert_eq!(c1[0].diverged_samples, 0);
    }

    #[test]
    fn train_matrix_records_outcomes_per_scheme() {
        let ds = small_dataset(3, 2);
        let config = TrainConfig { max_epochs: 1, ..small_config() };
        let matrix =
            baseline_train_matrix(&ds, &[StepScheme::LieT2, StepScheme::RK4], &config).unwrap();
        assert_eq!(matrix.len(), 2);
        assert_eq!(matrix[0].0, StepScheme::LieT2);
        // every outcome carries an evaluable model
        for (_, outcome) in &matrix {
            assert!(outcome.model().v_resid.is_some());
        }
    }

    #[test]
    fn config_hash_distinguishes_configs() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), TrainConfig::default().hash());
    }
}
