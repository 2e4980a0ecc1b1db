//! The learned dynamics model: known point-mass physics plus MLP
//! residual potential and optional MLP forcing, with input
//! normalization. The untaped evaluation here mirrors the taped
//! expressions in [`super::taped`] operation for operation, so both
//! produce bitwise-identical forward values.

use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::mlp::{MlpParams, INPUT_NORM_EPS};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::potentials::{ForcingModel, PointMassGravity, PotentialEval, PotentialModel};
use crate::rigidbody::SystemParams;

/// Entries of the V-net input per body: q (3) + R (9).
pub const V_INPUT_PER_BODY: usize = 12;
/// Entries of the F-net input per body: q (3) + R (9) + p (3) + Pi (3).
pub const F_INPUT_PER_BODY: usize = 18;
/// Entries of the F-net output per body: F_p (3) + F_Pi (3).
pub const F_OUTPUT_PER_BODY: usize = 6;

/// Per-coordinate affine input normalization `(x - mu) * inv_sigma`.
/// Coordinates excluded from normalization carry mu = 0, inv_sigma = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mu: Vec<f64>,
    pub inv_sigma: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        InputNorm { mu: vec![0.0; dim], inv_sigma: vec![1.0; dim] }
    }

    /// Mean/std statistics over sample rows. `mask[k] = false` leaves
    /// coordinate k un-normalized (used for rotation entries, which are
    /// already O(1) and whose offsets are structural).
    pub fn from_samples(samples: &[Vec<f64>], mask: &[bool]) -> Result<Self> {
        let dim = mask.len();
        if samples.is_empty() {
            return Ok(InputNorm::identity(dim));
        }
        for s in samples {
            if s.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "normalization sample length {} vs mask length {dim}",
                    s.len()
                )));
            }
        }
        let n = samples.len() as f64;
        let mut mu = vec![0.0; dim];
        for s in samples {
            for (m, v) in mu.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for k in 0..dim {
                let d = s[k] - mu[k];
                var[k] += d * d;
            }
        }
        let mut inv_sigma = vec![0.0; dim];
        for k in 0..dim {
            if mask[k] {
                // floor the std at a fraction of the coordinate scale:
                // a near-constant coordinate must not be whitened into a
                // huge gain that the input-gradient unscaling amplifies
                let std = (var[k] / n).sqrt();
                let floor = 1e-3 * mu[k].abs().max(1.0);
                inv_sigma[k] = 1.0 / (std.max(floor) + INPUT_NORM_EPS);
            } else {
                mu[k] = 0.0;
                inv_sigma[k] = 1.0;
            }
        }
        Ok(InputNorm { mu, inv_sigma })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mu.iter().zip(&self.inv_sigma))
            .map(|(v, (m, s))| (v - m) * s)
            .collect()
    }

    /// Chain rule through `normalize`: gradients w.r.t. the raw input.
    pub fn unscale_gradient(&self, g_norm: &[f64]) -> Vec<f64> {
        g_norm.iter().zip(&self.inv_sigma).map(|(g, s)| g * s).collect()
    }
}

/// Normalization mask for the V-net input (q yes, R no).
pub fn v_input_mask(n_bodies: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(n_bodies * V_INPUT_PER_BODY);
    for _ in 0..n_bodies {
        mask.extend_from_slice(&[true; 3]);
        mask.extend_from_slice(&[false; 9]);
    }
    mask
}

/// Normalization mask for the F-net input (q, p, Pi yes, R no).
pub fn f_input_mask(n_bodies: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(n_bodies * F_INPUT_PER_BODY);
    for _ in 0..n_bodies {
        mask.extend_from_slice(&[true; 3]);
        mask.extend_from_slice(&[false; 9]);
        mask.extend_from_slice(&[true; 3]);
        mask.extend_from_slice(&[true; 3]);
    }
    mask
}

/// Raw (un-normalized) V-net input: per body q then R, row-major.
pub fn v_input(q: &[Vec3], r: &[Mat3]) -> Vec<f64> {
    let mut x = Vec::with_capacity(q.len() * V_INPUT_PER_BODY);
    for i in 0..q.len() {
        x.extend_from_slice(&q[i].to_array());
        x.extend_from_slice(&r[i].m);
    }
    x
}

/// Raw F-net input: per body q, R, p, Pi.
pub fn f_input(q: &[Vec3], r: &[Mat3], p: &[Vec3], pi: &[Vec3]) -> Vec<f64> {
    let mut x = Vec::with_capacity(q.len() * F_INPUT_PER_BODY);
    for i in 0..q.len() {
        x.extend_from_slice(&q[i].to_array());
        x.extend_from_slice(&r[i].m);
        x.extend_from_slice(&p[i].to_array());
        x.extend_from_slice(&pi[i].to_array());
    }
    x
}

/// Learned dynamics: the known point-mass potential is always present;
/// the residual potential and the forcing are optional networks.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedDynamics {
    pub v_resid: Option<MlpParams>,
    pub v_norm: InputNorm,
    pub forcing: Option<MlpParams>,
    pub f_norm: InputNorm,
    /// When set, the forcing network is ignored even if present.
    pub conservative_only: bool,
    /// Fixed output scale of the residual potential, calibrated at
    /// initialization so the network's natural O(1) weight regime maps
    /// onto the physical magnitude of the residual forces.
    pub v_scale: f64,
    /// Fixed output scale of the forcing network.
    pub f_scale: f64,
}

impl LearnedDynamics {
    /// The zero-correction baseline: pure point-mass physics.
    pub fn baseline(n_bodies: usize) -> Self {
        LearnedDynamics {
            v_resid: None,
            v_norm: InputNorm::identity(n_bodies * V_INPUT_PER_BODY),
            forcing: None,
            f_norm: InputNorm::identity(n_bodies * F_INPUT_PER_BODY),
            conservative_only: true,
            v_scale: 1.0,
            f_scale: 1.0,
        }
    }

    pub fn potential(&self) -> LearnedPotential<'_> {
        LearnedPotential {
            residual: self.v_resid.as_ref(),
            norm: &self.v_norm,
            scale: self.v_scale,
        }
    }

    pub fn forcing_model(&self) -> LearnedForcing<'_> {
        let net = if self.conservative_only { None } else { self.forcing.as_ref() };
        LearnedForcing { net, norm: &self.f_norm, scale: self.f_scale }
    }

    /// All trainable tensors in a fixed order (V-net tensors first).
    pub fn trainable_shapes(&self) -> Vec<usize> {
        let mut shapes = Vec::new();
        if let Some(v) = &self.v_resid {
            shapes.extend(v.tensors().iter().map(|t| t.len()));
        }
        if !self.conservative_only {
            if let Some(f) = &self.forcing {
                shapes.extend(f.tensors().iter().map(|t| t.len()));
            }
        }
        shapes
    }

    pub fn to_checkpoint(&self, config_hash: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(config_hash);
        ck.push("conservative_only", vec![if self.conservative_only { 1.0 } else { 0.0 }]);
        if let Some(v) = &self.v_resid {
            ck.push("v.dims", vec![v.in_dim as f64, v.hidden as f64, v.out_dim as f64]);
            for (name, t) in MlpParams::tensor_names().iter().zip(v.tensors()) {
                ck.push(&format!("v.{name}"), t.clone());
            }
        }
        ck.push("v.scale", vec![self.v_scale]);
        ck.push("v_norm.mu", self.v_norm.mu.clone());
        ck.push("v_norm.inv_sigma", self.v_norm.inv_sigma.clone());
        if let Some(f) = &self.forcing {
            ck.push("f.dims", vec![f.in_dim as f64, f.hidden as f64, f.out_dim as f64]);
            for (name, t) in MlpParams::tensor_names().iter().zip(f.tensors()) {
                ck.push(&format!("f.{name}"), t.clone());
            }
        }
        ck.push("f.scale", vec![self.f_scale]);
        ck.push("f_norm.mu", self.f_norm.mu.clone());
        ck.push("f_norm.inv_sigma", self.f_norm.inv_sigma.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let conservative_only = ck.get("conservative_only")?[0] != 0.0;
        let load_net = |prefix: &str| -> Result<Option<MlpParams>> {
            let dims_name = format!("{prefix}.dims");
            if ck.arrays.iter().all(|(n, _)| *n != dims_name) {
                return Ok(None);
            }
            let dims = ck.get(&dims_name)?;
            let (in_dim, hidden, out_dim) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
            let mut net = MlpParams {
                in_dim,
                hidden,
                out_dim,
                w1: Vec::new(),
                b1: Vec::new(),
                w2: Vec::new(),
                b2: Vec::new(),
                w3: Vec::new(),
                b3: Vec::new(),
                w_out: Vec::new(),
                b_out: Vec::new(),
            };
            for (name, t) in MlpParams::tensor_names().iter().zip(net.tensors_mut()) {
                *t = ck.get(&format!("{prefix}.{name}"))?.to_vec();
            }
            Ok(Some(net))
        };
        Ok(LearnedDynamics {
            v_resid: load_net("v")?,
            v_norm: InputNorm {
                mu: ck.get("v_norm.mu")?.to_vec(),
                inv_sigma: ck.get("v_norm.inv_sigma")?.to_vec(),
            },
            forcing: load_net("f")?,
            f_norm: InputNorm {
                mu: ck.get("f_norm.mu")?.to_vec(),
                inv_sigma: ck.get("f_norm.inv_sigma")?.to_vec(),
            },
            conservative_only,
            v_scale: ck.get("v.scale")?[0],
            f_scale: ck.get("f.scale")?[0],
        })
    }
}

/// Point-mass gravity plus the residual network.
pub struct LearnedPotential<'a> {
    pub residual: Option<&'a MlpParams>,
    pub norm: &'a InputNorm,
    pub scale: f64,
}

impl PotentialModel for LearnedPotential<'_> {
    fn evaluate(&self, q: &[Vec3], r: &[Mat3], params: &SystemParams) -> Result<PotentialEval> {
        let mut out = PointMassGravity.evaluate(q, r, params)?;
        if let Some(net) = self.residual {
            let x = v_input(q, r);
            let xn = self.norm.normalize(&x);
            out.value += net.value(&xn)? * self.scale;
            let g_norm = net.input_gradient(&xn)?;
            let mut g = self.norm.unscale_gradient(&g_norm);
            for v in g.iter_mut() {
                *v *= self.scale;
            }
            for i in 0..q.len() {
                let base = i * V_INPUT_PER_BODY;
                out.grad_q[i] =
                    out.grad_q[i] + Vec3::new(g[base], g[base + 1], g[base + 2]);
                let mut dm = [0.0; 9];
                dm.copy_from_slice(&g[base + 3..base + 12]);
                out.grad_r[i] = out.grad_r[i].add(&Mat3 { m: dm });
            }
        }
        Ok(out)
    }

    fn has_rotation_dependence(&self) -> bool {
        self.residual.is_some()
    }
}

/// The forcing network; `net = None` is the zero forcing.
pub struct LearnedForcing<'a> {
    pub net: Option<&'a MlpParams>,
    pub norm: &'a InputNorm,
    pub scale: f64,
}

impl ForcingModel for LearnedForcing<'_> {
    fn evaluate(
        &self,
        q: &[Vec3],
        r: &[Mat3],
        p: &[Vec3],
        pi: &[Vec3],
        _params: &SystemParams,
    ) -> (Vec<Vec3>, Vec<Vec3>) {
        let n = q.len();
        let Some(net) = self.net else {
            return (vec![Vec3::ZERO; n], vec![Vec3::ZERO; n]);
        };
        let x = f_input(q, r, p, pi);
        let xn = self.norm.normalize(&x);
        let mut y = net.forward(&xn).expect("forcing net dimensioned at construction");
        for v in y.iter_mut() {
            *v *= self.scale;
        }
        let mut f_p = Vec::with_capacity(n);
        let mut f_pi = Vec::with_capacity(n);
        for i in 0..n {
            let base = i * F_OUTPUT_PER_BODY;
            f_p.push(Vec3::new(y[base], y[base + 1], y[base + 2]));
            f_pi.push(Vec3::new(y[base + 3], y[base + 4], y[base + 5]));
        }
        (f_p, f_pi)
    }

    fn is_zero(&self) -> bool {
        self.net.is_none()
    }
}
