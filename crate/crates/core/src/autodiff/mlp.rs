//! The residual networks: fixed 3-hidden-layer SiLU MLPs with a linear
//! head. A scalar-output net models the residual potential; a
//! vector-output net models the forcing.
//!
//! Forward and input-gradient evaluation exist twice: as pure `f64`
//! functions (used by simulation/metrics) and as tape expressions (used
//! by training). Both route through the same kernels in the same order,
//! so their outputs agree bitwise.

use rand::Rng;

use crate::autodiff::tape::{silu_derivative, silu_value, NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels;

/// Guard added to standard deviations when building input
/// normalizations, so constant coordinates don't divide by zero.
pub const INPUT_NORM_EPS: f64 = 1e-8;

/// Number of hidden layers (fixed architecture).
const N_HIDDEN_LAYERS: usize = 3;

/// Parameters of one MLP: 3 hidden layers of `hidden` units with SiLU,
/// linear output head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// `hidden x in_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden x hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `hidden x hidden`.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    /// `out_dim x hidden`; zero-initialized so the untrained model
    /// coincides with the known-physics baseline.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl MlpParams {
    /// Hidden layers uniform in (-sqrt(1/fan_in), +sqrt(1/fan_in)),
    /// output head zeroed.
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::InvalidParameter("MLP dimensions must be positive".into()));
        }
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        Ok(MlpParams {
            in_dim,
            hidden,
            out_dim,
            w1: uniform(hidden * in_dim, in_dim),
            b1: uniform(hidden, in_dim),
            w2: uniform(hidden * hidden, hidden),
            b2: uniform(hidden, hidden),
            w3: uniform(hidden * hidden, hidden),
            b3: uniform(hidden, hidden),
            w_out: vec![0.0; out_dim * hidden],
            b_out: vec![0.0; out_dim],
        })
    }

    /// Parameter tensors in a fixed order (shared by the optimizer and
    /// the checkpoint format).
    pub fn tensor_names() -> [&'static str; 8] {
        ["w1", "b1", "w2", "b2", "w3", "b3", "w_out", "b_out"]
    }

    pub fn tensors(&self) -> [&Vec<f64>; 8] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "MLP input length {len}, expected {}",
                self.in_dim
            )));
        }
        Ok(())
    }

    fn layer(&self, w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut z = vec![0.0; rows];
        kernels::matmul(w, x, rows, cols, 1, &mut z);
        for i in 0..rows {
            z[i] += b[i];
        }
        z
    }

    /// Pre-activations of the three hidden layers plus the output.
    fn forward_full(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let z1 = self.layer(&self.w1, &self.b1, x, h, self.in_dim);
        let a1: Vec<f64> = z1.iter().map(|&v| silu_value(v)).collect();
        let z2 = self.layer(&self.w2, &self.b2, &a1, h, h);
        let a2: Vec<f64> = z2.iter().map(|&v| silu_value(v)).collect();
        let z3 = self.layer(&self.w3, &self.b3, &a2, h, h);
        let a3: Vec<f64> = z3.iter().map(|&v| silu_value(v)).collect();
        let out = self.layer(&self.w_out, &self.b_out, &a3, self.out_dim, h);
        (z1, z2, z3, out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        Ok(self.forward_full(x).3)
    }

    /// Scalar-output convenience.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        if self.out_dim != 1 {
            return Err(Error::ShapeMismatch(format!(
                "value() needs out_dim 1, got {}",
                self.out_dim
            )));
        }
        Ok(self.forward(x)?[0])
    }

    /// Gradient of the scalar output with respect to the input, as an
    /// explicit backward-through-the-layers formula:
    /// `W1^T (s1' o W2^T (s2' o W3^T (s3' o w_out)))`
    /// with `s_k' = silu'(z_k)`.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.out_dim != 1 {
            return Err(Error::ShapeMismatch(format!(
                "input_gradient() needs out_dim 1, got {}",
                self.out_dim
            )));
        }
        self.check_input(x.len())?;
        let h = self.hidden;
        let (z1, z2, z3, _) = self.forward_full(x);
        let u3: Vec<f64> =
            z3.iter().zip(&self.w_out).map(|(&z, &w)| silu_derivative(z) * w).collect();
        let mut t = vec![0.0; h];
        kernels::matmul_ta(&self.w3, &u3, h, h, 1, &mut t);
        let u2: Vec<f64> = z2.iter().zip(&t).map(|(&z, &v)| silu_derivative(z) * v).collect();
        kernels::matmul_ta(&self.w2, &u2, h, h, 1, &mut t);
        let u1: Vec<f64> = z1.iter().zip(&t).map(|(&z, &v)| silu_derivative(z) * v).collect();
        let mut gx = vec![0.0; self.in_dim];
        kernels::matmul_ta(&self.w1, &u1, self.in_dim, h, 1, &mut gx);
        Ok(gx)
    }
}

/// Tape node ids for one MLP's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

impl MlpNodes {
    /// Registers every parameter tensor as a differentiable leaf.
    pub fn leaves(params: &MlpParams, tape: &mut Tape) -> MlpNodes {
        MlpNodes {
            w1: tape.leaf(params.w1.clone()),
            b1: tape.leaf(params.b1.clone()),
            w2: tape.leaf(params.w2.clone()),
            b2: tape.leaf(params.b2.clone()),
            w3: tape.leaf(params.w3.clone()),
            b3: tape.leaf(params.b3.clone()),
            w_out: tape.leaf(params.w_out.clone()),
            b_out: tape.leaf(params.b_out.clone()),
        }
    }

    pub fn ids(&self) -> [NodeId; 8] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3, self.w_out, self.b_out]
    }
}

fn taped_layer(
    tape: &mut Tape,
    w: NodeId,
    b: NodeId,
    x: NodeId,
    rows: usize,
    cols: usize,
) -> Result<NodeId> {
    let z = tape.matmul(w, x, rows, cols, 1)?;
    tape.add(z, b)
}

/// Taped forward pass; hidden pre-activations are returned for the
/// taped input-gradient expression.
pub fn mlp_forward_taped(
    params: &MlpParams,
    nodes: &MlpNodes,
    tape: &mut Tape,
    x: NodeId,
) -> Result<(NodeId, [NodeId; N_HIDDEN_LAYERS])> {
    let h = params.hidden;
    let z1 = taped_layer(tape, nodes.w1, nodes.b1, x, h, params.in_dim)?;
    let a1 = tape.silu(z1);
    let z2 = taped_layer(tape, nodes.w2, nodes.b2, a1, h, h)?;
    let a2 = tape.silu(z2);
    let z3 = taped_layer(tape, nodes.w3, nodes.b3, a2, h, h)?;
    let a3 = tape.silu(z3);
    let out = taped_layer(tape, nodes.w_out, nodes.b_out, a3, params.out_dim, h)?;
    Ok((out, [z1, z2, z3]))
}

/// Taped scalar-output input gradient, mirroring
/// [`MlpParams::input_gradient`] expression for expression. Because the
/// gradient is itself a forward tape expression, differentiating a loss
/// that consumes it reaches the parameters through silu'' — no nested
/// backward pass is needed.
pub fn mlp_input_gradient_taped(
    params: &MlpParams,
    nodes: &MlpNodes,
    tape: &mut Tape,
    x: NodeId,
) -> Result<NodeId> {
    if params.out_dim != 1 {
        return Err(Error::ShapeMismatch(format!(
            "taped input gradient needs out_dim 1, got {}",
            params.out_dim
        )));
    }
    let h = params.hidden;
    let (_, [z1, z2, z3]) = mlp_forward_taped(params, nodes, tape, x)?;
    let s3 = tape.silu_prime(z3);
    let u3 = tape.mul(s3, nodes.w_out)?;
    let w3t = tape.transpose(nodes.w3, h, h)?;
    let t3 = tape.matmul(w3t, u3, h, h, 1)?;
    let s2 = tape.silu_prime(z2);
    let u2 = tape.mul(s2, t3)?;
    let w2t = tape.transpose(nodes.w2, h, h)?;
    let t2 = tape.matmul(w2t, u2, h, h, 1)?;
    let s1 = tape.silu_prime(z1);
    let u1 = tape.mul(s1, t2)?;
    let w1t = tape.transpose(nodes.w1, h, params.in_dim)?;
    tape.matmul(w1t, u1, params.in_dim, h, 1)
}
