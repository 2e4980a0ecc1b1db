//! Reverse-mode automatic differentiation over flat f64 tensors.
//!
//! The tape is built dynamically: forward values are computed as nodes
//! are created, so ordinary Rust control flow (branches on forward
//! values) works. Every numeric kernel used here is shared with the
//! untaped math types, so a taped forward pass reproduces the untaped
//! one bitwise.

use crate::error::{Error, Result};
use crate::kernels;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input (parameter or state entry).
    Leaf,
    /// Non-differentiable input.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    /// Elementwise product; either side may be a scalar broadcast.
    Mul(NodeId, NodeId),
    /// Elementwise quotient; the divisor may be a scalar broadcast.
    Div(NodeId, NodeId),
    /// `a (m x k) * b (k x n)`, row-major.
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { a: NodeId, rows: usize, cols: usize },
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    /// Euclidean norm, `sqrt(dot(a, a))`.
    Norm(NodeId),
    Cross(NodeId, NodeId),
    /// 3-vector to skew matrix.
    Hat(NodeId),
    /// Skew matrix to 3-vector (entries (2,1), (0,2), (1,0)).
    Vee(NodeId),
    Silu(NodeId),
    /// Derivative of SiLU as a forward op (so that analytic input
    /// gradients can be expressed on the tape; its backward uses the
    /// second derivative).
    SiluPrime(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Concat(Vec<NodeId>),
    Slice { a: NodeId, start: usize },
}

struct Node {
    op: Op,
    data: Vec<f64>,
}

/// A dynamically built computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu_value(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn silu_second_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, op: Op, data: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, data });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, data)
    }

    pub fn constant(&mut self, data: Vec<f64>) -> NodeId {
        self.push(Op::Constant, data)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![v])
    }

    fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].data.len()
    }

    fn check_same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.len_of(a) != self.len_of(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {} vs {}",
                self.len_of(a),
                self.len_of(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), data))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), data))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| -x).collect();
        self.push(Op::Neg(a), data)
    }

    /// Elementwise product. If one operand is a scalar it broadcasts.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        let data: Vec<f64> = if la == lb {
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(x, y)| x * y)
                .collect()
        } else if lb == 1 {
            let s = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|x| x * s).collect()
        } else if la == 1 {
            let s = self.nodes[a.0].data[0];
            self.nodes[b.0].data.iter().map(|x| s * x).collect()
        } else {
            return Err(Error::ShapeMismatch(format!("mul: {la} vs {lb}")));
        };
        Ok(self.push(Op::Mul(a, b), data))
    }

    /// Elementwise quotient. A scalar divisor broadcasts.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        let data: Vec<f64> = if la == lb {
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(x, y)| x / y)
                .collect()
        } else if lb == 1 {
            let s = self.nodes[b.0].data[0];
            self.nodes[a.0].data.iter().map(|x| x / s).collect()
        } else {
            return Err(Error::ShapeMismatch(format!("div: {la} vs {lb}")));
        };
        Ok(self.push(Op::Div(a, b), data))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, m: usize, k: usize, n: usize) -> Result<NodeId> {
        if self.len_of(a) != m * k || self.len_of(b) != k * n {
            return Err(Error::ShapeMismatch(format!(
                "matmul {m}x{k} * {k}x{n}: got lens {} and {}",
                self.len_of(a),
                self.len_of(b)
            )));
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, data))
    }

    pub fn transpose(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.len_of(a) != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "transpose {rows}x{cols}: len {}",
                self.len_of(a)
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(Op::Transpose { a, rows, cols }, data))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0;
        for x in &self.nodes[a.0].data {
            acc += x;
        }
        self.push(Op::Sum(a), vec![acc])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "dot")?;
        let v = kernels::dot(&self.nodes[a.0].data, &self.nodes[b.0].data);
        Ok(self.push(Op::Dot(a, b), vec![v]))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * x).collect();
        self.push(Op::Square(a), data)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.sqrt()).collect();
        self.push(Op::Sqrt(a), data)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| 1.0 / x).collect();
        self.push(Op::Recip(a), data)
    }

    pub fn norm(&mut self, a: NodeId) -> NodeId {
        let d = &self.nodes[a.0].data;
        let v = kernels::dot(d, d).sqrt();
        self.push(Op::Norm(a), vec![v])
    }

    pub fn cross(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.len_of(a) != 3 || self.len_of(b) != 3 {
            return Err(Error::ShapeMismatch("cross needs length-3 inputs".into()));
        }
        let x = &self.nodes[a.0].data;
        let y = &self.nodes[b.0].data;
        let data = vec![
            x[1] * y[2] - x[2] * y[1],
            x[2] * y[0] - x[0] * y[2],
            x[0] * y[1] - x[1] * y[0],
        ];
        Ok(self.push(Op::Cross(a, b), data))
    }

    pub fn hat(&mut self, v: NodeId) -> Result<NodeId> {
        if self.len_of(v) != 3 {
            return Err(Error::ShapeMismatch("hat needs a length-3 input".into()));
        }
        let u = &self.nodes[v.0].data;
        let data = vec![0.0, -u[2], u[1], u[2], 0.0, -u[0], -u[1], u[0], 0.0];
        Ok(self.push(Op::Hat(v), data))
    }

    pub fn vee(&mut self, m: NodeId) -> Result<NodeId> {
        if self.len_of(m) != 9 {
            return Err(Error::ShapeMismatch("vee needs a length-9 input".into()));
        }
        let d = &self.nodes[m.0].data;
        let data = vec![d[7], d[2], d[3]];
        Ok(self.push(Op::Vee(m), data))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| silu_value(x)).collect();
        self.push(Op::Silu(a), data)
    }

    pub fn silu_prime(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| silu_derivative(x)).collect();
        self.push(Op::SiluPrime(a), data)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.sin()).collect();
        self.push(Op::Sin(a), data)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.cos()).collect();
        self.push(Op::Cos(a), data)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(Op::Concat(parts.to_vec()), data)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if start + len > self.len_of(a) {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{} of length-{} node",
                start + len,
                self.len_of(a)
            )));
        }
        let data = self.nodes[a.0].data[start..start + len].to_vec();
        Ok(self.push(Op::Slice { a, start }, data))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient buffer
    /// per node (zero for nodes the loss does not depend on).
    pub fn grad(&self, loss: NodeId) -> Result<Gradients> {
        if self.len_of(loss) != 1 {
            return Err(Error::ShapeMismatch(format!(
                "grad needs a scalar loss, got length {}",
                self.len_of(loss)
            )));
        }
        let mut adj: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        adj[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if adj[idx].iter().all(|g| *g == 0.0) {
                continue;
            }
            // take the buffer to satisfy the borrow checker, restore below
            let g = std::mem::take(&mut adj[idx]);
            match &self.nodes[idx].op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    for (i, gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi;
                        adj[b.0][i] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (i, gi) in g.iter().enumerate() {
                        adj[a.0][i] += gi;
                        adj[b.0][i] -= gi;
                    }
                }
                Op::Neg(a) => {
                    for (i, gi) in g.iter().enumerate() {
                        adj[a.0][i] -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (la, lb) = (self.len_of(*a), self.len_of(*b));
                    let da = &self.nodes[a.0].data;
                    let db = &self.nodes[b.0].data;
                    if la == lb {
                        for i in 0..la {
                            adj[a.0][i] += g[i] * db[i];
                            adj[b.0][i] += g[i] * da[i];
                        }
                    } else if lb == 1 {
                        let s = db[0];
                        for i in 0..la {
                            adj[a.0][i] += g[i] * s;
                            adj[b.0][0] += g[i] * da[i];
                        }
                    } else {
                        let s = da[0];
                        for i in 0..lb {
                            adj[b.0][i] += g[i] * s;
                            adj[a.0][0] += g[i] * db[i];
                        }
                    }
                }
                Op::Div(a, b) => {
                    let la = self.len_of(*a);
                    let lb = self.len_of(*b);
                    let db = &self.nodes[b.0].data;
                    let y = &self.nodes[idx].data;
                    if la == lb {
                        for i in 0..la {
                            adj[a.0][i] += g[i] / db[i];
                            adj[b.0][i] -= g[i] * y[i] / db[i];
                        }
                    } else {
                        let s = db[0];
                        for i in 0..la {
                            adj[a.0][i] += g[i] / s;
                            adj[b.0][0] -= g[i] * y[i] / s;
                        }
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    // dA += G B^T, dB += A^T G
                    let da_buf = {
                        let bd = &self.nodes[b.0].data;
                        let mut out = vec![0.0; m * k];
                        kernels::matmul_tb(&g, bd, m, n, k, &mut out);
                        out
                    };
                    let db_buf = {
                        let ad = &self.nodes[a.0].data;
                        let mut out = vec![0.0; k * n];
                        kernels::matmul_ta(ad, &g, k, m, n, &mut out);
                        out
                    };
                    for (i, v) in da_buf.into_iter().enumerate() {
                        adj[a.0][i] += v;
                    }
                    for (i, v) in db_buf.into_iter().enumerate() {
                        adj[b.0][i] += v;
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            adj[a.0][i * cols + j] += g[j * rows + i];
                        }
                    }
                }
                Op::Sum(a) => {
                    for v in adj[a.0].iter_mut() {
                        *v += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let da = &self.nodes[a.0].data;
                    let db = &self.nodes[b.0].data;
                    for i in 0..da.len() {
                        adj[a.0][i] += g[0] * db[i];
                        adj[b.0][i] += g[0] * da[i];
                    }
                }
                Op::Square(a) => {
                    let da = &self.nodes[a.0].data;
                    for i in 0..da.len() {
                        adj[a.0][i] += g[i] * 2.0 * da[i];
                    }
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[idx].data;
                    for i in 0..y.len() {
                        adj[a.0][i] += g[i] * 0.5 / y[i];
                    }
                }
                Op::Recip(a) => {
                    let y = &self.nodes[idx].data;
                    for i in 0..y.len() {
                        adj[a.0][i] -= g[i] * y[i] * y[i];
                    }
                }
                Op::Norm(a) => {
                    let y = self.nodes[idx].data[0];
                    let da = &self.nodes[a.0].data;
                    for i in 0..da.len() {
                        adj[a.0][i] += g[0] * da[i] / y;
                    }
                }
                Op::Cross(a, b) => {
                    let x = &self.nodes[a.0].data;
                    let y = &self.nodes[b.0].data;
                    // d/da (a x b)^T g = b x g ; d/db = g x a
                    adj[a.0][0] += y[1] * g[2] - y[2] * g[1];
                    adj[a.0][1] += y[2] * g[0] - y[0] * g[2];
                    adj[a.0][2] += y[0] * g[1] - y[1] * g[0];
                    adj[b.0][0] += g[1] * x[2] - g[2] * x[1];
                    adj[b.0][1] += g[2] * x[0] - g[0] * x[2];
                    adj[b.0][2] += g[0] * x[1] - g[1] * x[0];
                }
                Op::Hat(v) => {
                    adj[v.0][0] += g[7] - g[5];
                    adj[v.0][1] += g[2] - g[6];
                    adj[v.0][2] += g[3] - g[1];
                }
                Op::Vee(m) => {
                    adj[m.0][7] += g[0];
                    adj[m.0][2] += g[1];
                    adj[m.0][3] += g[2];
                }
                Op::Silu(a) => {
                    let da = &self.nodes[a.0].data;
                    for i in 0..da.len() {
                        adj[a.0][i] += g[i] * silu_derivative(da[i]);
                    }
                }
                Op::SiluPrime(a) => {
                    let da = &self.nodes[a.0].data;
                    for i in 0..da.len() {
                        adj[a.0][i] += g[i] * silu_second_derivative(da[i]);
                    }
                }
                Op::Sin(a) => {
                    let da = &self.nodes[a.0].data;
                    for i in 0..da.len() {
                        adj[a.0][i] += g[i] * da[i].cos();
                    }
                }
                Op::Cos(a) => {
                    let da = &self.nodes[a.0].data;
                    for i in 0..da.len() {
                        adj[a.0][i] -= g[i] * da[i].sin();
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let l = self.len_of(*p);
                        for i in 0..l {
                            adj[p.0][i] += g[offset + i];
                        }
                        offset += l;
                    }
                }
                Op::Slice { a, start } => {
                    for (i, gi) in g.iter().enumerate() {
                        adj[a.0][start + i] += gi;
                    }
                }
            }
            adj[idx] = g;
        }
        Ok(Gradients { adj })
    }
}

/// Per-node gradient buffers produced by [`Tape::grad`].
pub struct Gradients {
    adj: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &[f64] {
        &self.adj[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Finite-difference check: perturb each input entry by
    /// `eps = 1e-6 * max(1, |x|)` and compare central differences of the
    /// scalarized output (dotted against fixed weights) to the tape
    /// gradient, rel <= 1e-6.
    fn fd_check<F>(inputs: &[Vec<f64>], build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &ids);
        // scalarize with fixed pseudo-random weights
        let out_len = tape.value(out).len();
        let weights: Vec<f64> = (0..out_len).map(|i| 0.3 + 0.1 * i as f64).collect();
        let w = tape.constant(weights.clone());
        let loss = tape.dot(out, w).unwrap();
        let grads = tape.grad(loss).unwrap();

        for (arg, input) in inputs.iter().enumerate() {
            for entry in 0..input.len() {
                let eps = 1e-6 * input[entry].abs().max(1.0);
                let run = |delta: f64| -> f64 {
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let mut v = v.clone();
                            if i == arg {
                                v[entry] += delta;
                            }
                            t.leaf(v)
                        })
                        .collect();
                    let out = build(&mut t, &ids);
                    kernels::dot(t.value(out), &weights)
                };
                let fd = (run(eps) - run(-eps)) / (2.0 * eps);
                let an = grads.wrt(ids[arg])[entry];
                let tol = 1e-6 * an.abs().max(1.0);
                assert_abs_diff_eq!(fd, an, epsilon = tol);
            }
        }
    }

    fn rand_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    /// Values bounded away from zero, for sqrt/recip/norm.
    fn rand_vec_pos(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.5..2.5)).collect()
    }

    #[test]
    fn primitive_vjps_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5 {
            let a = rand_vec(&mut rng, 6);
            let b = rand_vec(&mut rng, 6);
            let s = rand_vec(&mut rng, 1);
            let p = rand_vec_pos(&mut rng, 6);
            let m33 = rand_vec(&mut rng, 9);
            let m32 = rand_vec(&mut rng, 6);
            let v3 = rand_vec(&mut rng, 3);
            let u3 = rand_vec(&mut rng, 3);

            fd_check(&[a.clone(), b.clone()], |t, ids| t.add(ids[0], ids[1]).unwrap());
            fd_check(&[a.clone(), b.clone()], |t, ids| t.sub(ids[0], ids[1]).unwrap());
            fd_check(&[a.clone()], |t, ids| t.neg(ids[0]));
            fd_check(&[a.clone(), b.clone()], |t, ids| t.mul(ids[0], ids[1]).unwrap());
            fd_check(&[a.clone(), s.clone()], |t, ids| t.mul(ids[0], ids[1]).unwrap());
            fd_check(&[s.clone(), a.clone()], |t, ids| t.mul(ids[0], ids[1]).unwrap());
            fd_check(&[a.clone(), p.clone()], |t, ids| t.div(ids[0], ids[1]).unwrap());
            fd_check(&[a.clone(), rand_vec_pos(&mut rng.clone(), 1)], |t, ids| {
                t.div(ids[0], ids[1]).unwrap()
            });
            fd_check(&[m33.clone(), m32.clone()], |t, ids| {
                t.matmul(ids[0], ids[1], 3, 3, 2).unwrap()
            });
            fd_check(&[m32.clone()], |t, ids| t.transpose(ids[0], 3, 2).unwrap());
            fd_check(&[a.clone()], |t, ids| t.sum(ids[0]));
            fd_check(&[a.clone(), b.clone()], |t, ids| t.dot(ids[0], ids[1]).unwrap());
            fd_check(&[a.clone()], |t, ids| t.square(ids[0]));
            fd_check(&[p.clone()], |t, ids| t.sqrt(ids[0]));
            fd_check(&[p.clone()], |t, ids| t.recip(ids[0]));
            fd_check(&[p.clone()], |t, ids| t.norm(ids[0]));
            fd_check(&[v3.clone(), u3.clone()], |t, ids| t.cross(ids[0], ids[1]).unwrap());
            fd_check(&[v3.clone()], |t, ids| t.hat(ids[0]).unwrap());
            fd_check(&[m33.clone()], |t, ids| t.vee(ids[0]).unwrap());
            fd_check(&[a.clone()], |t, ids| t.silu(ids[0]));
            fd_check(&[a.clone()], |t, ids| t.silu_prime(ids[0]));
            fd_check(&[a.clone()], |t, ids| t.sin(ids[0]));
            fd_check(&[a.clone()], |t, ids| t.cos(ids[0]));
            fd_check(&[v3.clone(), a.clone()], |t, ids| t.concat(&[ids[0], ids[1]]));
            fd_check(&[a.clone()], |t, ids| t.slice(ids[0], 1, 3).unwrap());
        }
    }

    #[test]
    fn silu_spot_values() {
        assert_eq!(silu_value(0.0), 0.0);
        assert_abs_diff_eq!(silu_derivative(0.0), 0.5);
    }

    #[test]
    fn square_gradient_spot_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0]);
        let y = tape.square(x);
        let grads = tape.grad(y).unwrap();
        assert_eq!(grads.wrt(x), &[6.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let theta = tape.leaf(vec![1.0, -2.0, 0.5]);
        let sq = tape.square(theta);
        let loss = tape.sum(sq);
        let grads = tape.grad(loss).unwrap();
        assert_eq!(grads.wrt(theta), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(vec![2.0]);
        let unused = tape.leaf(vec![5.0]);
        let loss = tape.square(used);
        let grads = tape.grad(loss).unwrap();
        assert_eq!(grads.wrt(unused), &[0.0]);
        assert_eq!(grads.wrt(used), &[4.0]);
    }

    #[test]
    fn grad_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0]);
        assert!(matches!(tape.grad(x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0]);
        let b = tape.leaf(vec![1.0, 2.0, 3.0]);
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.dot(a, b).is_err());
        assert!(tape.matmul(a, b, 2, 2, 2).is_err());
        assert!(tape.cross(a, b).is_err());
        assert!(tape.slice(a, 1, 5).is_err());
    }

    #[test]
    fn taped_matmul_matches_kernel_bitwise() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = rand_vec(&mut rng, 12);
        let b = rand_vec(&mut rng, 20);
        let mut expect = vec![0.0; 15];
        kernels::matmul(&a, &b, 3, 4, 5, &mut expect);
        let mut tape = Tape::new();
        let na = tape.constant(a);
        let nb = tape.constant(b);
        let c = tape.matmul(na, nb, 3, 4, 5).unwrap();
        assert_eq!(tape.value(c), expect.as_slice());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0]);
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let grads = tape.grad(y).unwrap();
        assert_eq!(grads.wrt(x), &[7.0]);
    }
}
