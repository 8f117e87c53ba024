//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and records itself on the [`Tape`]; the
//! forward value of each node stays cached until the tape is dropped.
//! Random draws never happen inside the tape: noise enters as a constant
//! input, so `backward` is a deterministic function of the recorded values.

use std::rc::Rc;

use super::error::{NumericsError, Result};
use super::kernels::{gemm, Layout};
use super::tensor::Tensor;

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    TileLast(Var),
    ExpandLeading(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    L1(Var),
    SqL2(Var),
    NormLast(Var),
    GaussianLogDensity { x: Var, mean: Var, log_std: Var },
    Reparameterize { mean: Var, log_std: Var, noise: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Elu(..) => "elu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Softmax(..) => "row_softmax",
            Op::Concat(..) => "concat_last",
            Op::Reshape(..) => "reshape",
            Op::TileLast(..) => "tile_last",
            Op::ExpandLeading(..) => "expand_leading",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::L1(..) => "l1",
            Op::SqL2(..) => "sq_l2",
            Op::NormLast(..) => "norm_last",
            Op::GaussianLogDensity { .. } => "gaussian_log_density",
            Op::Reparameterize { .. } => "reparameterize",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded expression graph with cached forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `var`, zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Output shape of an elementwise binary op that allows scalar broadcast only.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary_map(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if ad.len() == n && bd.len() == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of `var`.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(op, value, needs_grad))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(op, out, &[x])
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), Layout::Normal, bv.data(), Layout::Normal, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3
            || bv.rank() != 3
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2] != bv.shape()[1]
        {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &bv.data()[i * k * n..(i + 1) * k * n],
                Layout::Normal,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![bs, m, n], out)?;
        self.push(Op::BatchMatMul(a, b), out, &[a, b])
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (batch, rows, cols) = match *v.shape() {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => {
                return Err(NumericsError::Invalid {
                    op: "transpose",
                    msg: format!("expected rank 2 or 3, got shape {:?}", v.shape()),
                })
            }
        };
        let out = transpose_data(v.data(), batch, rows, cols);
        let mut shape = v.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(shape, out)?;
        self.push(Op::Transpose(x), out, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.value(a), self.value(b))?;
        let out = binary_map(self.value(a), self.value(b), shape, |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("sub", self.value(a), self.value(b))?;
        let out = binary_map(self.value(a), self.value(b), shape, |x, y| x - y);
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    /// Elementwise product (Hadamard), scalar broadcast allowed.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.value(a), self.value(b))?;
        let out = binary_map(self.value(a), self.value(b), shape, |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    /// Adds a fixed constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Shift(x), |a| a + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Elu(x), elu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |a| if a > 0.0 { a } else { slope * a })
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(NumericsError::Invalid {
                op: "clamp",
                msg: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.unary(x, Op::Clamp(x, lo, hi), |a| a.clamp(lo, hi))
    }

    /// Elementwise minimum of equally shaped tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("minimum", self.value(a), self.value(b))?;
        let shape = self.value(a).shape().to_vec();
        let out = binary_map(self.value(a), self.value(b), shape, f64::min);
        self.push(Op::Minimum(a, b), out, &[a, b])
    }

    /// Softmax over the last axis, max-subtracted per row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x), None)?;
        self.push(Op::Softmax(x), out, &[x])
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked-out entries are exactly zero and receive no gradient.
    pub fn masked_row_softmax(&mut self, x: Var, mask: Rc<[bool]>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_row_softmax",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = softmax_rows(self.value(x), Some(&mask))?;
        self.push(Op::Softmax(x), out, &[x])
    }

    /// Concatenation along the last (feature) axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumericsError::Invalid {
            op: "concat_last",
            msg: "no inputs".into(),
        })?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        self.push(Op::Concat(parts.to_vec()), out, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), out, &[x])
    }

    /// Repeats a trailing axis of size one `n` times: `[..., 1] -> [..., n]`.
    pub fn tile_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().last() != Some(&1) {
            return Err(NumericsError::Invalid {
                op: "tile_last",
                msg: format!("last axis must have size 1, got shape {:?}", v.shape()),
            });
        }
        let data = v.data().iter().flat_map(|&a| std::iter::repeat_n(a, n)).collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        self.push(Op::TileLast(x), out, &[x])
    }

    /// Repeats a leading axis of size one `n` times: `[1, ...] -> [n, ...]`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().first() != Some(&1) {
            return Err(NumericsError::Invalid {
                op: "expand_leading",
                msg: format!("first axis must have size 1, got shape {:?}", v.shape()),
            });
        }
        let mut data = Vec::with_capacity(v.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let out = Tensor::new(shape, data)?;
        self.push(Op::ExpandLeading(x), out, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s), &[x])
    }

    /// Sums the last axis, keeping it with size one.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let out = reduce_last(self.value(x), |row| row.iter().sum());
        self.push(Op::SumLast(x), out, &[x])
    }

    /// Entrywise L1 norm of the whole tensor.
    pub fn l1(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|a| a.abs()).sum();
        self.push(Op::L1(x), Tensor::scalar(s), &[x])
    }

    /// Squared L2 norm of the whole tensor.
    pub fn sq_l2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|a| a * a).sum();
        self.push(Op::SqL2(x), Tensor::scalar(s), &[x])
    }

    /// Euclidean norm over the last axis, keeping it with size one. The
    /// gradient at a zero row is taken to be zero.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let out = reduce_last(self.value(x), |row| row.iter().map(|a| a * a).sum::<f64>().sqrt());
        self.push(Op::NormLast(x), out, &[x])
    }

    /// Diagonal Gaussian log-density summed over the last axis.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, log_std: Var) -> Result<Var> {
        let op = "gaussian_log_density";
        same_shape(op, self.value(x), self.value(mean))?;
        same_shape(op, self.value(x), self.value(log_std))?;
        let (xv, mv, sv) = (self.value(x), self.value(mean), self.value(log_std));
        let d = last_dim(xv);
        let rows = xv.numel() / d.max(1);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = 0.0;
            for c in r * d..(r + 1) * d {
                let z = (xv.data()[c] - mv.data()[c]) * (-sv.data()[c]).exp();
                acc += -0.5 * z * z - sv.data()[c] - HALF_LN_TWO_PI;
            }
            out.push(acc);
        }
        let mut shape = xv.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        let out = Tensor::new(shape, out)?;
        self.push(Op::GaussianLogDensity { x, mean, log_std }, out, &[x, mean, log_std])
    }

    /// `mean + exp(log_std) * noise`, with the noise supplied by the caller.
    pub fn reparameterize(&mut self, mean: Var, log_std: Var, noise: Var) -> Result<Var> {
        let op = "reparameterize";
        same_shape(op, self.value(mean), self.value(log_std))?;
        same_shape(op, self.value(mean), self.value(noise))?;
        let (mv, sv, nv) = (self.value(mean), self.value(log_std), self.value(noise));
        let data = (0..mv.numel())
            .map(|i| mv.data()[i] + sv.data()[i].exp() * nv.data()[i])
            .collect();
        let out = Tensor::new(mv.shape().to_vec(), data)?;
        self.push(Op::Reparameterize { mean, log_std, noise }, out, &[mean, log_std, noise])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(NumericsError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Adds `g` (shaped like the output) into operand `v`, summing when `v`
    /// was scalar-broadcast.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(grads, v);
        if slot.len() == 1 {
            slot[0] += g.sum::<f64>();
        } else {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(grads, v);
        for (i, (s, &gi)) in slot.iter_mut().zip(g).enumerate() {
            *s += f(i, gi);
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let slot = self.slot(grads, *a);
                    gemm(m, n, k, g, Layout::Normal, bv.data(), Layout::Transposed, slot, true);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let slot = self.slot(grads, *b);
                    gemm(k, m, n, av.data(), Layout::Transposed, g, Layout::Normal, slot, true);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                if self.wants(*a) {
                    let slot = self.slot(grads, *a);
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            Layout::Normal,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            Layout::Transposed,
                            &mut slot[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.wants(*b) {
                    let slot = self.slot(grads, *b);
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            Layout::Transposed,
                            &g[i * m * n..(i + 1) * m * n],
                            Layout::Normal,
                            &mut slot[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (batch, rows, cols) = match *s {
                    [r, c] => (1, r, c),
                    [b, r, c] => (b, r, c),
                    _ => unreachable!(),
                };
                let back = transpose_data(g, batch, rows, cols);
                self.acc_map(grads, *x, &back, |_, v| v);
            }
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g.iter().copied());
                self.acc_broadcast(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(grads, *a, g.iter().copied());
                self.acc_broadcast(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                self.acc_broadcast(grads, *a, g.iter().enumerate().map(|(i, gi)| gi * pick(bv, i)));
                self.acc_broadcast(grads, *b, g.iter().enumerate().map(|(i, gi)| gi * pick(av, i)));
            }
            Op::Scale(x, c) => self.acc_map(grads, *x, g, |_, gi| gi * c),
            Op::Shift(x) => self.acc_map(grads, *x, g, |_, gi| gi),
            Op::Exp(x) => self.acc_map(grads, *x, g, |i, gi| gi * y[i]),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| gi / xv[i]);
            }
            Op::Tanh(x) => self.acc_map(grads, *x, g, |i, gi| gi * (1.0 - y[i] * y[i])),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| if xv[i] > 0.0 { gi } else { 0.0 });
            }
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| if xv[i] > 0.0 { gi } else { gi * (y[i] + 1.0) });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| if xv[i] > 0.0 { gi } else { gi * slope });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |i, gi| {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        gi
                    } else {
                        0.0
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |i, gi| if av[i] <= bv[i] { gi } else { 0.0 });
                self.acc_map(grads, *b, g, |i, gi| if av[i] <= bv[i] { 0.0 } else { gi });
            }
            Op::Softmax(x) => {
                let d = last_dim(&node.value).max(1);
                let mut back = vec![0.0; g.len()];
                for (r, (yr, gr)) in y.chunks(d).zip(g.chunks(d)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        back[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc_map(grads, *x, &back, |_, v| v);
            }
            Op::Concat(parts) => {
                let total = last_dim(&node.value);
                let rows = node.value.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = last_dim(self.value(p));
                    if self.wants(p) {
                        let slot = self.slot(grads, p);
                        for r in 0..rows {
                            for c in 0..w {
                                slot[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => self.acc_map(grads, *x, g, |_, gi| gi),
            Op::TileLast(x) => {
                let n = last_dim(&node.value).max(1);
                let back: Vec<f64> = g.chunks(n).map(|c| c.iter().sum()).collect();
                self.acc_map(grads, *x, &back, |_, v| v);
            }
            Op::ExpandLeading(x) => {
                let inner = self.value(*x).numel();
                if self.wants(*x) {
                    let slot = self.slot(grads, *x);
                    for chunk in g.chunks(inner) {
                        for (s, v) in slot.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Sum(x) => self.acc_map(grads, *x, &vec![g[0]; self.value(*x).numel()], |_, v| v),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.acc_map(grads, *x, &vec![g[0] / n as f64; n], |_, v| v);
            }
            Op::SumLast(x) => {
                let d = last_dim(self.value(*x)).max(1);
                let n = self.value(*x).numel();
                self.acc_map(grads, *x, &vec![0.0; n], |i, _| g[i / d]);
            }
            Op::L1(x) => {
                let xv = self.value(*x).data();
                let g0 = g[0];
                self.acc_map(grads, *x, &vec![0.0; xv.len()], |i, _| {
                    if xv[i] > 0.0 {
                        g0
                    } else if xv[i] < 0.0 {
                        -g0
                    } else {
                        0.0
                    }
                });
            }
            Op::SqL2(x) => {
                let xv = self.value(*x).data();
                let g0 = g[0];
                self.acc_map(grads, *x, &vec![0.0; xv.len()], |i, _| 2.0 * xv[i] * g0);
            }
            Op::NormLast(x) => {
                let xv = self.value(*x).data();
                let d = last_dim(self.value(*x)).max(1);
                self.acc_map(grads, *x, &vec![0.0; xv.len()], |i, _| {
                    let r = i / d;
                    if y[r] > 0.0 {
                        g[r] * xv[i] / y[r]
                    } else {
                        0.0
                    }
                });
            }
            Op::GaussianLogDensity { x, mean, log_std } => {
                let (xv, mv, sv) = (
                    self.value(*x).data(),
                    self.value(*mean).data(),
                    self.value(*log_std).data(),
                );
                let d = last_dim(self.value(*x)).max(1);
                let n = xv.len();
                // z / sigma for each coordinate
                let zs: Vec<f64> = (0..n)
                    .map(|i| {
                        let inv = (-sv[i]).exp();
                        (xv[i] - mv[i]) * inv * inv
                    })
                    .collect();
                let zero = vec![0.0; n];
                self.acc_map(grads, *x, &zero, |i, _| -g[i / d] * zs[i]);
                self.acc_map(grads, *mean, &zero, |i, _| g[i / d] * zs[i]);
                self.acc_map(grads, *log_std, &zero, |i, _| {
                    let z = (xv[i] - mv[i]) * (-sv[i]).exp();
                    g[i / d] * (z * z - 1.0)
                });
            }
            Op::Reparameterize {
                mean,
                log_std,
                noise,
            } => {
                let (sv, nv) = (self.value(*log_std).data(), self.value(*noise).data());
                self.acc_map(grads, *mean, g, |_, gi| gi);
                self.acc_map(grads, *log_std, g, |i, gi| gi * sv[i].exp() * nv[i]);
                self.acc_map(grads, *noise, g, |i, gi| gi * sv[i].exp());
            }
        }
    }
}

fn transpose_data(data: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = data[base + r * cols + c];
            }
        }
    }
    out
}

fn reduce_last(t: &Tensor, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let d = last_dim(t).max(1);
    let data: Vec<f64> = t.data().chunks(d).map(f).collect();
    let mut shape = t.shape().to_vec();
    if let Some(last) = shape.last_mut() {
        *last = 1;
    } else {
        shape.push(1);
    }
    Tensor::new(shape, data).expect("reduced shape")
}

fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let d = last_dim(x).max(1);
    let mut out = vec![0.0; x.numel()];
    for (r, row) in x.data().chunks(d).enumerate() {
        let keep = |c: usize| mask.is_none_or(|m| m[r * d + c]);
        let max = (0..d)
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::Invalid {
                op: "masked_row_softmax",
                msg: format!("row {r} has no unmasked entry"),
            });
        }
        let mut total = 0.0;
        for c in 0..d {
            if keep(c) {
                let e = (row[c] - max).exp();
                out[r * d + c] = e;
                total += e;
            }
        }
        for c in 0..d {
            out[r * d + c] /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
