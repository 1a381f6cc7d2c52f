//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every primitive applied to its nodes in topological
//! order (inputs always precede outputs). Leaves are either trainable
//! parameters ([`Graph::param`]) or frozen constants ([`Graph::constant`]);
//! leaves may borrow their tensor so frozen backbone weights are never copied
//! into a per-sample graph.
//!
//! Broadcasting only expands leading unit dimensions of the *right* operand:
//! `(m, n) + (1, n)` and `(m, n) + (n)` are accepted, anything else is a shape
//! error.
//!
//! [`Graph::backward`] may be called once per graph. A second call returns
//! [`TensorError::AlreadyBackpropagated`] instead of accumulating.

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `sqrt(2 / pi)` used by the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;
/// Epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    AlreadyBackpropagated,
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("non-finite value at parameter {param} entry {index}")]
    NonFinite { param: usize, index: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor. `data.len()` always equals the product of `shape`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Rows of a rank-2 tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a rank-2 tensor (length for vectors).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { input: Var, rstd: Vec<f64> },
    Mse(Var, Var),
    MeanAxis { input: Var, axis: usize },
    Sum(Var),
    Transpose(Var),
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(big: &[usize], small: &[usize]) -> bool {
    if big == small {
        return true;
    }
    let trimmed: &[usize] = {
        let lead = small.iter().take_while(|&&d| d == 1).count();
        &small[lead..]
    };
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == *trimmed
}

fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Applies an activation elementwise to plain values.
pub fn activate(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Gelu => gelu(x),
        Activation::Relu => x.max(0.0),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen leaf borrowing `t`; never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen leaf owning `t`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf owning `t`.
    pub fn owned_param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to `v`; `None` for frozen nodes or
    /// before [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.as_matrix("matmul")?;
        let (k2, n) = tb.as_matrix("matmul")?;
        if ta.shape.len() != 2 || tb.shape.len() != 2 || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let out = matmul_raw(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(&ta.shape, &tb.shape) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let bl = tb.data.len();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data[i % bl]))
            .collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product with leading-1 broadcasting of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * s).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| gelu(x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Gelu => self.gelu(a),
            Activation::Relu => self.relu(a),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols().max(1);
        let mut data = ta.data.clone();
        let mut rstds = Vec::with_capacity(data.len() / c);
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(t, Op::LayerNorm { input: a, rstd: rstds }, rg)
    }

    /// Mean of squared differences over all entries, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.data.len() != tb.data.len() || ta.data.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let n = ta.data.len() as f64;
        let v = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    /// Mean over `axis` of a rank-2 tensor, keeping the reduced axis as 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 || axis > 1 {
            return Err(TensorError::Rank {
                op: "mean_axis",
                expected: 2,
                shape: ta.shape.clone(),
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let t = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, x) in out.iter_mut().zip(ta.row(i)) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= r as f64);
            Tensor {
                shape: vec![1, c],
                data: out,
            }
        } else {
            let out = (0..r)
                .map(|i| ta.row(i).iter().sum::<f64>() / c as f64)
                .collect();
            Tensor {
                shape: vec![r, 1],
                data: out,
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MeanAxis { input: a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: ta.shape.clone(),
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(a),
            rg,
        ))
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 || start + len > ta.shape[1] {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                reason: format!("columns {start}..{} out of {:?}", start + len, ta.shape),
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![r, len],
                data,
            },
            Op::SliceCols { input: a, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape.len() != 2 || t.shape[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(*first).shape.clone(),
                    right: t.shape.clone(),
                });
            }
            total += t.shape[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits` (rows = samples) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = tl.as_matrix("cross_entropy")?;
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                reason: format!("labels {labels:?} do not fit logits {:?}", tl.shape),
            });
        }
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &tl.data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[l];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / r as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Fills gradients for every node that
    /// requires one. Runs at most once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only keep gradients for nodes that asked for them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Gradient w.r.t. a right operand broadcast into `big`.
    fn reduce_broadcast(g: &[f64], small_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; small_len];
        for (i, x) in g.iter().enumerate() {
            out[i % small_len] += x;
        }
        out
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            da[i * k + p] = g[i * n..(i + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.to_vec());
                if self.nodes[b.0].requires_grad {
                    let bl = self.value(*b).data.len();
                    let mut db = Self::reduce_broadcast(g, bl);
                    if sign < 0.0 {
                        db.iter_mut().for_each(|x| *x = -*x);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bl = tb.data.len();
                if self.nodes[a.0].requires_grad {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * tb.data[i % bl])
                        .collect();
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let prod: Vec<f64> = g.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Self::reduce_broadcast(&prod, bl));
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = g
                    .iter()
                    .zip(&ta.data)
                    .map(|(x, &v)| x * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = g
                    .iter()
                    .zip(&ta.data)
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let c = out.cols().max(1);
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), srow) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data.chunks(c))
                {
                    let dot: f64 = grow.iter().zip(srow).map(|(x, y)| x * y).sum();
                    for ((o, gi), si) in drow.iter_mut().zip(grow).zip(srow) {
                        *o = si * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { input, rstd } => {
                let c = out.cols().max(1);
                let cf = c as f64;
                let mut d = vec![0.0; g.len()];
                for (r, ((drow, grow), yrow)) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data.chunks(c))
                    .enumerate()
                {
                    let mg = grow.iter().sum::<f64>() / cf;
                    let mgy = grow.iter().zip(yrow).map(|(x, y)| x * y).sum::<f64>() / cf;
                    for ((o, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o = rstd[r] * (gi - mg - yi * mgy);
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.data.len() as f64;
                let diff: Vec<f64> = ta
                    .data
                    .iter()
                    .zip(&tb.data)
                    .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                    .collect();
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, diff.iter().map(|x| -x).collect());
                }
                self.accumulate(grads, *a, diff);
            }
            Op::MeanAxis { input, axis } => {
                let ti = self.value(*input);
                let (r, c) = (ti.shape[0], ti.shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = if *axis == 0 {
                            g[j] / r as f64
                        } else {
                            g[i] / c as f64
                        };
                    }
                }
                self.accumulate(grads, *input, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).data.len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols { input, start } => {
                let ti = self.value(*input);
                let (r, c) = (ti.shape[0], ti.shape[1]);
                let len = out.shape[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *input, d);
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let r = labels.len() as f64;
                let mut d = vec![0.0; tl.data.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let row = &tl.data[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / sum;
                        let y = if j == l { 1.0 } else { 0.0 };
                        d[i * c + j] = (p - y) / r * g[0];
                    }
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `function` builds a scalar loss from the parameter variables it is handed.
/// Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<'a, F>(function: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Invalid {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.owned_param(p.clone())).collect();
        let loss = function(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.owned_param(p.clone())).collect();
        let loss = function(&mut g, &vars)?;
        if !g.value(loss).item().is_finite() {
            return Err(TensorError::NonFinite { param: 0, index: 0 });
        }
        g.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| {
                g.grad(*v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect()
    };

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &grad) in grads.iter().enumerate() {
            let orig = params[pi].data[ei];
            work[pi].data[ei] = orig + step;
            let plus = eval(&work)?;
            work[pi].data[ei] = orig - step;
            let minus = eval(&work)?;
            work[pi].data[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite {
                    param: pi,
                    index: ei,
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (grad - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_scalar_product() {
        let (a, b) = (t(&[1, 1], &[2.0]), t(&[1, 1], &[3.0]));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(&a), g.constant(&b));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = t(&[2], &[0.0, 0.0]);
        let mut g = Graph::new();
        let v = g.constant(&x);
        let s = g.softmax(v);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(&[2], &[-1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.constant(&x);
        let r = g.relu(v);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let (a, b) = (Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3]));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(&a), g.constant(&b));
        let err = g.matmul(va, vb).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");

        let c = Tensor::zeros(&[3, 2]);
        let vc = g.constant(&c);
        assert!(matches!(g.add(va, vc), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn broadcasting_is_leading_one_only() {
        let a = Tensor::zeros(&[3, 2]);
        let row = t(&[1, 2], &[1.0, 2.0]);
        let vecb = t(&[2], &[1.0, 2.0]);
        let col = Tensor::zeros(&[3, 1]);
        let mut g = Graph::new();
        let va = g.constant(&a);
        let (vr, vv, vc) = (g.constant(&row), g.constant(&vecb), g.constant(&col));
        let s = g.add(va, vr).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(g.add(va, vv).is_ok());
        assert!(g.add(va, vc).is_err());
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::scalar(3.0);
        let mut g = Graph::new();
        let v = g.param(&x);
        let sq = g.mul(v, v).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_produces_no_gradients() {
        let x = Tensor::scalar(3.0);
        let mut g = Graph::new();
        let v = g.constant(&x);
        let sq = g.mul(v, v).unwrap();
        g.backward(sq).unwrap();
        assert!(g.grad(v).is_none());
        assert!(g.grad(sq).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let v = g.param(&x);
        assert!(matches!(g.backward(v), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn second_backward_is_rejected() {
        let x = Tensor::scalar(2.0);
        let mut g = Graph::new();
        let v = g.param(&x);
        let l = g.mul(v, v).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::AlreadyBackpropagated));
        // first gradient untouched
        assert_eq!(g.grad(v).unwrap(), &[4.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient_in_mixed_graph() {
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = t(&[1, 2], &[0.5, -0.5]);
        let mut g = Graph::new();
        let vw = g.constant(&w);
        let vx = g.param(&x);
        let y = g.matmul(vx, vw).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(vw).is_none());
        assert_eq!(g.grad(vx).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let a = t(&[2], &[0.3, -1.2]);
        let target = t(&[2], &[1.0, 0.5]);
        let err = grad_check(
            |g, vs| {
                let tv = g.input(target.clone());
                g.mse(vs[0], tv)
            },
            &[a],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let err = grad_check(
            |g, vs| {
                let sq = g.mul(vs[0], vs[0])?;
                Ok(g.sum(sq))
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let c = Tensor::scalar(4.0);
        let err = grad_check(|g, _| Ok(g.input(c.clone())), &[x], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let x = t(&[2], &[1.0, 1e308]);
        let err = grad_check(
            |g, vs| {
                let sq = g.mul(vs[0], vs[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn gelu_constants_are_documented_values() {
        assert!((GELU_SQRT_2_OVER_PI - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert_eq!(gelu(0.0), 0.0);
    }
}
