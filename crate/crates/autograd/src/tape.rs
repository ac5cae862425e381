use std::fmt;
use std::str::FromStr;

use crate::kernels;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::{Result, Tensor, TensorError};

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LN_EPS: f64 = 1e-5;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
    Sigmoid,
    Identity,
}

impl FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "sigmoid" => Ok(Self::Sigmoid),
            "identity" | "linear" | "none" => Ok(Self::Identity),
            _ => Err(TensorError::UnknownActivation(s.to_string())),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
            Self::Sigmoid => "sigmoid",
            Self::Identity => "identity",
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Gelu => gelu(x),
            Self::Sigmoid => sigmoid(x),
            Self::Identity => x,
        }
    }
}

/// One affine layer of an MLP: `act(x W + b)`.
#[derive(Clone, Copy, Debug)]
pub struct MlpLayer {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    TopKMean(Var, Vec<usize>),
    Bce(Var, Vec<f64>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Option<&'a ParamStore>,
    bound: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
        }
    }

    /// A tape whose [`Tape::param`] leaves borrow from `store`.
    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(store),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient in [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id.index()).copied().flatten() {
            return v;
        }
        let store = self
            .params
            .expect("Tape::param called on a tape without a ParamStore");
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.index()] = Some(v);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let out = kernels::matmul_nt(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds `bias` (length `cols`) to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(self.shape_err("add_row_bias", x, bias));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRowBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(self.shape_err("scale_by", x, s));
        }
        let c = ts.data()[0];
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::ScaleBy(x, s), rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let t = self.value(x).map(|v| act.apply(v));
        let rg = self.rg(&[x]);
        self.push(t, Op::Act(x, act), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = (tx.rows(), tx.cols());
        if c == 0 || tg.numel() != c {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if tb.numel() != c {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(self.shape_err("concat_cols", first, p));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: t.rows(),
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], data),
            Op::SliceRows(x, start),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: t.cols(),
            });
        }
        let r = t.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Output row `i` is row `indices[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= t.rows() {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), c], data),
            Op::GatherRows(x, indices.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means, shape `1 x cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), rg)
    }

    /// Mean of the `min(k, n)` largest elements. Ties keep the lower index.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Contract("topk_mean of an empty tensor".into()));
        }
        if k == 0 {
            return Err(TensorError::Contract("topk_mean needs k >= 1".into()));
        }
        let selected = top_k_indices(t.data(), k);
        let mean = selected.iter().map(|&i| t.data()[i]).sum::<f64>() / selected.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(mean), Op::TopKMean(x, selected), rg))
    }

    /// Mean binary cross-entropy between probabilities `p` and `targets`,
    /// with `p` clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(TensorError::Shape {
                op: "bce",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -y * pc.ln() - (1.0 - y) * (1.0 - pc).ln()
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce(p, targets.to_vec()), rg))
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_row_bias(h, bias)
    }

    pub fn mlp(&mut self, x: Var, layers: &[MlpLayer]) -> Result<Var> {
        let mut h = x;
        for layer in layers {
            h = self.linear(h, layer.weight, layer.bias)?;
            h = self.activation(h, layer.activation);
        }
        Ok(h)
    }

    /// Reverse pass from a scalar node.
    ///
    /// The tape is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let t = self.value(out);
        if t.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(Tensor::ones(t.shape()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = node.value.tensor();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let d = kernels::matmul_nt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::matmul_tn_acc(&mut d, ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.wants(*a) {
                    let d = kernels::matmul(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; n * k];
                    kernels::matmul_tn_acc(&mut d, g.data(), ta.data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        self.accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let c = tb.numel();
                    let mut d = vec![0.0; c];
                    for row in g.data().chunks(c.max(1)) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
            }
            Op::ScaleBy(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                if self.wants(*x) {
                    let c = ts.data()[0];
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.wants(*s) {
                    let d = kernels::dot(g.data(), tx.data());
                    self.accumulate(grads, *s, Tensor::from_parts(ts.shape().to_vec(), vec![d]));
                }
            }
            Op::Act(x, act) => {
                if !self.wants(*x) {
                    return;
                }
                let tx = self.value(*x);
                let d: Vec<f64> = match act {
                    Activation::Relu => g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Gelu => g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect(),
                    Activation::Sigmoid => g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect(),
                    Activation::Identity => g.data().to_vec(),
                };
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::Softmax(x) => {
                if !self.wants(*x) {
                    return;
                }
                let c = out.cols().max(1);
                let mut d = vec![0.0; out.numel()];
                for ((drow, yrow), grow) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dotp = kernels::dot(grow, yrow);
                    for ((o, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *o = y * (gv - dotp);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let c = out.cols();
                let r = out.rows();
                if self.wants(*gain) {
                    let mut d = vec![0.0; c];
                    for (grow, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for ((o, gv), h) in d.iter_mut().zip(grow).zip(hrow) {
                            *o += gv * h;
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_parts(tg.shape().to_vec(), d));
                }
                if self.wants(*bias) {
                    let tb = self.value(*bias);
                    let mut d = vec![0.0; c];
                    for grow in g.data().chunks(c) {
                        for (o, gv) in d.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(tb.shape().to_vec(), d));
                }
                if self.wants(*x) {
                    let mut d = vec![0.0; r * c];
                    let mut dh = vec![0.0; c];
                    for i in 0..r {
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let hrow = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dh[j] = grow[j] * tg.data()[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = kernels::dot(&dh, hrow) / c as f64;
                        for j in 0..c {
                            d[i * c + j] = rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    let tx = self.value(*x);
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let len = tp.rows() * c;
                    if self.wants(*p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, *p, Tensor::from_parts(tp.shape().to_vec(), d));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (out.rows(), out.cols());
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let w = tp.cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * c + offset..i * c + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(tp.shape().to_vec(), d));
                    }
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut d = vec![0.0; tx.numel()];
                    d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let w = out.cols();
                    let mut d = vec![0.0; tx.numel()];
                    for i in 0..tx.rows() {
                        d[i * c + start..i * c + start + w]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
            }
            Op::GatherRows(x, indices) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut d = vec![0.0; tx.numel()];
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += g.data()[r * c + j];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let d = Tensor::from_parts(tx.shape().to_vec(), g.data().to_vec());
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let gv = g.data()[0];
                    self.accumulate(grads, *x, Tensor::full(tx.shape(), gv));
                }
            }
            Op::MeanRows(x) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let r = tx.rows() as f64;
                    let mut d = Vec::with_capacity(tx.numel());
                    for _ in 0..tx.rows() {
                        d.extend(g.data().iter().map(|v| v / r));
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
            }
            Op::TopKMean(x, selected) => {
                if self.wants(*x) {
                    let tx = self.value(*x);
                    let share = g.data()[0] / selected.len() as f64;
                    let mut d = vec![0.0; tx.numel()];
                    for &i in selected {
                        d[i] += share;
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
            }
            Op::Bce(p, targets) => {
                if self.wants(*p) {
                    let tp = self.value(*p);
                    let gv = g.data()[0] / targets.len() as f64;
                    let d = tp
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                                gv * (p - y) / (p * (1.0 - p))
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(grads, *p, Tensor::from_parts(tp.shape().to_vec(), d));
                }
            }
        }
    }
}

/// Indices of the `min(k, n)` largest values, ties resolved toward the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if the leaf is untracked or unused.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collects gradients of every bound parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, tape: &Tape<'_>) -> ParamGrads {
        let mut out = ParamGrads::new(tape.bound.len());
        for (id, v) in tape.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.get(*v) {
                    out.set(ParamId::from_index(id), g.clone());
                }
            }
        }
        out
    }

    /// Like [`Gradients::param_grads`] but moves the tensors out.
    pub fn into_param_grads(mut self, tape: &Tape<'_>) -> ParamGrads {
        let mut out = ParamGrads::new(tape.bound.len());
        for (id, v) in tape.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.grads[v.0].take() {
                    out.set(ParamId::from_index(id), g);
                }
            }
        }
        out
    }
}
