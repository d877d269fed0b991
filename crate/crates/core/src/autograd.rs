//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations execute eagerly and record themselves on a [`Tape`]; the
//! tape is topologically ordered by construction, so the backward pass is
//! a single reverse sweep. The primitive set is fixed: matmul, conv2d,
//! bias adds, relu, softmax-cross-entropy, reshape and a handful of
//! elementwise ops. Every produced value is checked finite and a
//! non-finite result reports the primitive that overflowed.

use crate::params::ParamSet;
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("{op}: shape contract violated: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("numeric overflow: non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Min2(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    Reshape(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recording tape. Node ids are indices into the insertion order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutogradError> {
    if a.shape() != b.shape() {
        return Err(AutogradError::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op_name: &'static str, op: Op, value: Tensor) -> Result<NodeId, AutogradError> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    /// Register a leaf value (parameter or constant).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, AutogradError> {
        self.push("input", Op::Input, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        self.push("add", Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutogradError> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutogradError> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", Op::AddScalar(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutogradError> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutogradError> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push("sigmoid", Op::Sigmoid(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutogradError> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), v)
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes inside the band.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, AutogradError> {
        if lo > hi {
            return Err(AutogradError::Shape {
                op: "clamp",
                detail: format!("lo {lo} > hi {hi}"),
            });
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", Op::Clamp(a, lo, hi), v)
    }

    /// Elementwise minimum; ties route the gradient to the first input.
    pub fn min2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        same_shape("min2", self.value(a), self.value(b))?;
        let v = self.value(a).zip(self.value(b), f64::min)?;
        self.push("min2", Op::Min2(a, b), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutogradError> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum", Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutogradError> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push("mean", Op::Mean(a), Tensor::scalar(s / n))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(AutogradError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let v = Tensor::from_vec(vec![n, m], mm_nn(av.data(), bv.data(), n, k, m))?;
        self.push("matmul", Op::MatMul(a, b), v)
    }

    /// `[n,k] x [m,k]^T -> [n,m]`; the second operand is row-major with
    /// output features on the first axis, the layout layer weights use.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutogradError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(AutogradError::Shape {
                op: "matmul_nt",
                detail: format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            });
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let v = Tensor::from_vec(vec![n, m], mm_nt(av.data(), bv.data(), n, k, m))?;
        self.push("matmul_nt", Op::MatMulNT(a, b), v)
    }

    /// `[n,m] + [m]`, broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutogradError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.shape().len() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(AutogradError::Shape {
                op: "add_row_broadcast",
                detail: format!("{:?} + {:?}", xv.shape(), bv.shape()),
            });
        }
        let (n, m) = (xv.shape()[0], xv.shape()[1]);
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += bv.data()[j];
            }
        }
        let v = Tensor::from_vec(vec![n, m], data)?;
        self.push("add_row_broadcast", Op::AddRowBroadcast(x, bias), v)
    }

    /// `[n,c,h,w] + [c]`, broadcast over batch and spatial axes.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, AutogradError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 4 || bv.shape().len() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(AutogradError::Shape {
                op: "add_channel_bias",
                detail: format!("{:?} + {:?}", xv.shape(), bv.shape()),
            });
        }
        let (n, c, h, w) = dims4(xv.shape());
        let hw = h * w;
        let mut data = xv.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let b = bv.data()[ch];
                for s in 0..hw {
                    data[base + s] += b;
                }
            }
        }
        let v = Tensor::from_vec(xv.shape().to_vec(), data)?;
        self.push("add_channel_bias", Op::AddChannelBias(x, bias), v)
    }

    /// 2-D convolution, NCHW input and OIHW kernel, with stride and
    /// zero padding. No dilation or groups.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, AutogradError> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let v = conv2d_forward(iv, kv, stride, padding)?;
        self.push(
            "conv2d",
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            v,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutogradError> {
        let v = self.value(a).reshape(shape).map_err(|e| AutogradError::Shape {
            op: "reshape",
            detail: e.to_string(),
        })?;
        self.push("reshape", Op::Reshape(a), v)
    }

    /// Mean softmax cross-entropy over a `[n,k]` batch of logits.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, AutogradError> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(AutogradError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?} vs {} labels", lv.shape(), labels.len()),
            });
        }
        let k = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(AutogradError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln() + m;
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        self.push(
            "softmax_cross_entropy",
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            v,
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient tensor per
    /// node, zero for nodes the root does not depend on.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor>, AutogradError> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(AutogradError::NotScalar { numel: rv.numel() });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[root].data_mut()[0] = 1.0;

        for id in (0..=root).rev() {
            if grads[id].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.data(), |x| x);
                    accumulate(&mut grads[*b], g.data(), |x| x);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.data(), |x| x);
                    accumulate(&mut grads[*b], g.data(), |x| -x);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                    acc_zip(&mut grads[*a], g.data(), bv.data(), |gi, o| gi * o);
                    acc_zip(&mut grads[*b], g.data(), av.data(), |gi, o| gi * o);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads[*a], g.data(), |x| x * c);
                }
                Op::AddScalar(a) => accumulate(&mut grads[*a], g.data(), |x| x),
                Op::Relu(a) => {
                    let av = self.value(*a).clone();
                    acc_zip(&mut grads[*a], g.data(), av.data(), |gi, x| {
                        if x > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let sv = self.nodes[id].value.clone();
                    acc_zip(&mut grads[*a], g.data(), sv.data(), |gi, s| gi * s * (1.0 - s));
                }
                Op::Exp(a) => {
                    let ev = self.nodes[id].value.clone();
                    acc_zip(&mut grads[*a], g.data(), ev.data(), |gi, e| gi * e);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let av = self.value(*a).clone();
                    acc_zip(&mut grads[*a], g.data(), av.data(), |gi, x| {
                        if (lo..=hi).contains(&x) {
                            gi
                        } else {
                            0.0
                        }
                    });
                }
                Op::Min2(a, b) => {
                    let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                    {
                        let ga = grads[*a].data_mut();
                        for i in 0..ga.len() {
                            if av.data()[i] <= bv.data()[i] {
                                ga[i] += g.data()[i];
                            }
                        }
                    }
                    let gb = grads[*b].data_mut();
                    for i in 0..gb.len() {
                        if av.data()[i] > bv.data()[i] {
                            gb[i] += g.data()[i];
                        }
                    }
                }
                Op::Sum(a) => {
                    let gs = g.data()[0];
                    accumulate_scalar(&mut grads[*a], gs);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel() as f64;
                    accumulate_scalar(&mut grads[*a], g.data()[0] / n);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[1];
                    let da = mm_nt(g.data(), bv.data(), n, m, k);
                    let db = mm_tn(av.data(), g.data(), n, k, m);
                    acc_slice(&mut grads[*a], &da);
                    acc_slice(&mut grads[*b], &db);
                }
                Op::MatMulNT(a, b) => {
                    // out = A * B^T with A [n,k], B [m,k], G [n,m]
                    let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[0];
                    let da = mm_nn(g.data(), bv.data(), n, m, k);
                    let db = mm_tn(g.data(), av.data(), n, m, k);
                    acc_slice(&mut grads[*a], &da);
                    acc_slice(&mut grads[*b], &db);
                }
                Op::AddRowBroadcast(x, bias) => {
                    accumulate(&mut grads[*x], g.data(), |v| v);
                    let (n, m) = (g.shape()[0], g.shape()[1]);
                    let gb = grads[*bias].data_mut();
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += g.data()[i * m + j];
                        }
                    }
                }
                Op::AddChannelBias(x, bias) => {
                    accumulate(&mut grads[*x], g.data(), |v| v);
                    let (n, c, h, w) = dims4(g.shape());
                    let hw = h * w;
                    let gb = grads[*bias].data_mut();
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for s in 0..hw {
                                gb[ch] += g.data()[base + s];
                            }
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let iv = self.value(*input).clone();
                    let kv = self.value(*kernel).clone();
                    let (di, dk) = conv2d_backward(&iv, &kv, &g, *stride, *padding);
                    acc_slice(&mut grads[*input], &di);
                    acc_slice(&mut grads[*kernel], &dk);
                }
                Op::Reshape(a) => {
                    acc_slice(&mut grads[*a], g.data());
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let lv = self.value(*logits).clone();
                    let (n, k) = (lv.shape()[0], lv.shape()[1]);
                    let gs = g.data()[0] / n as f64;
                    let gl = grads[*logits].data_mut();
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &lv.data()[i * k..(i + 1) * k];
                        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let denom: f64 = row.iter().map(|&z| (z - m).exp()).sum();
                        for c in 0..k {
                            let p = (row[c] - m).exp() / denom;
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            gl[i * k + c] += gs * (p - onehot);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn accumulate(dst: &mut Tensor, src: &[f64], f: impl Fn(f64) -> f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += f(s);
    }
}

fn accumulate_scalar(dst: &mut Tensor, v: f64) {
    for d in dst.data_mut() {
        *d += v;
    }
}

fn acc_zip(dst: &mut Tensor, g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for i in 0..g.len() {
        dst.data_mut()[i] += f(g[i], other[i]);
    }
}

fn acc_slice(dst: &mut Tensor, src: &[f64]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

/// C = A[n,k] * B[k,m]
fn mm_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            let crow = &mut c[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C = A[n,m] * B[k,m]^T  -> [n,k]
fn mm_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            let mut s = 0.0;
            for l in 0..m {
                s += arow[l] * brow[l];
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// C = A[n,k]^T * B[n,m] -> [k,m]
fn mm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[l * m..(l + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn conv2d_output_shape(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>, AutogradError> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(AutogradError::Shape {
            op: "conv2d",
            detail: format!("input {input:?} kernel {kernel:?}, expected 4-d"),
        });
    }
    if input[1] != kernel[1] {
        return Err(AutogradError::Shape {
            op: "conv2d",
            detail: format!("input channels {} != kernel channels {}", input[1], kernel[1]),
        });
    }
    if stride == 0 {
        return Err(AutogradError::Shape {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let (h, w) = (input[2], input[3]);
    let (kh, kw) = (kernel[2], kernel[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(AutogradError::Shape {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
        });
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok(vec![input[0], kernel[0], oh, ow])
}

fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, AutogradError> {
    let oshape = conv2d_output_shape(input.shape(), kernel.shape(), stride, padding)?;
    let (n, ci, h, w) = dims4(input.shape());
    let (co, _, kh, kw) = dims4(kernel.shape());
    let (oh, ow) = (oshape[2], oshape[3]);
    let mut out = vec![0.0; n * co * oh * ow];
    let idat = input.data();
    let kdat = kernel.data();
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (x * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iidx = ((b * ci + c) * h + iy as usize) * w + ix as usize;
                                let kidx = ((o * ci + c) * kh + ky) * kw + kx;
                                acc += idat[iidx] * kdat[kidx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_vec(oshape, out)?)
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (n, ci, h, w) = dims4(input.shape());
    let (co, _, kh, kw) = dims4(kernel.shape());
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let mut din = vec![0.0; input.numel()];
    let mut dker = vec![0.0; kernel.numel()];
    let idat = input.data();
    let kdat = kernel.data();
    let gdat = grad_out.data();
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let g = gdat[((b * co + o) * oh + y) * ow + x];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (x * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iidx = ((b * ci + c) * h + iy as usize) * w + ix as usize;
                                let kidx = ((o * ci + c) * kh + ky) * kw + kx;
                                din[iidx] += g * kdat[kidx];
                                dker[kidx] += g * idat[iidx];
                            }
                        }
                    }
                }
            }
        }
    }
    (din, dker)
}

/// Handles to the tape nodes holding a param set's tensors.
pub struct ParamNodes {
    ids: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> Result<NodeId, AutogradError> {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn register(tape: &mut Tape, params: &ParamSet) -> Result<ParamNodes, AutogradError> {
        let mut ids = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            ids.push((name.to_string(), tape.input(t.clone())?));
        }
        Ok(ParamNodes { ids })
    }
}

/// Evaluate a scalar loss built from `params` and return `(loss, grads)`.
/// The gradient set mirrors the parameter names and shapes; evaluation
/// never mutates the inputs.
pub fn grad<F>(params: &ParamSet, build_loss: F) -> Result<(f64, ParamSet), AutogradError>
where
    F: FnOnce(&mut Tape, &ParamNodes) -> Result<NodeId, AutogradError>,
{
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params)?;
    let loss_id = build_loss(&mut tape, &nodes)?;
    let loss = tape.value(loss_id);
    if loss.numel() != 1 {
        return Err(AutogradError::NotScalar { numel: loss.numel() });
    }
    let loss_val = loss.item();
    let grads = tape.backward(loss_id)?;
    let mut out = ParamSet::new();
    for (name, id) in &nodes.ids {
        out.insert(name.clone(), grads[*id].clone());
    }
    Ok((loss_val, out))
}

/// Central finite differences over every parameter entry; the test-side
/// oracle for gradient checks, independent of the backward pass.
#[cfg(test)]
pub(crate) fn finite_difference<F>(params: &ParamSet, build: F, step: f64) -> ParamSet
where
    F: Fn(&mut Tape, &ParamNodes) -> Result<NodeId, AutogradError>,
{
    let eval = |p: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, p).unwrap();
        let id = build(&mut tape, &nodes).unwrap();
        tape.value(id).item()
    };
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= step;
            out.get_mut(&name).unwrap().data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
    }
    out
}
