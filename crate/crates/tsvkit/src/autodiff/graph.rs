//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] is an append-only arena of nodes; each node stores its forward
//! value and the operation (with input node ids) that produced it. Builder
//! methods validate shapes eagerly and return named errors, so network code
//! can propagate `?` and never indexes out of bounds later. [`Graph::backward`]
//! is a pure function of the recorded tape: it never mutates node values, and
//! replaying it produces bit-identical gradients.

use super::linalg::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::tensor::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

/// Variance floor used by both layer norms.
pub const NORM_EPS: f64 = 1e-8;

/// Inputs to `ln` are floored here so the tape never produces -inf.
const LN_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d { input: NodeId, filters: NodeId, stride: usize },
    ConvTranspose1d { input: NodeId, basis: NodeId, stride: usize },
    DepthwiseConv1d { input: NodeId, filters: NodeId, dilation: usize },
    ChannelLayerNorm { input: NodeId, gain: NodeId, bias: NodeId },
    GlobalLayerNorm { input: NodeId, gain: NodeId, bias: NodeId },
    MatMul { lhs: NodeId, rhs: NodeId },
    MatVec { mat: NodeId, vec: NodeId },
    AddBiasCol { input: NodeId, bias: NodeId },
    Relu { input: NodeId },
    Softmax { input: NodeId },
    MeanPoolCols { input: NodeId },
    MaxPool3Cols { input: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Sub { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    Scale { input: NodeId, factor: f64 },
    ConcatRows { inputs: Vec<NodeId> },
    ConcatVec { lhs: NodeId, rhs: NodeId },
    RepeatCol { input: NodeId, count: usize },
    PadCols { input: NodeId, left: usize, right: usize },
    SliceCols { input: NodeId, start: usize, len: usize },
    SumAll { input: NodeId },
    Center { input: NodeId },
    Ln { input: NodeId },
    Div { num: NodeId, den: NodeId },
    MulScalar { input: NodeId, scalar: NodeId },
    MaxElem { lhs: NodeId, rhs: NodeId },
    Pick { input: NodeId, index: usize },
    LogSumExp { input: NodeId },
    Hypot { re: NodeId, im: NodeId },
    SqrtFloor0 { input: NodeId },
    FrameCols { input: NodeId, win: usize, hop: usize },
    RowScale { input: NodeId, vec: NodeId },
    WeightedColSum { input: NodeId, weights: NodeId },
    DeltaCols { input: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `id`, if one was propagated to it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient for `id` as a tensor shaped like `template`; nodes that never
    /// received a contribution (not on a path to the loss) yield zeros.
    pub fn grad_tensor(&self, id: NodeId, template: &Tensor) -> Tensor {
        match self.grad(id) {
            Some(g) => Tensor::new(template.shape().to_vec(), g.to_vec())
                .expect("gradient shape matches its node"),
            None => Tensor::zeros(template.shape().to_vec()),
        }
    }

    fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads[id].take()
    }

    fn put_back(&mut self, id: NodeId, g: Vec<f64>) {
        self.grads[id] = Some(g);
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Appends an input tensor. Gradients flow back to it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// An input tensor that never receives gradients (data, fixed bases).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape2(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        (t.rows(), t.cols())
    }

    // ---- convolution family ----------------------------------------------

    /// 1-D convolution: input `[C_in×T]`, filters `[C_out, C_in, L]`,
    /// output `[C_out×K]` with `K = floor((T−L)/stride)+1`.
    pub fn conv1d(&mut self, input: NodeId, filters: NodeId, stride: usize) -> Result<NodeId> {
        let (c_in, t_len) = self.shape2(input);
        let fshape = self.value(filters).shape().to_vec();
        if fshape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("filters must be [C_out, C_in, L], got {fshape:?}"),
            });
        }
        let (c_out, fc_in, l) = (fshape[0], fshape[1], fshape[2]);
        if fc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!("input has {c_in} channels, filters expect {fc_in}"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArg {
                op: "conv1d",
                detail: "stride must be ≥ 1".into(),
            });
        }
        if t_len < l {
            return Err(Error::InvalidArg {
                op: "conv1d",
                detail: format!("input length {t_len} shorter than kernel {l}"),
            });
        }
        let k = (t_len - l) / stride + 1;
        let x = self.value(input).data();
        let f = self.value(filters).data();
        let mut out = vec![0.0; c_out * k];
        for o in 0..c_out {
            let out_row = &mut out[o * k..(o + 1) * k];
            for c in 0..c_in {
                let x_row = &x[c * t_len..(c + 1) * t_len];
                for li in 0..l {
                    let w = f[(o * c_in + c) * l + li];
                    if w == 0.0 {
                        continue;
                    }
                    if stride == 1 {
                        axpy(w, &x_row[li..li + k], out_row);
                    } else {
                        for (ki, ov) in out_row.iter_mut().enumerate() {
                            *ov += w * x_row[ki * stride + li];
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[input, filters]);
        Ok(self.push(
            Tensor::matrix(c_out, k, out)?,
            Op::Conv1d {
                input,
                filters,
                stride,
            },
            rg,
        ))
    }

    /// Transposed 1-D convolution (overlap-add synthesis): input `[C×K]`,
    /// basis `[C×L]`, output a single row of length `(K−1)·stride + L`.
    pub fn conv_transpose1d(&mut self, input: NodeId, basis: NodeId, stride: usize) -> Result<NodeId> {
        let (c, k) = self.shape2(input);
        let (bc, l) = self.shape2(basis);
        if bc != c {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose1d",
                detail: format!("input has {c} channels, basis has {bc}"),
            });
        }
        if k == 0 || c == 0 {
            return Err(Error::InvalidArg {
                op: "conv_transpose1d",
                detail: "empty input".into(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArg {
                op: "conv_transpose1d",
                detail: "stride must be ≥ 1".into(),
            });
        }
        let t_len = (k - 1) * stride + l;
        let x = self.value(input).data();
        let b = self.value(basis).data();
        let mut out = vec![0.0; t_len];
        for ci in 0..c {
            let b_row = &b[ci * l..(ci + 1) * l];
            for ki in 0..k {
                axpy(x[ci * k + ki], b_row, &mut out[ki * stride..ki * stride + l]);
            }
        }
        let rg = self.any_grad(&[input, basis]);
        Ok(self.push(
            Tensor::row(out),
            Op::ConvTranspose1d {
                input,
                basis,
                stride,
            },
            rg,
        ))
    }

    /// Depthwise dilated convolution with same-length symmetric zero padding
    /// (left-heavy when the total pad is odd): input `[C×T]`, filters `[C×Q]`.
    pub fn depthwise_conv1d(&mut self, input: NodeId, filters: NodeId, dilation: usize) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        let (fc, q) = self.shape2(filters);
        if fc != c {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv1d",
                detail: format!("input has {c} channels, filters have {fc} rows"),
            });
        }
        if dilation == 0 {
            return Err(Error::InvalidArg {
                op: "depthwise_conv1d",
                detail: "dilation must be ≥ 1".into(),
            });
        }
        let pad_left = ((q - 1) * dilation + 1) / 2;
        let x = self.value(input).data();
        let f = self.value(filters).data();
        let mut out = vec![0.0; c * t_len];
        for ci in 0..c {
            let x_row = &x[ci * t_len..(ci + 1) * t_len];
            let out_row = &mut out[ci * t_len..(ci + 1) * t_len];
            for qi in 0..q {
                let w = f[ci * q + qi];
                if w == 0.0 {
                    continue;
                }
                // out[t] += w · x[t + qi·dilation − pad_left] over valid t
                let shift = qi as isize * dilation as isize - pad_left as isize;
                let t0 = (-shift).max(0) as usize;
                let t1 = ((t_len as isize - shift).min(t_len as isize)).max(0) as usize;
                if t0 < t1 {
                    let s0 = (t0 as isize + shift) as usize;
                    axpy(w, &x_row[s0..s0 + (t1 - t0)], &mut out_row[t0..t1]);
                }
            }
        }
        let rg = self.any_grad(&[input, filters]);
        Ok(self.push(
            Tensor::matrix(c, t_len, out)?,
            Op::DepthwiseConv1d {
                input,
                filters,
                dilation,
            },
            rg,
        ))
    }

    // ---- normalization ----------------------------------------------------

    fn check_norm_args(&self, op: &'static str, input: NodeId, gain: NodeId, bias: NodeId) -> Result<(usize, usize)> {
        let (c, t_len) = self.shape2(input);
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::ShapeMismatch {
                op: if op == "channel_layer_norm" {
                    "channel_layer_norm"
                } else {
                    "global_layer_norm"
                },
                detail: format!(
                    "gain/bias must have {c} entries, got {}/{}",
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            });
        }
        Ok((c, t_len))
    }

    /// Channel-wise layer norm: each time step normalized over channels, then
    /// per-channel affine gain/bias. Variance floored at [`NORM_EPS`].
    pub fn channel_layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.check_norm_args("channel_layer_norm", input, gain, bias)?;
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut mu = vec![0.0; t_len];
        for ci in 0..c {
            axpy(1.0 / c as f64, &x[ci * t_len..(ci + 1) * t_len], &mut mu);
        }
        let mut var = vec![0.0; t_len];
        for ci in 0..c {
            let row = &x[ci * t_len..(ci + 1) * t_len];
            for (v, (&xv, &m)) in var.iter_mut().zip(row.iter().zip(&mu)) {
                let d = xv - m;
                *v += d * d / c as f64;
            }
        }
        let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = vec![0.0; c * t_len];
        for ci in 0..c {
            let row = &x[ci * t_len..(ci + 1) * t_len];
            let out_row = &mut out[ci * t_len..(ci + 1) * t_len];
            for ti in 0..t_len {
                out_row[ti] = g[ci] * (row[ti] - mu[ti]) * inv[ti] + b[ci];
            }
        }
        let rg = self.any_grad(&[input, gain, bias]);
        Ok(self.push(
            Tensor::matrix(c, t_len, out)?,
            Op::ChannelLayerNorm { input, gain, bias },
            rg,
        ))
    }

    /// Global layer norm: one mean/variance over all C·T entries, then
    /// per-channel affine gain/bias. Variance floored at [`NORM_EPS`].
    pub fn global_layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.check_norm_args("global_layer_norm", input, gain, bias)?;
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = (c * t_len) as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        let mut out = vec![0.0; c * t_len];
        for ci in 0..c {
            let row = &x[ci * t_len..(ci + 1) * t_len];
            let out_row = &mut out[ci * t_len..(ci + 1) * t_len];
            for (o, &xv) in out_row.iter_mut().zip(row) {
                *o = g[ci] * (xv - mu) * inv + b[ci];
            }
        }
        let rg = self.any_grad(&[input, gain, bias]);
        Ok(self.push(
            Tensor::matrix(c, t_len, out)?,
            Op::GlobalLayerNorm { input, gain, bias },
            rg,
        ))
    }

    // ---- linear maps -------------------------------------------------------

    /// Matrix product `[m×k]·[k×n]`; also implements 1×1 convolutions.
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape2(lhs);
        let (k2, n) = self.shape2(rhs);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs is {m}×{k}, rhs is {k2}×{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(m, k, n, self.value(lhs).data(), self.value(rhs).data(), &mut out);
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { lhs, rhs }, rg))
    }

    /// Matrix–vector product `[r×c]·[c] -> [r]`.
    pub fn matvec(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape2(mat);
        if self.value(vec).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                detail: format!("matrix is {r}×{c}, vector has {}", self.value(vec).numel()),
            });
        }
        let m = self.value(mat).data();
        let v = self.value(vec).data();
        let out: Vec<f64> = (0..r).map(|i| dot(&m[i * c..(i + 1) * c], v)).collect();
        let rg = self.any_grad(&[mat, vec]);
        Ok(self.push(Tensor::vector(out), Op::MatVec { mat, vec }, rg))
    }

    /// Fully-connected layer: `weight·input + bias`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let wx = self.matvec(weight, input)?;
        self.add(wx, bias)
    }

    /// Adds `bias[c]` to every column entry of row `c`.
    pub fn add_bias_col(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        if self.value(bias).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias_col",
                detail: format!("input has {c} rows, bias has {}", self.value(bias).numel()),
            });
        }
        let x = self.value(input).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; c * t_len];
        for ci in 0..c {
            for ti in 0..t_len {
                out[ci * t_len + ti] = x[ci * t_len + ti] + b[ci];
            }
        }
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(
            Tensor::matrix(c, t_len, out)?,
            Op::AddBiasCol { input, bias },
            rg,
        ))
    }

    // ---- activations and pooling -------------------------------------------

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.nodes[input].requires_grad;
        self.push(
            Tensor::new(shape, out).expect("same shape as input"),
            Op::Relu { input },
            rg,
        )
    }

    /// Softmax over all entries; restricted to vectors and single-row tensors
    /// so the normalization axis is unambiguous.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        if self.value(input).rows() != 1 {
            return Err(Error::InvalidArg {
                op: "softmax",
                detail: "expects a vector or single-row tensor".into(),
            });
        }
        let x = self.value(input).data();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::new(shape, out).expect("same shape as input"),
            Op::Softmax { input },
            rg,
        ))
    }

    /// Mean over the time axis: `[C×T] -> [C]`.
    pub fn mean_pool_cols(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        if t_len == 0 {
            return Err(Error::InvalidArg {
                op: "mean_pool",
                detail: "empty time axis".into(),
            });
        }
        let x = self.value(input).data();
        let out: Vec<f64> = (0..c)
            .map(|ci| x[ci * t_len..(ci + 1) * t_len].iter().sum::<f64>() / t_len as f64)
            .collect();
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(Tensor::vector(out), Op::MeanPoolCols { input }, rg))
    }

    /// Max pooling with kernel 3 and stride 3: `[C×T] -> [C×⌊T/3⌋]`.
    pub fn max_pool3_cols(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        if t_len < 3 {
            return Err(Error::InvalidArg {
                op: "max_pool3",
                detail: format!("time axis {t_len} shorter than kernel 3"),
            });
        }
        let w = t_len / 3;
        let x = self.value(input).data();
        let mut out = vec![0.0; c * w];
        for ci in 0..c {
            for wi in 0..w {
                let s = &x[ci * t_len + wi * 3..ci * t_len + wi * 3 + 3];
                out[ci * w + wi] = s[0].max(s[1]).max(s[2]);
            }
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::matrix(c, w, out)?,
            Op::MaxPool3Cols { input },
            rg,
        ))
    }

    // ---- elementwise arithmetic ---------------------------------------------

    fn binary_same_shape(&mut self, op_name: &'static str, lhs: NodeId, rhs: NodeId) -> Result<()> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(lhs).shape(),
                    self.value(rhs).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", lhs, rhs)?;
        let out: Vec<f64> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a + b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { lhs, rhs }, rg))
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", lhs, rhs)?;
        let out: Vec<f64> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a - b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { lhs, rhs }, rg))
    }

    /// Elementwise (Hadamard) product; implements the mask modulation Ŝ = M ⊙ Y.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", lhs, rhs)?;
        let out: Vec<f64> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { lhs, rhs }, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|&v| v * factor).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.nodes[input].requires_grad;
        self.push(
            Tensor::new(shape, out).expect("same shape as input"),
            Op::Scale { input, factor },
            rg,
        )
    }

    // ---- shape plumbing -------------------------------------------------------

    /// Stacks inputs along the channel axis; every input must share the column
    /// count (vectors count as one row).
    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let cols = self.value(inputs[0]).cols();
        let mut rows = 0;
        for &id in inputs {
            if self.value(id).cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!(
                        "column counts differ: {} vs {}",
                        cols,
                        self.value(id).cols()
                    ),
                });
            }
            rows += self.value(id).rows();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &id in inputs {
            out.extend_from_slice(self.value(id).data());
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates two vectors.
    pub fn concat_vec(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        for id in [lhs, rhs] {
            if self.value(id).shape().len() != 1 {
                return Err(Error::InvalidArg {
                    op: "concat_vec",
                    detail: format!("expects vectors, got shape {:?}", self.value(id).shape()),
                });
            }
        }
        let mut out = self.value(lhs).data().to_vec();
        out.extend_from_slice(self.value(rhs).data());
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::vector(out), Op::ConcatVec { lhs, rhs }, rg))
    }

    /// Tiles a vector `[D]` into a matrix `[D×count]` (speaker latent broadcast).
    pub fn repeat_col(&mut self, input: NodeId, count: usize) -> Result<NodeId> {
        if self.value(input).shape().len() != 1 || count == 0 {
            return Err(Error::InvalidArg {
                op: "repeat_col",
                detail: "expects a vector and count ≥ 1".into(),
            });
        }
        let v = self.value(input).data();
        let d = v.len();
        let mut out = vec![0.0; d * count];
        for (di, &val) in v.iter().enumerate() {
            out[di * count..(di + 1) * count].fill(val);
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::matrix(d, count, out)?,
            Op::RepeatCol { input, count },
            rg,
        ))
    }

    /// Zero-pads columns on the left/right of a `[C×T]` tensor.
    pub fn pad_cols(&mut self, input: NodeId, left: usize, right: usize) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        let new_t = left + t_len + right;
        let x = self.value(input).data();
        let mut out = vec![0.0; c * new_t];
        for ci in 0..c {
            out[ci * new_t + left..ci * new_t + left + t_len]
                .copy_from_slice(&x[ci * t_len..(ci + 1) * t_len]);
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::matrix(c, new_t, out)?,
            Op::PadCols { input, left, right },
            rg,
        ))
    }

    /// Takes columns `[start, start+len)` of a `[C×T]` tensor.
    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        if start + len > t_len {
            return Err(Error::InvalidArg {
                op: "slice_cols",
                detail: format!("slice {start}..{} out of {t_len} columns", start + len),
            });
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; c * len];
        for ci in 0..c {
            out[ci * len..(ci + 1) * len].copy_from_slice(&x[ci * t_len + start..ci * t_len + start + len]);
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::matrix(c, len, out)?,
            Op::SliceCols { input, start, len },
            rg,
        ))
    }

    // ---- scalar reductions and scalar arithmetic ---------------------------------

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().sum();
        let rg = self.nodes[input].requires_grad;
        self.push(Tensor::scalar(s), Op::SumAll { input }, rg)
    }

    /// Subtracts the mean of all entries (zero-mean normalization).
    pub fn center(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input).data();
        let mu = x.iter().sum::<f64>() / x.len() as f64;
        let out: Vec<f64> = x.iter().map(|&v| v - mu).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.nodes[input].requires_grad;
        self.push(
            Tensor::new(shape, out).expect("same shape as input"),
            Op::Center { input },
            rg,
        )
    }

    /// Natural log of a positive scalar, floored so the result stays finite.
    pub fn ln(&mut self, input: NodeId) -> Result<NodeId> {
        self.expect_scalar("ln", input)?;
        let v = self.value(input).as_scalar().max(LN_FLOOR);
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(Tensor::scalar(v.ln()), Op::Ln { input }, rg))
    }

    /// Scalar quotient `num/den`.
    pub fn div(&mut self, num: NodeId, den: NodeId) -> Result<NodeId> {
        self.expect_scalar("div", num)?;
        self.expect_scalar("div", den)?;
        let v = self.value(num).as_scalar() / self.value(den).as_scalar();
        let rg = self.any_grad(&[num, den]);
        Ok(self.push(Tensor::scalar(v), Op::Div { num, den }, rg))
    }

    /// Multiplies a tensor by a scalar node (differentiable in both).
    pub fn mul_scalar(&mut self, input: NodeId, scalar: NodeId) -> Result<NodeId> {
        self.expect_scalar("mul_scalar", scalar)?;
        let s = self.value(scalar).as_scalar();
        let out: Vec<f64> = self.value(input).data().iter().map(|&v| v * s).collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.any_grad(&[input, scalar]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulScalar { input, scalar }, rg))
    }

    /// Elementwise maximum; gradients follow the winner (ties go to `lhs`).
    pub fn max_elem(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary_same_shape("max_elem", lhs, rhs)?;
        let out: Vec<f64> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(&a, &b)| if a >= b { a } else { b })
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxElem { lhs, rhs }, rg))
    }

    /// Selects one entry of a vector as a `[1]` scalar.
    pub fn pick(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let n = self.value(input).numel();
        if index >= n {
            return Err(Error::InvalidArg {
                op: "pick",
                detail: format!("index {index} out of {n}"),
            });
        }
        let v = self.value(input).data()[index];
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(Tensor::scalar(v), Op::Pick { input, index }, rg))
    }

    /// log Σ exp over all entries of a vector/single-row tensor.
    pub fn logsumexp(&mut self, input: NodeId) -> Result<NodeId> {
        if self.value(input).rows() != 1 {
            return Err(Error::InvalidArg {
                op: "logsumexp",
                detail: "expects a vector or single-row tensor".into(),
            });
        }
        let x = self.value(input).data();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(Tensor::scalar(m + s.ln()), Op::LogSumExp { input }, rg))
    }

    /// Elementwise `sqrt(re² + im²)`; gradient defined as 0 where the
    /// magnitude is exactly 0.
    pub fn hypot(&mut self, re: NodeId, im: NodeId) -> Result<NodeId> {
        self.binary_same_shape("hypot", re, im)?;
        let out: Vec<f64> = self
            .value(re)
            .data()
            .iter()
            .zip(self.value(im).data())
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .collect();
        let shape = self.value(re).shape().to_vec();
        let rg = self.any_grad(&[re, im]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Hypot { re, im }, rg))
    }

    /// Elementwise `sqrt(max(x, 0))`; subgradient 0 on the floored region.
    pub fn sqrt_floor0(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .map(|&v| v.max(0.0).sqrt())
            .collect();
        let shape = self.value(input).shape().to_vec();
        let rg = self.nodes[input].requires_grad;
        self.push(
            Tensor::new(shape, out).expect("same shape as input"),
            Op::SqrtFloor0 { input },
            rg,
        )
    }

    // ---- framing and feature helpers -----------------------------------------

    /// Slices a single-row signal into overlapping frames: output `[win×F]`
    /// with column `f` holding samples `[f·hop, f·hop+win)`.
    pub fn frame_cols(&mut self, input: NodeId, win: usize, hop: usize) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        if c != 1 {
            return Err(Error::InvalidArg {
                op: "frame_cols",
                detail: "expects a single-row signal".into(),
            });
        }
        if hop == 0 || win == 0 {
            return Err(Error::InvalidArg {
                op: "frame_cols",
                detail: "window and hop must be ≥ 1".into(),
            });
        }
        if t_len < win {
            return Err(Error::InvalidArg {
                op: "frame_cols",
                detail: format!("signal length {t_len} shorter than window {win}"),
            });
        }
        let frames = 1 + (t_len - win) / hop;
        let x = self.value(input).data();
        let mut out = vec![0.0; win * frames];
        for f in 0..frames {
            for l in 0..win {
                out[l * frames + f] = x[f * hop + l];
            }
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::matrix(win, frames, out)?,
            Op::FrameCols { input, win, hop },
            rg,
        ))
    }

    /// Scales row `c` of the input by `vec[c]` (e.g. windowing stacked frames).
    pub fn row_scale(&mut self, input: NodeId, vec: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        if self.value(vec).numel() != c {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                detail: format!("input has {c} rows, vector has {}", self.value(vec).numel()),
            });
        }
        let x = self.value(input).data();
        let v = self.value(vec).data();
        let mut out = vec![0.0; c * t_len];
        for ci in 0..c {
            for ti in 0..t_len {
                out[ci * t_len + ti] = x[ci * t_len + ti] * v[ci];
            }
        }
        let rg = self.any_grad(&[input, vec]);
        Ok(self.push(
            Tensor::matrix(c, t_len, out)?,
            Op::RowScale { input, vec },
            rg,
        ))
    }

    /// Weighted sum over columns: `out[c] = Σ_t input[c,t]·weights[t]`
    /// (attentive pooling moments).
    pub fn weighted_col_sum(&mut self, input: NodeId, weights: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        if self.value(weights).numel() != t_len {
            return Err(Error::ShapeMismatch {
                op: "weighted_col_sum",
                detail: format!(
                    "input has {t_len} columns, weights have {}",
                    self.value(weights).numel()
                ),
            });
        }
        let x = self.value(input).data();
        let w = self.value(weights).data();
        let out: Vec<f64> = (0..c).map(|ci| dot(&x[ci * t_len..(ci + 1) * t_len], w)).collect();
        let rg = self.any_grad(&[input, weights]);
        Ok(self.push(
            Tensor::vector(out),
            Op::WeightedColSum { input, weights },
            rg,
        ))
    }

    /// First-order regression deltas along the time axis (window N=2, edge
    /// frames replicated): `Δ_t = Σ_{n=1,2} n·(x_{t+n} − x_{t−n}) / 10`.
    pub fn delta_cols(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, t_len) = self.shape2(input);
        if t_len == 0 {
            return Err(Error::InvalidArg {
                op: "delta_cols",
                detail: "empty time axis".into(),
            });
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; c * t_len];
        for ci in 0..c {
            let row = &x[ci * t_len..(ci + 1) * t_len];
            let out_row = &mut out[ci * t_len..(ci + 1) * t_len];
            for ti in 0..t_len {
                let mut acc = 0.0;
                for n in 1..=2usize {
                    let tp = (ti + n).min(t_len - 1);
                    let tm = ti.saturating_sub(n);
                    acc += n as f64 * (row[tp] - row[tm]);
                }
                out_row[ti] = acc / 10.0;
            }
        }
        let rg = self.nodes[input].requires_grad;
        Ok(self.push(
            Tensor::matrix(c, t_len, out)?,
            Op::DeltaCols { input },
            rg,
        ))
    }

    /// Scalar dot product of two same-shape tensors.
    pub fn dot_all(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let prod = self.mul(lhs, rhs)?;
        Ok(self.sum_all(prod))
    }

    fn expect_scalar(&self, op: &'static str, id: NodeId) -> Result<()> {
        if self.value(id).numel() != 1 {
            return Err(Error::InvalidArg {
                op,
                detail: format!("expects a scalar, got shape {:?}", self.value(id).shape()),
            });
        }
        Ok(())
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Returns per-node gradients;
    /// leaves with `requires_grad = false` are skipped, and whole subgraphs
    /// that cannot reach such a leaf are never visited.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.expect_scalar("backward", loss)?;
        let mut grads = Gradients {
            grads: vec![None; self.nodes.len()],
        };
        if !self.nodes[loss].requires_grad {
            return Ok(grads); // nothing trainable feeds the loss
        }
        grads.grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g_out) = grads.take(id) else { continue };
            self.backward_op(id, &g_out, &mut grads);
            grads.put_back(id, g_out);
        }
        Ok(grads)
    }

    /// Returns a zeroed-or-existing gradient slot for `id`, or `None` when the
    /// node does not require gradients.
    fn slot<'a>(&self, grads: &'a mut Gradients, id: NodeId) -> Option<&'a mut [f64]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(grads.grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backward_op(&self, id: NodeId, g: &[f64], grads: &mut Gradients) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                filters,
                stride,
            } => {
                let (c_in, t_len) = self.shape2(*input);
                let fshape = self.value(*filters).shape();
                let (c_out, l) = (fshape[0], fshape[2]);
                let k = self.value(id).cols();
                let s = *stride;
                let f = self.value(*filters).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for o in 0..c_out {
                        let g_row = &g[o * k..(o + 1) * k];
                        for c in 0..c_in {
                            let dx_row = &mut dx[c * t_len..(c + 1) * t_len];
                            for li in 0..l {
                                let w = f[(o * c_in + c) * l + li];
                                if w == 0.0 {
                                    continue;
                                }
                                if s == 1 {
                                    axpy(w, g_row, &mut dx_row[li..li + k]);
                                } else {
                                    for (ki, &gv) in g_row.iter().enumerate() {
                                        dx_row[ki * s + li] += w * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                let x = self.value(*input).data();
                if let Some(df) = self.slot(grads, *filters) {
                    for o in 0..c_out {
                        let g_row = &g[o * k..(o + 1) * k];
                        for c in 0..c_in {
                            let x_row = &x[c * t_len..(c + 1) * t_len];
                            for li in 0..l {
                                let acc = if s == 1 {
                                    dot(g_row, &x_row[li..li + k])
                                } else {
                                    let mut a = 0.0;
                                    for (ki, &gv) in g_row.iter().enumerate() {
                                        a += gv * x_row[ki * s + li];
                                    }
                                    a
                                };
                                df[(o * c_in + c) * l + li] += acc;
                            }
                        }
                    }
                }
            }
            Op::ConvTranspose1d {
                input,
                basis,
                stride,
            } => {
                let (c, k) = self.shape2(*input);
                let l = self.value(*basis).cols();
                let s = *stride;
                let b = self.value(*basis).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ci in 0..c {
                        let b_row = &b[ci * l..(ci + 1) * l];
                        for ki in 0..k {
                            dx[ci * k + ki] += dot(&g[ki * s..ki * s + l], b_row);
                        }
                    }
                }
                let x = self.value(*input).data();
                if let Some(db) = self.slot(grads, *basis) {
                    for ci in 0..c {
                        let db_row = &mut db[ci * l..(ci + 1) * l];
                        for ki in 0..k {
                            axpy(x[ci * k + ki], &g[ki * s..ki * s + l], db_row);
                        }
                    }
                }
            }
            Op::DepthwiseConv1d {
                input,
                filters,
                dilation,
            } => {
                let (c, t_len) = self.shape2(*input);
                let q = self.value(*filters).cols();
                let d = *dilation;
                let pad_left = ((q - 1) * d + 1) / 2;
                let f = self.value(*filters).data();
                let x = self.value(*input).data();
                for ci in 0..c {
                    let g_row = &g[ci * t_len..(ci + 1) * t_len];
                    for qi in 0..q {
                        let shift = qi as isize * d as isize - pad_left as isize;
                        let t0 = (-shift).max(0) as usize;
                        let t1 = ((t_len as isize - shift).min(t_len as isize)).max(0) as usize;
                        if t0 >= t1 {
                            continue;
                        }
                        let s0 = (t0 as isize + shift) as usize;
                        let span = t1 - t0;
                        if let Some(dx) = self.slot(grads, *input) {
                            axpy(
                                f[ci * q + qi],
                                &g_row[t0..t1],
                                &mut dx[ci * t_len + s0..ci * t_len + s0 + span],
                            );
                        }
                        if let Some(df) = self.slot(grads, *filters) {
                            df[ci * q + qi] += dot(&g_row[t0..t1], &x[ci * t_len + s0..ci * t_len + s0 + span]);
                        }
                    }
                }
            }
            Op::ChannelLayerNorm { input, gain, bias } => {
                let (c, t_len) = self.shape2(*input);
                let x = self.value(*input).data();
                let gn = self.value(*gain).data();
                // Recompute the column statistics used in the forward pass.
                let mut mu = vec![0.0; t_len];
                for ci in 0..c {
                    axpy(1.0 / c as f64, &x[ci * t_len..(ci + 1) * t_len], &mut mu);
                }
                let mut var = vec![0.0; t_len];
                for ci in 0..c {
                    let row = &x[ci * t_len..(ci + 1) * t_len];
                    for (v, (&xv, &m)) in var.iter_mut().zip(row.iter().zip(&mu)) {
                        let dv = xv - m;
                        *v += dv * dv / c as f64;
                    }
                }
                let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                if let Some(dg) = self.slot(grads, *gain) {
                    for ci in 0..c {
                        let row = &x[ci * t_len..(ci + 1) * t_len];
                        let g_row = &g[ci * t_len..(ci + 1) * t_len];
                        let mut acc = 0.0;
                        for ti in 0..t_len {
                            acc += g_row[ti] * (row[ti] - mu[ti]) * inv[ti];
                        }
                        dg[ci] += acc;
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for ci in 0..c {
                        db[ci] += g[ci * t_len..(ci + 1) * t_len].iter().sum::<f64>();
                    }
                }
                if self.nodes[*input].requires_grad {
                    // Per column: dx = inv·(gy − mean(gy) − n̂·mean(gy·n̂)),
                    // with gy = g·gain and n̂ the normalized input.
                    let mut sum_gy = vec![0.0; t_len];
                    let mut sum_gyn = vec![0.0; t_len];
                    for ci in 0..c {
                        let row = &x[ci * t_len..(ci + 1) * t_len];
                        let g_row = &g[ci * t_len..(ci + 1) * t_len];
                        for ti in 0..t_len {
                            let gy = g_row[ti] * gn[ci];
                            let nh = (row[ti] - mu[ti]) * inv[ti];
                            sum_gy[ti] += gy;
                            sum_gyn[ti] += gy * nh;
                        }
                    }
                    let dx = self.slot(grads, *input).expect("input requires grad");
                    for ci in 0..c {
                        let row = &x[ci * t_len..(ci + 1) * t_len];
                        let g_row = &g[ci * t_len..(ci + 1) * t_len];
                        let dx_row = &mut dx[ci * t_len..(ci + 1) * t_len];
                        for ti in 0..t_len {
                            let gy = g_row[ti] * gn[ci];
                            let nh = (row[ti] - mu[ti]) * inv[ti];
                            dx_row[ti] +=
                                inv[ti] * (gy - sum_gy[ti] / c as f64 - nh * sum_gyn[ti] / c as f64);
                        }
                    }
                }
            }
            Op::GlobalLayerNorm { input, gain, bias } => {
                let (c, t_len) = self.shape2(*input);
                let x = self.value(*input).data();
                let gn = self.value(*gain).data();
                let n = (c * t_len) as f64;
                let mu = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                if let Some(dg) = self.slot(grads, *gain) {
                    for ci in 0..c {
                        let row = &x[ci * t_len..(ci + 1) * t_len];
                        let g_row = &g[ci * t_len..(ci + 1) * t_len];
                        let mut acc = 0.0;
                        for ti in 0..t_len {
                            acc += g_row[ti] * (row[ti] - mu) * inv;
                        }
                        dg[ci] += acc;
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for ci in 0..c {
                        db[ci] += g[ci * t_len..(ci + 1) * t_len].iter().sum::<f64>();
                    }
                }
                if self.nodes[*input].requires_grad {
                    let mut sum_gy = 0.0;
                    let mut sum_gyn = 0.0;
                    for ci in 0..c {
                        let row = &x[ci * t_len..(ci + 1) * t_len];
                        let g_row = &g[ci * t_len..(ci + 1) * t_len];
                        for ti in 0..t_len {
                            let gy = g_row[ti] * gn[ci];
                            sum_gy += gy;
                            sum_gyn += gy * (row[ti] - mu) * inv;
                        }
                    }
                    let dx = self.slot(grads, *input).expect("input requires grad");
                    for ci in 0..c {
                        let row = &x[ci * t_len..(ci + 1) * t_len];
                        let g_row = &g[ci * t_len..(ci + 1) * t_len];
                        let dx_row = &mut dx[ci * t_len..(ci + 1) * t_len];
                        for ti in 0..t_len {
                            let gy = g_row[ti] * gn[ci];
                            let nh = (row[ti] - mu) * inv;
                            dx_row[ti] += inv * (gy - sum_gy / n - nh * sum_gyn / n);
                        }
                    }
                }
            }
            Op::MatMul { lhs, rhs } => {
                let (m, k) = self.shape2(*lhs);
                let n = self.value(*rhs).cols();
                if let Some(da) = self.slot(grads, *lhs) {
                    matmul_nt_acc(m, n, k, g, self.value(*rhs).data(), da);
                }
                if let Some(db) = self.slot(grads, *rhs) {
                    matmul_tn_acc(k, m, n, self.value(*lhs).data(), g, db);
                }
            }
            Op::MatVec { mat, vec } => {
                let (r, c) = self.shape2(*mat);
                let v = self.value(*vec).data();
                if let Some(dm) = self.slot(grads, *mat) {
                    for i in 0..r {
                        axpy(g[i], v, &mut dm[i * c..(i + 1) * c]);
                    }
                }
                let m = self.value(*mat).data();
                if let Some(dv) = self.slot(grads, *vec) {
                    for i in 0..r {
                        axpy(g[i], &m[i * c..(i + 1) * c], dv);
                    }
                }
            }
            Op::AddBiasCol { input, bias } => {
                let (c, t_len) = self.shape2(*input);
                if let Some(dx) = self.slot(grads, *input) {
                    axpy(1.0, g, dx);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for ci in 0..c {
                        db[ci] += g[ci * t_len..(ci + 1) * t_len].iter().sum::<f64>();
                    }
                }
            }
            Op::Relu { input } => {
                let y = self.value(id).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { input } => {
                let y = self.value(id).data();
                if let Some(dx) = self.slot(grads, *input) {
                    let s: f64 = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += yv * (gv - s);
                    }
                }
            }
            Op::MeanPoolCols { input } => {
                let (c, t_len) = self.shape2(*input);
                if let Some(dx) = self.slot(grads, *input) {
                    for ci in 0..c {
                        let gv = g[ci] / t_len as f64;
                        for d in &mut dx[ci * t_len..(ci + 1) * t_len] {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MaxPool3Cols { input } => {
                let (c, t_len) = self.shape2(*input);
                let w = t_len / 3;
                let x = self.value(*input).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ci in 0..c {
                        for wi in 0..w {
                            let base = ci * t_len + wi * 3;
                            let s = &x[base..base + 3];
                            // First maximum wins, deterministically.
                            let mut arg = 0;
                            if s[1] > s[arg] {
                                arg = 1;
                            }
                            if s[2] > s[arg] {
                                arg = 2;
                            }
                            dx[base + arg] += g[ci * w + wi];
                        }
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                if let Some(da) = self.slot(grads, *lhs) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = self.slot(grads, *rhs) {
                    axpy(1.0, g, db);
                }
            }
            Op::Sub { lhs, rhs } => {
                if let Some(da) = self.slot(grads, *lhs) {
                    axpy(1.0, g, da);
                }
                if let Some(db) = self.slot(grads, *rhs) {
                    axpy(-1.0, g, db);
                }
            }
            Op::Mul { lhs, rhs } => {
                let b = self.value(*rhs).data();
                if let Some(da) = self.slot(grads, *lhs) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(b) {
                        *d += gv * bv;
                    }
                }
                let a = self.value(*lhs).data();
                if let Some(db) = self.slot(grads, *rhs) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(a) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(dx) = self.slot(grads, *input) {
                    axpy(*factor, g, dx);
                }
            }
            Op::ConcatRows { inputs } => {
                let cols = self.value(id).cols();
                let mut offset = 0;
                for &src in inputs {
                    let n = self.value(src).numel();
                    if let Some(dx) = self.slot(grads, src) {
                        axpy(1.0, &g[offset..offset + n], dx);
                    }
                    offset += n;
                    debug_assert_eq!(n % cols, 0);
                }
            }
            Op::ConcatVec { lhs, rhs } => {
                let nl = self.value(*lhs).numel();
                if let Some(da) = self.slot(grads, *lhs) {
                    axpy(1.0, &g[..nl], da);
                }
                if let Some(db) = self.slot(grads, *rhs) {
                    axpy(1.0, &g[nl..], db);
                }
            }
            Op::RepeatCol { input, count } => {
                let d = self.value(*input).numel();
                if let Some(dx) = self.slot(grads, *input) {
                    for di in 0..d {
                        dx[di] += g[di * count..(di + 1) * count].iter().sum::<f64>();
                    }
                }
            }
            Op::PadCols { input, left, right } => {
                let (c, t_len) = self.shape2(*input);
                let new_t = left + t_len + right;
                if let Some(dx) = self.slot(grads, *input) {
                    for ci in 0..c {
                        axpy(
                            1.0,
                            &g[ci * new_t + left..ci * new_t + left + t_len],
                            &mut dx[ci * t_len..(ci + 1) * t_len],
                        );
                    }
                }
            }
            Op::SliceCols { input, start, len } => {
                let (c, t_len) = self.shape2(*input);
                if let Some(dx) = self.slot(grads, *input) {
                    for ci in 0..c {
                        axpy(
                            1.0,
                            &g[ci * len..(ci + 1) * len],
                            &mut dx[ci * t_len + start..ci * t_len + start + len],
                        );
                    }
                }
            }
            Op::SumAll { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Center { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    let mean_g = g.iter().sum::<f64>() / g.len() as f64;
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv - mean_g;
                    }
                }
            }
            Op::Ln { input } => {
                if let Some(dx) = self.slot(grads, *input) {
                    let v = self.value(*input).as_scalar().max(LN_FLOOR);
                    dx[0] += g[0] / v;
                }
            }
            Op::Div { num, den } => {
                let nv = self.value(*num).as_scalar();
                let dv = self.value(*den).as_scalar();
                if let Some(dn) = self.slot(grads, *num) {
                    dn[0] += g[0] / dv;
                }
                if let Some(dd) = self.slot(grads, *den) {
                    dd[0] -= g[0] * nv / (dv * dv);
                }
            }
            Op::MulScalar { input, scalar } => {
                let s = self.value(*scalar).as_scalar();
                if let Some(dx) = self.slot(grads, *input) {
                    axpy(s, g, dx);
                }
                let x = self.value(*input).data();
                if let Some(ds) = self.slot(grads, *scalar) {
                    ds[0] += dot(g, x);
                }
            }
            Op::MaxElem { lhs, rhs } => {
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                if let Some(da) = self.slot(grads, *lhs) {
                    for i in 0..g.len() {
                        if a[i] >= b[i] {
                            da[i] += g[i];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *rhs) {
                    for i in 0..g.len() {
                        if a[i] < b[i] {
                            db[i] += g[i];
                        }
                    }
                }
            }
            Op::Pick { input, index } => {
                if let Some(dx) = self.slot(grads, *input) {
                    dx[*index] += g[0];
                }
            }
            Op::LogSumExp { input } => {
                let x = self.value(*input).data();
                if let Some(dx) = self.slot(grads, *input) {
                    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = x.iter().map(|&v| (v - m).exp()).sum();
                    for (d, &xv) in dx.iter_mut().zip(x) {
                        *d += g[0] * (xv - m).exp() / z;
                    }
                }
            }
            Op::Hypot { re, im } => {
                let y = self.value(id).data();
                let a = self.value(*re).data();
                let b = self.value(*im).data();
                if let Some(da) = self.slot(grads, *re) {
                    for i in 0..g.len() {
                        if y[i] > 0.0 {
                            da[i] += g[i] * a[i] / y[i];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *im) {
                    for i in 0..g.len() {
                        if y[i] > 0.0 {
                            db[i] += g[i] * b[i] / y[i];
                        }
                    }
                }
            }
            Op::SqrtFloor0 { input } => {
                let x = self.value(*input).data();
                let y = self.value(id).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            dx[i] += g[i] / (2.0 * y[i]);
                        }
                    }
                }
            }
            Op::FrameCols { input, win, hop } => {
                let frames = self.value(id).cols();
                if let Some(dx) = self.slot(grads, *input) {
                    for f in 0..frames {
                        for l in 0..*win {
                            dx[f * hop + l] += g[l * frames + f];
                        }
                    }
                }
            }
            Op::RowScale { input, vec } => {
                let (c, t_len) = self.shape2(*input);
                let v = self.value(*vec).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ci in 0..c {
                        axpy(v[ci], &g[ci * t_len..(ci + 1) * t_len], &mut dx[ci * t_len..(ci + 1) * t_len]);
                    }
                }
                let x = self.value(*input).data();
                if let Some(dv) = self.slot(grads, *vec) {
                    for ci in 0..c {
                        dv[ci] += dot(&g[ci * t_len..(ci + 1) * t_len], &x[ci * t_len..(ci + 1) * t_len]);
                    }
                }
            }
            Op::WeightedColSum { input, weights } => {
                let (c, t_len) = self.shape2(*input);
                let w = self.value(*weights).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ci in 0..c {
                        axpy(g[ci], w, &mut dx[ci * t_len..(ci + 1) * t_len]);
                    }
                }
                let x = self.value(*input).data();
                if let Some(dw) = self.slot(grads, *weights) {
                    for ci in 0..c {
                        axpy(g[ci], &x[ci * t_len..(ci + 1) * t_len], dw);
                    }
                }
            }
            Op::DeltaCols { input } => {
                let (c, t_len) = self.shape2(*input);
                if let Some(dx) = self.slot(grads, *input) {
                    for ci in 0..c {
                        let g_row = &g[ci * t_len..(ci + 1) * t_len];
                        let dx_row = &mut dx[ci * t_len..(ci + 1) * t_len];
                        for ti in 0..t_len {
                            for n in 1..=2usize {
                                let tp = (ti + n).min(t_len - 1);
                                let tm = ti.saturating_sub(n);
                                let w = n as f64 / 10.0;
                                dx_row[tp] += w * g_row[ti];
                                dx_row[tm] -= w * g_row[ti];
                            }
                        }
                    }
                }
            }
        }
    }
}
