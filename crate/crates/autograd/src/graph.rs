//! Dynamic computation tape with reverse-mode differentiation.
//!
//! Every operation appends one node; node indices therefore form a
//! topological order, and [`Graph::backward`] replays the chain rule by
//! walking the nodes in reverse.

use crate::error::TensorError;
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Logit assigned to masked attention keys before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// A user-supplied differentiable operation.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError>;
    /// Vector-Jacobian product: one gradient per input, each shaped like it.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddScalarVar(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    Softmax { x: Var, axis: usize },
    MaskKeys { x: Var, mask: Vec<bool> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    Conv2d { x: Var, kernel: Var, geom: ConvGeometry },
    Upsample { x: Var, h: usize, w: usize, c: usize },
    Sum(Var),
    Mean(Var),
    Bce { logits: Var, target: Vec<f64> },
    Dice { logits: Var, target: Vec<f64>, smooth: f64 },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True when some `requires_grad` leaf reaches this node.
    tracked: bool,
    grad: Option<Tensor>,
}

/// One attention weight matrix captured during an instrumented forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub site: String,
    pub head: usize,
    /// `[queries × keys]`, rows are softmax distributions.
    pub weights: Tensor,
    pub key_padding_mask: Option<Vec<bool>>,
}

/// The computation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    attention_log: Option<Vec<AttentionRecord>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts capturing attention weights from [`crate::multi_head_attention`].
    pub fn record_attention(&mut self) {
        self.attention_log.get_or_insert_with(Vec::new);
    }

    pub fn attention_log(&self) -> &[AttentionRecord] {
        self.attention_log.as_deref().unwrap_or(&[])
    }

    pub fn is_recording_attention(&self) -> bool {
        self.attention_log.is_some()
    }

    pub(crate) fn log_attention(&mut self, record: AttentionRecord) {
        if let Some(log) = self.attention_log.as_mut() {
            log.push(record);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, tracked: requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, requires_grad: false, tracked, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::invalid(op, format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra ------------------------------------------------

    /// `a [m×k] × b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a [m×k] × bᵀ` where `b` is `[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (ar, ac) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), Op::Transpose { x, rows, cols }, &[x]))
    }

    // ---- elementwise ---------------------------------------------------

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor), &[x])
    }

    /// Adds a `[d]` bias to every length-`d` row of `x [..×d]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(TensorError::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(self.push(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Adds a one-element tensor to every element of `x`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if !self.value(s).is_scalar() {
            return Err(TensorError::shape("add_scalar_var", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v + sv);
        Ok(self.push(t, Op::AddScalarVar(x, s), &[x, s]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Data(format!("ln of non-positive value {bad}")));
        }
        let t = self.value(x).map(f64::ln);
        Ok(self.push(t, Op::Ln(x), &[x]))
    }

    // ---- normalization -------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let out = kernels::softmax_forward(self.value(x).data(), &shape, axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Replaces columns of `x [..×k]` flagged in `mask` with [`MASKED_LOGIT`].
    pub fn mask_keys(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let k = *self.shape(x).last().unwrap_or(&0);
        if mask.len() != k {
            return Err(TensorError::shape("mask_keys", self.shape(x), &[mask.len()]));
        }
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(k) {
            for (v, &m) in row.iter_mut().zip(mask) {
                if m {
                    *v = MASKED_LOGIT;
                }
            }
        }
        Ok(self.push(t, Op::MaskKeys { x, mask: mask.to_vec() }, &[x]))
    }

    /// Normalizes the last dimension then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (xhat, rstd) = kernels::layer_norm_forward(self.value(x).data(), d, eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((v, gg), bb) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gg + bb;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(TensorError::invalid("slice_rows", format!("rows {start}..{} of {shape:?}", start + len)));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SliceRows { x, start }, &[x]))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(TensorError::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::invalid("slice_cols", format!("cols {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, len], data), Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| TensorError::invalid("concat_cols", "no inputs"))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Gathers rows of `table [V×C]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, c) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(TensorError::invalid("embedding", "empty id list"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index { op: "embedding", index: id, bound: vocab });
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), c], data),
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        ))
    }

    // ---- spatial -------------------------------------------------------

    /// Cross-correlation of `x [h×w×c_in]` with `kernel [kh×kw×c_in×c_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (h, w, c_in) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            _ => return Err(TensorError::invalid("conv2d", format!("input must be [h×w×c], got {:?}", self.shape(x)))),
        };
        let (kh, kw, kc, c_out) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(TensorError::invalid("conv2d", format!("kernel must be 4-D, got {:?}", self.shape(kernel)))),
        };
        if kc != c_in {
            return Err(TensorError::shape("conv2d", self.shape(x), self.shape(kernel)));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::shape("conv2d", self.shape(x), self.shape(kernel)));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeometry { h, w, c_in, kh, kw, c_out, stride, padding, oh, ow };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; oh * ow * c_out];
        kernels::gemm(oh * ow, geom.patch_len(), c_out, &cols, false, self.value(kernel).data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![oh, ow, c_out], out), Op::Conv2d { x, kernel, geom }, &[x, kernel]))
    }

    /// Bilinear resize of `x [h×w×c]` (align-corners = false). Upsampling only.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            _ => return Err(TensorError::invalid("upsample_bilinear", format!("expected [h×w×c], got {:?}", self.shape(x)))),
        };
        if out_h == 0 || out_w == 0 || out_h < h || out_w < w {
            return Err(TensorError::shape("upsample_bilinear", self.shape(x), &[out_h, out_w, c]));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), h, w, c, out_h, out_w);
        Ok(self.push(Tensor::from_parts(vec![out_h, out_w, c], out), Op::Upsample { x, h, w, c }, &[x]))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    fn check_target(&self, op: &'static str, logits: Var, target: &Tensor) -> Result<(), TensorError> {
        if self.shape(logits) != target.shape() {
            return Err(TensorError::shape(op, self.shape(logits), target.shape()));
        }
        if let Some(bad) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Data(format!("{op}: target value {bad} is not 0 or 1")));
        }
        Ok(())
    }

    /// Mean per-element binary cross-entropy of `sigmoid(logits)` against a 0/1 target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var, TensorError> {
        self.check_target("bce_loss", logits, target)?;
        let x = self.value(logits).data();
        let n = x.len() as f64;
        let loss = x.iter().zip(target.data()).map(|(&x, &y)| kernels::bce_with_logit(x, y)).sum::<f64>() / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce { logits, target: target.data().to_vec() },
            &[logits],
        ))
    }

    /// `1 − (2·Σpy + s)/(Σp + Σy + s)` with `p = sigmoid(logits)`.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor, smooth: f64) -> Result<Var, TensorError> {
        self.check_target("dice_loss", logits, target)?;
        let (inter, psum, ysum) = dice_sums(self.value(logits).data(), target.data());
        let loss = 1.0 - (2.0 * inter + smooth) / (psum + ysum + smooth);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice { logits, target: target.data().to_vec(), smooth },
            &[logits],
        ))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(out, Op::Custom { op, inputs: inputs.to_vec() }, inputs))
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates d`loss`/d(node) to every `requires_grad` node, adding to
    /// any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if self.nodes[i].requires_grad {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g.clone())),
                }
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut send = |v: Var, grad: Vec<f64>| accumulate(adj, v, grad);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                if tracked(a) {
                    // d(op(a)) = g · op(b)ᵀ, stored in a's layout.
                    let mut da = vec![0.0; m * k];
                    let bv = self.value(b).data();
                    if ta {
                        kernels::gemm(k, n, m, bv, tb, g, true, 0.0, &mut da);
                    } else {
                        kernels::gemm(m, n, k, g, false, bv, !tb, 0.0, &mut da);
                    }
                    send(a, da);
                }
                if tracked(b) {
                    let mut db = vec![0.0; k * n];
                    let av = self.value(a).data();
                    if tb {
                        kernels::gemm(n, m, k, g, true, av, ta, 0.0, &mut db);
                    } else {
                        kernels::gemm(k, m, n, av, !ta, g, false, 0.0, &mut db);
                    }
                    send(b, db);
                }
            }
            &Op::Add(a, b) => {
                if tracked(a) {
                    send(a, g.to_vec());
                }
                if tracked(b) {
                    send(b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if tracked(a) {
                    send(a, g.to_vec());
                }
                if tracked(b) {
                    send(b, g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if tracked(a) {
                    send(a, g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect());
                }
                if tracked(b) {
                    send(b, g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(x, f) => send(x, g.iter().map(|v| v * f).collect()),
            &Op::AddRowBias(x, bias) => {
                if tracked(x) {
                    send(x, g.to_vec());
                }
                if tracked(bias) {
                    let d = self.value(bias).numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(bias, db);
                }
            }
            &Op::AddScalarVar(x, s) => {
                if tracked(x) {
                    send(x, g.to_vec());
                }
                if tracked(s) {
                    send(s, vec![g.iter().sum()]);
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                send(x, g.iter().zip(xv).map(|(d, &v)| d * kernels::gelu_grad(v)).collect());
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                send(x, g.iter().zip(y).map(|(d, &s)| d * s * (1.0 - s)).collect());
            }
            &Op::Ln(x) => {
                let xv = self.value(x).data();
                send(x, g.iter().zip(xv).map(|(d, &v)| d / v).collect());
            }
            &Op::Softmax { x, axis } => {
                send(x, kernels::softmax_backward(node.value.data(), g, node.value.shape(), axis));
            }
            Op::MaskKeys { x, mask } => {
                let k = mask.len();
                let mut dx = g.to_vec();
                for row in dx.chunks_mut(k) {
                    for (v, &m) in row.iter_mut().zip(mask) {
                        if m {
                            *v = 0.0;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                if tracked(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, gi), xi) in dg.iter_mut().zip(grow).zip(xrow) {
                            *a += gi * xi;
                        }
                    }
                    send(*gamma, dg);
                }
                if tracked(*beta) {
                    let mut db = vec![0.0; d];
                    for grow in g.chunks(d) {
                        db.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                    send(*beta, db);
                }
                if tracked(*x) {
                    let gam = self.value(*gamma).data();
                    let dxhat: Vec<f64> = g.chunks(d).flat_map(|row| row.iter().zip(gam).map(|(a, b)| a * b)).collect();
                    send(*x, kernels::layer_norm_backward(xhat, rstd, &dxhat, d));
                }
            }
            &Op::Reshape(x) => send(x, g.to_vec()),
            &Op::Transpose { x, rows, cols } => {
                // g is [cols×rows]
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                send(x, dx);
            }
            &Op::SliceRows { x, start } => {
                let xv = self.value(x);
                let row: usize = xv.shape()[1..].iter().product();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * row..start * row + g.len()].copy_from_slice(g);
                send(x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if tracked(p) {
                        send(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            &Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if tracked(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(p, dp);
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let c = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (pos, &id) in ids.iter().enumerate() {
                    for (a, b) in dt[id * c..(id + 1) * c].iter_mut().zip(&g[pos * c..(pos + 1) * c]) {
                        *a += b;
                    }
                }
                send(*table, dt);
            }
            &Op::Conv2d { x, kernel, geom } => {
                let rows = geom.oh * geom.ow;
                let plen = geom.patch_len();
                if tracked(kernel) {
                    let cols = kernels::im2col(self.value(x).data(), &geom);
                    let mut dk = vec![0.0; plen * geom.c_out];
                    kernels::gemm(plen, rows, geom.c_out, &cols, true, g, false, 0.0, &mut dk);
                    send(kernel, dk);
                }
                if tracked(x) {
                    let mut dcols = vec![0.0; rows * plen];
                    kernels::gemm(rows, geom.c_out, plen, g, false, self.value(kernel).data(), true, 0.0, &mut dcols);
                    send(x, kernels::col2im(&dcols, &geom));
                }
            }
            &Op::Upsample { x, h, w, c } => {
                let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                send(x, kernels::bilinear_backward(g, h, w, c, oh, ow));
            }
            &Op::Sum(x) => send(x, vec![g[0]; self.value(x).numel()]),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                send(x, vec![g[0] / n as f64; n]);
            }
            Op::Bce { logits, target } => {
                let x = self.value(*logits).data();
                let n = x.len() as f64;
                send(*logits, x.iter().zip(target).map(|(&x, &y)| g[0] * (kernels::sigmoid(x) - y) / n).collect());
            }
            Op::Dice { logits, target, smooth } => {
                let x = self.value(*logits).data();
                let (inter, psum, ysum) = dice_sums(x, target);
                let num = 2.0 * inter + smooth;
                let den = psum + ysum + smooth;
                // d loss / d p_j = -(2 y_j den - num) / den²
                let dx = x
                    .iter()
                    .zip(target)
                    .map(|(&xi, &yi)| {
                        let p = kernels::sigmoid(xi);
                        let dp = -(2.0 * yi * den - num) / (den * den);
                        g[0] * dp * p * (1.0 - p)
                    })
                    .collect();
                send(*logits, dx);
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&values, &node.value, g);
                for (&v, dv) in inputs.iter().zip(grads) {
                    if tracked(v) {
                        send(v, dv);
                    }
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, grad: Vec<f64>) {
    match adj[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
        None => adj[v.0] = Some(grad),
    }
}

fn dice_sums(logits: &[f64], target: &[f64]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut ysum = 0.0;
    for (&x, &y) in logits.iter().zip(target) {
        let p = kernels::sigmoid(x);
        inter += p * y;
        psum += p;
        ysum += y;
    }
    (inter, psum, ysum)
}
