//! Similarity mask head, binarization, losses, and segmentation metrics.

use fan_autograd::{sigmoid, BoundParams, Graph, ParamId, Tensor, TensorError, Var};

use crate::error::{FanError, Result};
use crate::nn::ParamBuilder;

/// Logit resolution relative to the input image.
pub const LOGIT_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct MaskHead {
    pub bias: ParamId,
}

impl MaskHead {
    pub fn new(pb: &mut ParamBuilder) -> Result<Self> {
        let mut s = pb.scope("head");
        Ok(Self { bias: s.zeros("bias", &[1])? })
    }

    /// `logits[p] = <visual[p], sentence> / sqrt(D) + bias`, shaped `[h×w]`.
    pub fn similarity(&self, g: &mut Graph, p: &BoundParams, visual: Var, sentence: Var) -> Result<Var> {
        similarity_mask(g, visual, sentence, p[self.bias])
    }
}

pub fn similarity_mask(g: &mut Graph, visual: Var, sentence: Var, bias: Var) -> Result<Var> {
    let vs = g.shape(visual).to_vec();
    let ss = g.shape(sentence).to_vec();
    if vs.len() != 3 || ss.len() != 2 || ss[0] != 1 || ss[1] != vs[2] {
        return Err(TensorError::shape("similarity_mask", &vs, &ss).into());
    }
    let (h, w, d) = (vs[0], vs[1], vs[2]);
    let flat = g.reshape(visual, vec![h * w, d])?;
    let dots = g.matmul_nt(flat, sentence)?;
    let scaled = g.scale(dots, 1.0 / (d as f64).sqrt());
    let logits = g.add_scalar_var(scaled, bias)?;
    Ok(g.reshape(logits, vec![h, w])?)
}

/// Bilinear upsampling of `[h×w]` logits to `[H×W]`, where `H = 4h`, `W = 4w`.
pub fn upsample_logits(g: &mut Graph, logits: Var, height: usize, width: usize) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] * LOGIT_STRIDE != height || s[1] * LOGIT_STRIDE != width {
        return Err(TensorError::shape("upsample_logits", &s, &[height, width]).into());
    }
    let x = g.reshape(logits, vec![s[0], s[1], 1])?;
    let up = g.upsample_bilinear(x, height, width)?;
    Ok(g.reshape(up, vec![height, width])?)
}

/// Tensor-level convenience over [`upsample_logits`].
pub fn upsample_logits_tensor(logits: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let up = upsample_logits(&mut g, l, height, width)?;
    Ok(g.value(up).clone())
}

/// Boolean grid in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(FanError::Data(format!("mask of {height}×{width} needs {} values, got {}", height * width, values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.values[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// 0/1 tensor `[H×W]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height, self.width], data).expect("mask dims are positive")
    }

    /// Nearest-neighbour downsampling by `stride`, sampling pixel `stride·i + stride/2`.
    pub fn downsample(&self, stride: usize) -> Result<Tensor> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(FanError::Data(format!("mask {}×{} not divisible by {stride}", self.height, self.width)));
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(if self.get(stride * i + stride / 2, stride * j + stride / 2) { 1.0 } else { 0.0 });
            }
        }
        Ok(Tensor::new(vec![h, w], data)?)
    }

    fn check_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(TensorError::shape(op, &[self.height, self.width], &[other.height, other.width]).into());
        }
        Ok(())
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(FanError::Config(format!("threshold {threshold} must lie in (0, 1)")));
    }
    Ok(())
}

/// Foreground where `prob >= threshold`.
pub fn binarize_probs(probs: &Tensor, threshold: f64) -> Result<BinaryMask> {
    check_threshold(threshold)?;
    let s = probs.shape();
    if s.len() != 2 {
        return Err(TensorError::invalid("binarize", format!("expected [H×W], got {s:?}")).into());
    }
    BinaryMask::new(s[0], s[1], probs.data().iter().map(|&p| p >= threshold).collect())
}

/// Foreground where `sigmoid(logit) >= threshold`.
pub fn binarize(logits: &Tensor, threshold: f64) -> Result<BinaryMask> {
    check_threshold(threshold)?;
    binarize_probs(&logits.map(sigmoid), threshold)
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_dims(gt, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.values.iter().zip(&gt.values) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of samples with IoU at least `x`.
pub fn precision_at(ious: &[f64], x: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(TensorError::Contract("precision over an empty IoU list".into()).into());
    }
    if !(x > 0.0 && x < 1.0) {
        return Err(FanError::Config(format!("precision threshold {x} must lie in (0, 1)")));
    }
    Ok(ious.iter().filter(|&&v| v >= x).count() as f64 / ious.len() as f64)
}
