//! Forward/backward numeric kernels on raw slices.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `ta`/`tb` mean the stored buffer is the transpose of the logical operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe buffers whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_extents(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len).map(|j| y[base + j * inner] * dy[base + j * inner]).sum();
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

/// Layer norm over the last dimension. Returns (normalized, inverse std per row).
pub(crate) fn layer_norm_forward(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (xhat, rstd)
}

/// Gradient of the normalized output w.r.t. the input, given the gradient
/// w.r.t. the normalized (pre-affine) values.
pub(crate) fn layer_norm_backward(xhat: &[f64], rstd: &[f64], dxhat: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; xhat.len()];
    let n = d as f64;
    for (r, &inv) in rstd.iter().enumerate() {
        let s = r * d..(r + 1) * d;
        let xh = &xhat[s.clone()];
        let g = &dxhat[s.clone()];
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &gi), &xi) in dx[s].iter_mut().zip(g).zip(xh) {
            *o = inv * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }
}

/// Unfolds `[h×w×c_in]` into `[oh·ow × kh·kw·c_in]` patches, zero-padded.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.oh * g.ow * plen];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.c_in;
                    let dst = (ky * g.kw + kx) * g.c_in;
                    row[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im(dcols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut dx = vec![0.0; g.h * g.w * g.c_in];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &dcols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c_in;
                    let src = (ky * g.kw + kx) * g.c_in;
                    for (d, s) in dx[dst..dst + g.c_in].iter_mut().zip(&row[src..src + g.c_in]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dx
}

/// One output coordinate's two source taps and the weight of the upper tap,
/// using the half-pixel (align-corners = false) convention.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub(crate) fn bilinear_forward(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; oh * ow * c];
    for (oy, y) in ty.iter().enumerate() {
        for (ox, xt) in tx.iter().enumerate() {
            let corners = [
                (y.lo, xt.lo, (1.0 - y.frac) * (1.0 - xt.frac)),
                (y.lo, xt.hi, (1.0 - y.frac) * xt.frac),
                (y.hi, xt.lo, y.frac * (1.0 - xt.frac)),
                (y.hi, xt.hi, y.frac * xt.frac),
            ];
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            for (iy, ix, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                let src = &x[(iy * w + ix) * c..][..c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(dy: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; h * w * c];
    for (oy, y) in ty.iter().enumerate() {
        for (ox, xt) in tx.iter().enumerate() {
            let corners = [
                (y.lo, xt.lo, (1.0 - y.frac) * (1.0 - xt.frac)),
                (y.lo, xt.hi, (1.0 - y.frac) * xt.frac),
                (y.hi, xt.lo, y.frac * (1.0 - xt.frac)),
                (y.hi, xt.hi, y.frac * xt.frac),
            ];
            let src = &dy[(oy * ow + ox) * c..][..c];
            for (iy, ix, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                let dst = &mut dx[(iy * w + ix) * c..][..c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable per-element binary cross-entropy with logits.
pub(crate) fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
