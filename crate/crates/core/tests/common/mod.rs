//! Naive reference implementations used as oracles, written independently
//! of the tape so they share no code with the network under test.
#![allow(dead_code)]

use fan_autograd::{ParamStore, Tensor};
use fan_core::nn::{Attention, FeedForward, Linear, Norm};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn rows(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = rows(store.tensor(l.w));
    let b = store.tensor(l.b).data().to_vec();
    matmul(x, &w).into_iter().map(|r| r.iter().zip(&b).map(|(v, bi)| v + bi).collect()).collect()
}

pub fn layer_norm(store: &ParamStore, n: &Norm, x: &Mat) -> Mat {
    let gamma = store.tensor(n.gamma).data();
    let beta = store.tensor(n.beta).data();
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            r.iter().enumerate().map(|(j, v)| (v - mean) / (var + n.eps).sqrt() * gamma[j] + beta[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn ffn(store: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    let h: Mat = linear(store, &f.up, x).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(store, &f.down, &h)
}

/// Softmax attention weights of each head, then the merged projected output.
pub fn attention(store: &ParamStore, a: &Attention, q: &Mat, kv: &Mat, mask: Option<&[bool]>) -> (Vec<Mat>, Mat) {
    let qp = linear(store, &a.q, q);
    let kp = linear(store, &a.k, kv);
    let vp = linear(store, &a.v, kv);
    let d = qp[0].len();
    let hd = d / a.heads;
    let mut weights = Vec::new();
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..a.heads {
        let cols = h * hd..(h + 1) * hd;
        let mut wh = Vec::new();
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<Option<f64>> = kp
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    if mask.is_some_and(|m| m[j]) {
                        None
                    } else {
                        Some(cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (hd as f64).sqrt())
                    }
                })
                .collect();
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let exps: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = exps.iter().sum();
            let row: Vec<f64> = exps.iter().map(|e| e / z).collect();
            for c in cols.clone() {
                merged[i][c] = row.iter().zip(&vp).map(|(w, v)| w * v[c]).sum();
            }
            wh.push(row);
        }
        weights.push(wh);
    }
    (weights, linear(store, &a.o, &merged))
}

/// `[h×w×c]` tensor convolved with a `[3×3×c×o]` kernel, zero padding 1.
pub fn conv3x3(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let o = k.shape()[3];
    let (oh, ow) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
    let mut out = Tensor::zeros(vec![oh, ow, o]);
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..o {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ic in 0..c {
                            s += x.at(&[iy as usize, ix as usize, ic]) * k.at(&[ky, kx, ic, oc]);
                        }
                    }
                }
                out.set(&[oy, ox, oc], s);
            }
        }
    }
    out
}

/// Half-pixel bilinear sample position along one axis.
fn tap(o: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    (lo, hi, if hi == lo { 0.0 } else { src - lo as f64 })
}

/// Bilinear resize of `[h×w×c]` (or `[h×w]`) with align_corners = false.
pub fn bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let c = if x.ndim() == 3 { x.shape()[2] } else { 1 };
    let mut data = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        let (y0, y1, fy) = tap(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = tap(ox, w, ow);
            for ch in 0..c {
                let at = |y: usize, xx: usize| x.data()[(y * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let shape = if x.ndim() == 3 { vec![oh, ow, c] } else { vec![oh, ow] };
    Tensor::new(shape, data).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Worst deviations of the metric and loss implementations from brute-force
/// oracles over `trials` random instances: (iou mismatches, precision
/// mismatches, bce max error, dice max error).
pub fn metric_oracle_sweep(trials: usize, seed: u64) -> (usize, usize, f64, f64) {
    use fan_autograd::Graph;
    use fan_core::{iou, precision_at, BinaryMask};
    let mut r = rng(seed);
    let (mut iou_bad, mut prec_bad, mut bce_err, mut dice_err) = (0, 0, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let (h, w) = (r.gen_range(1..12), r.gen_range(1..12));
        let density = r.gen_range(0.0..1.0);
        let mut draw = || (0..h * w).map(|_| r.gen_bool(density)).collect::<Vec<bool>>();
        let (a, b) = (draw(), draw());
        let (mut inter, mut union) = (0usize, 0usize);
        for (&x, &y) in a.iter().zip(&b) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let got = iou(&BinaryMask::new(h, w, a).unwrap(), &BinaryMask::new(h, w, b).unwrap()).unwrap();
        iou_bad += (got != want) as usize;

        let n = r.gen_range(1..40);
        let ious: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.1) { 0.5 } else { r.gen_range(0.0..=1.0) }).collect();
        let x = [0.5, 0.7, 0.9][r.gen_range(0..3)];
        let mut count = 0;
        for &v in &ious {
            if v >= x {
                count += 1;
            }
        }
        prec_bad += (precision_at(&ious, x).unwrap() != count as f64 / n as f64) as usize;

        let len = r.gen_range(1..60);
        let scale = [0.5, 5.0, 30.0][r.gen_range(0..3)];
        let logits = random(&mut r, &[len], scale);
        let target = Tensor::new(vec![len], (0..len).map(|_| r.gen_bool(0.4) as u8 as f64).collect()).unwrap();
        let smooth = r.gen_range(0.0..2.0);
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let bce = g.bce_with_logits(l, &target).unwrap();
        let dice = g.dice_loss(l, &target, smooth).unwrap();
        let (mut bce_ref, mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0, 0.0);
        for (&z, &y) in logits.data().iter().zip(target.data()) {
            let p = sigmoid(z);
            let (lp, l1p) = if z >= 0.0 { (-(1.0 + (-z).exp()).ln(), -z - (1.0 + (-z).exp()).ln()) } else { (z - (1.0 + z.exp()).ln(), -(1.0 + z.exp()).ln()) };
            bce_ref -= y * lp + (1.0 - y) * l1p;
            inter += p * y;
            ps += p;
            ys += y;
        }
        bce_ref /= len as f64;
        let dice_ref = 1.0 - (2.0 * inter + smooth) / (ps + ys + smooth);
        bce_err = bce_err.max((g.value(bce).item() - bce_ref).abs());
        dice_err = dice_err.max((g.value(dice).item() - dice_ref).abs());
    }
    (iou_bad, prec_bad, bce_err, dice_err)
}

/// A 2×2 map with one positive and three negative logits.
/// Thresholding first and repeating each mask cell 4×4 gives a 4×4 block;
/// upsampling first spreads the positive logit over a larger region.
pub fn golden_boundary_case() -> (Tensor, fan_core::BinaryMask) {
    use fan_core::{binarize, BinaryMask};
    let logits = Tensor::new(vec![2, 2], vec![4.0, -2.0, -2.0, -2.0]).unwrap();
    let coarse = binarize(&logits, 0.35).unwrap();
    let mut wrong = BinaryMask::empty(8, 8);
    for y in 0..8 {
        for x in 0..8 {
            wrong.set(y, x, coarse.get(y / 4, x / 4));
        }
    }
    (logits, wrong)
}
