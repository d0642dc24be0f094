//! Randomized finite-difference suite covering every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_attention, AttentionWeights};
use crate::error::TensorError;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Worst relative error observed for one op across its trials.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid random shape")
}

/// Reduces `out` to a scalar through a fixed random projection, so every
/// output coordinate influences the loss with a distinct weight.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type Body = dyn Fn(&mut Graph, &BoundParams) -> Result<Var, TensorError>;

struct Case {
    store: ParamStore,
    body: Box<Body>,
}

fn store_of(tensors: Vec<Tensor>) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.add(format!("x{i}"), t, ParamGroup::Default).expect("unique names");
    }
    s
}

fn p(b: &BoundParams, i: usize) -> Var {
    b.var(crate::params::ParamId(i))
}

/// Builds one randomized trial of the named op.
fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let m = rng.gen_range(2..5);
    let k = rng.gen_range(2..5);
    let n = rng.gen_range(2..5);
    macro_rules! case {
        ($tensors:expr, $out_shape:expr, |$g:ident, $b:ident| $body:expr) => {{
            let store = store_of($tensors);
            let proj = random_tensor(rng, &$out_shape, 1.0);
            Case {
                store,
                body: Box::new(move |$g: &mut Graph, $b: &BoundParams| {
                    let out = $body?;
                    project($g, out, &proj)
                }),
            }
        }};
    }
    match op {
        "matmul" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[k, n], 1.0)],
            [m, n],
            |g, b| g.matmul(p(b, 0), p(b, 1))
        ),
        "matmul_nt" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[n, k], 1.0)],
            [m, n],
            |g, b| g.matmul_nt(p(b, 0), p(b, 1))
        ),
        "transpose" => case!(vec![random_tensor(rng, &[m, k], 1.0)], [k, m], |g, b| g.transpose(p(b, 0))),
        "add" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[m, k], 1.0)],
            [m, k],
            |g, b| g.add(p(b, 0), p(b, 1))
        ),
        "sub" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[m, k], 1.0)],
            [m, k],
            |g, b| g.sub(p(b, 0), p(b, 1))
        ),
        "mul" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[m, k], 1.0)],
            [m, k],
            |g, b| g.mul(p(b, 0), p(b, 1))
        ),
        "scale" => {
            let f = rng.gen_range(-2.0..2.0);
            case!(vec![random_tensor(rng, &[m, k], 1.0)], [m, k], |g, b| Ok::<_, TensorError>(g.scale(p(b, 0), f)))
        }
        "add_row_bias" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[k], 1.0)],
            [m, k],
            |g, b| g.add_row_bias(p(b, 0), p(b, 1))
        ),
        "add_scalar_var" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[1], 1.0)],
            [m, k],
            |g, b| g.add_scalar_var(p(b, 0), p(b, 1))
        ),
        "gelu" => case!(vec![random_tensor(rng, &[m, k], 2.0)], [m, k], |g, b| Ok::<_, TensorError>(g.gelu(p(b, 0)))),
        "sigmoid" => {
            case!(vec![random_tensor(rng, &[m, k], 3.0)], [m, k], |g, b| Ok::<_, TensorError>(g.sigmoid(p(b, 0))))
        }
        "ln" => {
            let x = random_tensor(rng, &[m, k], 1.0).map(|v| v.abs() + 0.5);
            case!(vec![x], [m, k], |g, b| g.ln(p(b, 0)))
        }
        "softmax" => {
            let axis = rng.gen_range(0..3);
            case!(vec![random_tensor(rng, &[m, k, n], 2.0)], [m, k, n], |g, b| g.softmax(p(b, 0), axis))
        }
        "mask_keys" => {
            let mut mask: Vec<bool> = (0..n + 1).map(|_| rng.gen_bool(0.4)).collect();
            mask[0] = false;
            case!(vec![random_tensor(rng, &[m, n + 1], 2.0)], [m, n + 1], |g, b| {
                let x = g.mask_keys(p(b, 0), &mask)?;
                g.softmax(x, 1)
            })
        }
        "layer_norm" => case!(
            vec![random_tensor(rng, &[m, k + 2], 1.0), random_tensor(rng, &[k + 2], 1.0), random_tensor(rng, &[k + 2], 1.0)],
            [m, k + 2],
            |g, b| g.layer_norm(p(b, 0), p(b, 1), p(b, 2), 1e-5)
        ),
        "reshape" => case!(vec![random_tensor(rng, &[m, k], 1.0)], [k * m], |g, b| g.reshape(p(b, 0), vec![k * m])),
        "slice_rows" => case!(vec![random_tensor(rng, &[m + 2, k], 1.0)], [m, k], |g, b| g.slice_rows(p(b, 0), 1, m)),
        "concat_rows" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[n, k], 1.0)],
            [m + n, k],
            |g, b| g.concat_rows(&[p(b, 0), p(b, 1)])
        ),
        "slice_cols" => case!(vec![random_tensor(rng, &[m, k + 2], 1.0)], [m, k], |g, b| g.slice_cols(p(b, 0), 1, k)),
        "concat_cols" => case!(
            vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[m, n], 1.0)],
            [m, k + n],
            |g, b| g.concat_cols(&[p(b, 0), p(b, 1)])
        ),
        "embedding" => {
            let ids: Vec<usize> = (0..n + 2).map(|_| rng.gen_range(0..m)).collect();
            let len = ids.len();
            case!(vec![random_tensor(rng, &[m, k], 1.0)], [len, k], |g, b| g.embedding(p(b, 0), &ids))
        }
        "conv2d" => {
            let stride = rng.gen_range(1..3);
            let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
            let oh = (h + 2 - 3) / stride + 1;
            let ow = (w + 2 - 3) / stride + 1;
            case!(
                vec![random_tensor(rng, &[h, w, 2], 1.0), random_tensor(rng, &[3, 3, 2, 3], 1.0)],
                [oh, ow, 3],
                |g, b| g.conv2d(p(b, 0), p(b, 1), stride, 1)
            )
        }
        "upsample_bilinear" => {
            let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (oh, ow) = (h * rng.gen_range(1..4), w * 2 + rng.gen_range(0..2));
            case!(vec![random_tensor(rng, &[h, w, 2], 1.0)], [oh, ow, 2], |g, b| g.upsample_bilinear(p(b, 0), oh, ow))
        }
        "sum" => case!(vec![random_tensor(rng, &[m, k], 1.0)], [1], |g, b| Ok::<_, TensorError>(g.sum(p(b, 0)))),
        "mean" => case!(vec![random_tensor(rng, &[m, k], 1.0)], [1], |g, b| Ok::<_, TensorError>(g.mean(p(b, 0)))),
        "bce_with_logits" => {
            let target = binary_tensor(rng, &[m, k]);
            case!(vec![random_tensor(rng, &[m, k], 3.0)], [1], |g, b| g.bce_with_logits(p(b, 0), &target))
        }
        "dice_loss" => {
            let target = binary_tensor(rng, &[m, k]);
            case!(vec![random_tensor(rng, &[m, k], 3.0)], [1], |g, b| g.dice_loss(p(b, 0), &target, 1.0))
        }
        "multi_head_attention" => {
            let heads = rng.gen_range(1..3);
            let d = 2 * heads;
            let lk = n + 1;
            let mut mask: Vec<bool> = (0..lk).map(|_| rng.gen_bool(0.3)).collect();
            mask[lk - 1] = false;
            let mut tensors = vec![
                random_tensor(rng, &[m, d], 1.0),
                random_tensor(rng, &[lk, d], 1.0),
                random_tensor(rng, &[lk, d], 1.0),
            ];
            for _ in 0..4 {
                tensors.push(random_tensor(rng, &[d, d], 1.0));
                tensors.push(random_tensor(rng, &[d], 0.5));
            }
            case!(tensors, [m, d], |g, b| {
                let w = AttentionWeights {
                    wq: p(b, 3),
                    bq: p(b, 4),
                    wk: p(b, 5),
                    bk: p(b, 6),
                    wv: p(b, 7),
                    bv: p(b, 8),
                    wo: p(b, 9),
                    bo: p(b, 10),
                };
                multi_head_attention(g, p(b, 0), p(b, 1), p(b, 2), &w, heads, Some(&mask), "suite")
            })
        }
        other => panic!("no gradient case for op {other:?}"),
    }
}

fn binary_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
        .expect("valid shape")
}

pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row_bias",
    "add_scalar_var",
    "gelu",
    "sigmoid",
    "ln",
    "softmax",
    "mask_keys",
    "layer_norm",
    "reshape",
    "slice_rows",
    "concat_rows",
    "slice_cols",
    "concat_cols",
    "embedding",
    "conv2d",
    "upsample_bilinear",
    "sum",
    "mean",
    "bce_with_logits",
    "dice_loss",
    "multi_head_attention",
];

/// Runs `trials` randomized gradient checks for every op in [`DIFFERENTIABLE_OPS`].
pub fn op_gradient_suite(trials: usize, seed: u64) -> Result<Vec<OpCheck>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { coords_per_param: 64, ..GradCheckOptions::default() };
    DIFFERENTIABLE_OPS
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for t in 0..trials {
                let case = make_case(op, &mut rng);
                let o = GradCheckOptions { seed: seed ^ t as u64, ..opts };
                let report = grad_check(&case.store, &o, |g, b| (case.body)(g, b))?;
                worst = worst.max(report.max_rel_error());
            }
            Ok(OpCheck { op, trials, max_rel_error: worst })
        })
        .collect()
}
