//! Multi-head scaled dot-product attention composed from tape primitives.

use crate::error::TensorError;
use crate::graph::{AttentionRecord, Graph, Var};

/// Projection weights of one attention layer. Weights are `[in × D]`, biases `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

/// Attention of queries `q [Lq×·]` over keys `k [Lk×·]` and values `v [Lk×·]`.
///
/// Scores are scaled by `1/sqrt(D/heads)`. Keys flagged `true` in
/// `key_padding_mask` get zero weight. When the graph records attention,
/// each head's weight matrix is logged under `site`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionWeights,
    heads: usize,
    key_padding_mask: Option<&[bool]>,
    site: &str,
) -> Result<Var, TensorError> {
    let d = *g.shape(w.wq).last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    let lk = g.shape(k)[0];
    if g.shape(v)[0] != lk {
        return Err(TensorError::Shape { op: "attention", lhs: g.shape(k).to_vec(), rhs: g.shape(v).to_vec() });
    }
    if let Some(mask) = key_padding_mask {
        if mask.len() != lk {
            return Err(TensorError::Shape { op: "attention mask", lhs: g.shape(k).to_vec(), rhs: vec![mask.len()] });
        }
        if mask.iter().all(|&m| m) {
            return Err(TensorError::DegenerateMask);
        }
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let qp = linear(g, q, w.wq, w.bq)?;
    let kp = linear(g, k, w.wk, w.bk)?;
    let vp = linear(g, v, w.wv, w.bv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * head_dim, head_dim)?,
                g.slice_cols(kp, h * head_dim, head_dim)?,
                g.slice_cols(vp, h * head_dim, head_dim)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(mask) = key_padding_mask {
            if mask.iter().any(|&m| m) {
                scores = g.mask_keys(scores, mask)?;
            }
        }
        let attn = g.softmax(scores, 1)?;
        if g.is_recording_attention() {
            let weights = g.value(attn).clone();
            g.log_attention(AttentionRecord {
                site: site.to_string(),
                head: h,
                weights,
                key_padding_mask: key_padding_mask.map(<[bool]>::to_vec),
            });
        }
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, merged, w.wo, w.bo)
}
